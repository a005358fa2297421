// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the vtsk binary: exit codes, JSON discipline, and the
// train -> features -> probe quickstart.

#include <catch2/catch.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace {

const std::string kCli = VTSK_CLI_PATH;
const std::string kSource = VTSK_SOURCE_DIR;

struct CmdResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

CmdResult run(const std::string& args, const std::string& tag) {
  const std::string out_path = "cli_out_" + tag + ".txt";
  const std::string err_path = "cli_err_" + tag + ".txt";
  const std::string cmd = kCli + " " + args + " > " + out_path + " 2> " + err_path;
  const int status = std::system(cmd.c_str());
  CmdResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  std::remove(out_path.c_str());
  std::remove(err_path.c_str());
  return r;
}

std::string slurp_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("unknown subcommands and flags are usage errors") {
  CHECK(run("frobnicate", "u1").exit_code == 1);
  CHECK(run("cost --no-such-flag 3", "u2").exit_code == 1);
  CHECK(run("", "u3").exit_code == 1);
}

TEST_CASE("cost reproduces the largest published shape") {
  CmdResult r = run("cost --width 1664 --depth 48 --mlp 8192 --heads 16 --patch 14 --res 224 --json",
                    "cost");
  REQUIRE(r.exit_code == 0);
  const auto j = nlohmann::json::parse(r.out);  // --json means stdout is JSON, full stop
  const double params_m = j.at("body_params").get<double>() / 1e6;
  CHECK(std::abs(params_m - 1843.0) / 1843.0 < 0.015);
  const double gflops = j.at("flops").get<double>() / 1e9;
  CHECK(std::abs(gflops - 965.3) / 965.3 < 0.03);
  CHECK(j.at("tokens") == 256);
  CHECK(j.at("padded_tokens") == 256);
}

TEST_CASE("schedule dump hits the warmup endpoint") {
  CmdResult r = run(
      "schedule --base 8e-4 --warmup 10000 --decay rsqrt --timescale 10000 --total 100000 "
      "--cooldown 50000 --out cli_sched.csv",
      "sched");
  REQUIRE(r.exit_code == 0);
  std::ifstream f("cli_sched.csv");
  std::string line;
  std::getline(f, line);
  CHECK(line == "step,lr");
  bool found = false;
  while (std::getline(f, line)) {
    if (line.rfind("10000,", 0) == 0) {
      CHECK(std::stod(line.substr(6)) == 8e-4);
      found = true;
    }
  }
  CHECK(found);
  std::remove("cli_sched.csv");
}

TEST_CASE("fit-law on the bundled fixtures emits the documented fit.json") {
  CmdResult r = run("fit-law --runs " + kSource + "/runs/fewshot.csv --metric INet10 --shapes " +
                        kSource + "/tables/table2.csv --out cli_fit.json --json",
                    "fit");
  REQUIRE(r.exit_code == 0);
  const auto printed = nlohmann::json::parse(r.out);
  const auto stored = nlohmann::json::parse(slurp_file("cli_fit.json"));
  CHECK(printed == stored);
  CHECK(stored.at("params").at("c").get<double>() > 0.0);
  CHECK(stored.at("params").at("b").get<double>() > 0.0);
  CHECK(stored.at("frontier").size() >= 4);
  CHECK(stored.at("n_points").get<int>() >= 4);
  CHECK(stored.contains("rms"));
  CHECK(stored.contains("residuals"));
  std::remove("cli_fit.json");
}

TEST_CASE("fit-law with a missing file is a data error") {
  CmdResult r = run("fit-law --runs no_such_file.csv --shapes also_missing.csv", "fitmiss");
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("data error") != std::string::npos);
}

TEST_CASE("shapefind emits one row per valid grid point") {
  CmdResult r = run(
      "shapefind --widths 256,512 --depths 6 --heads 8 --mlps 1024 --patch 14 --res 224 "
      "--batch 8 --json",
      "sf");
  REQUIRE(r.exit_code == 0);
  const auto j = nlohmann::json::parse(r.out);
  REQUIRE(j.size() == 2);
  CHECK(j[0].at("width") == 256);
  CHECK(j[1].at("width") == 512);
  CHECK(j[0].at("fits").contains("adafactor-mod"));
}

TEST_CASE("quickstart: train, features, probe runs deterministically from scratch") {
  auto pipeline = [&](const std::string& tag) {
    CmdResult t = run("train --steps 60 --seed 0 --optimizer adafactor-mod --head-type gap "
                      "--out-checkpoint ckpt_" + tag + ".bin --out-log log_" + tag +
                          ".csv --json",
                      "train" + tag);
    REQUIRE(t.exit_code == 0);
    CmdResult f = run("features --checkpoint ckpt_" + tag + ".bin --out feats_" + tag +
                          ".bin --per-class 24 --seed 1 --json",
                      "feat" + tag);
    REQUIRE(f.exit_code == 0);
    CmdResult p = run("probe --features feats_" + tag + ".bin --shots 10 --seed 0 --json",
                      "probe" + tag);
    REQUIRE(p.exit_code == 0);
    const std::string ckpt = slurp_file("ckpt_" + tag + ".bin");
    const std::string feats = slurp_file("feats_" + tag + ".bin");
    return std::make_tuple(t.out, ckpt, feats, p.out);
  };
  auto [t1, c1, f1, p1] = pipeline("a");
  auto [t2, c2, f2, p2] = pipeline("b");
  // the train JSON differs only in the output paths it was asked to use
  auto ja = nlohmann::json::parse(t1);
  auto jb = nlohmann::json::parse(t2);
  CHECK(ja.at("final_loss") == jb.at("final_loss"));
  CHECK(ja.at("train_accuracy") == jb.at("train_accuracy"));
  CHECK(c1 == c2);
  CHECK(f1 == f2);
  CHECK(p1 == p2);

  const auto probe = nlohmann::json::parse(p1);
  CHECK(probe.at("accuracy").get<double>() >= 0.0);
  CHECK(probe.at("accuracy").get<double>() <= 1.0);
  CHECK(probe.at("train_size") == 40);

  for (const char* tag : {"a", "b"}) {
    std::remove(("ckpt_" + std::string(tag) + ".bin").c_str());
    std::remove(("log_" + std::string(tag) + ".csv").c_str());
    std::remove(("feats_" + std::string(tag) + ".bin").c_str());
  }
}

TEST_CASE("train accepts an appendix-style config file") {
  {
    std::ofstream f("cli_train_config.json");
    f << R"({
      "lr": 8e-4,
      "wd": 2.4e-5,
      "wd_mults": [[".*head/kernel", 100.0], [".*/kernel", 1.0]],
      "schedule": {"decay_type": "rsqrt", "timescale": 100, "warmup_steps": 5, "cooldown_steps": 8},
      "total_steps": 40,
      "batch_size": 8,
      "optimizer": "adam-hp",
      "seed": 3,
      "model": {"width": 32, "depth": 1, "mlp_width": 64, "heads": 2, "patch_size": 4,
                "image_res": 16, "channels": 1, "num_classes": 4, "pool_type": "map"},
      "data": {"per_class": 16, "sigma": 0.05, "seed": 0}
    })";
  }
  CmdResult r = run("train --config cli_train_config.json --out-checkpoint cli_cfg_ckpt.bin "
                    "--out-log cli_cfg_log.csv --json",
                    "cfgtrain");
  REQUIRE(r.exit_code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("optimizer") == "adam-hp");
  CHECK(j.at("head_type") == "map");
  CHECK(j.at("steps") == 40);
  std::remove("cli_train_config.json");
  std::remove("cli_cfg_ckpt.bin");
  std::remove("cli_cfg_log.csv");
}
