// SPDX-License-Identifier: Apache-2.0
//
// vtsk: analytic ViT cost/memory model and shape search, saturating
// power-law fitting over run logs, learning-rate schedule dumps, a toy-scale
// trainer, feature extraction and the few-shot linear probe.
//
// Exit codes: 0 success, 1 usage/configuration error, 2 data error.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vtsk/common.hpp"
#include "vtsk/fewshot.hpp"
#include "vtsk/optim.hpp"
#include "vtsk/run_store.hpp"
#include "vtsk/scaling_laws.hpp"
#include "vtsk/shape_cost.hpp"
#include "vtsk/toytrain.hpp"
#include "vtsk/vit.hpp"

namespace {

using nlohmann::json;

json memory_json(const vtsk::MemoryBreakdown& mb) {
  return {{"params_bytes", mb.params_bytes},
          {"optimizer_bytes", mb.optimizer_bytes},
          {"grad_bytes", mb.grad_bytes},
          {"activation_bytes", mb.activation_bytes},
          {"resident_bytes", mb.resident_bytes()},
          {"fits", mb.fits}};
}

std::vector<std::int64_t> parse_int_list(const std::string& raw) {
  std::vector<std::int64_t> out;
  std::string cur;
  for (char c : raw + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stoll(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

double gib(double bytes) { return bytes / (1024.0 * 1024.0 * 1024.0); }

// ---------------------------------------------------------------------------
// cost
// ---------------------------------------------------------------------------

struct CostArgs {
  std::int64_t width = 0, depth = 0, mlp = 0, heads = 0, patch = 14;
  std::int64_t res = 224, classes = 1000, channels = 3, batch = 1;
  std::string head_type = "map";
  std::string optimizer;  // empty = report all modes
  double budget_gib = 16.0;
  bool json_out = false;
};

int run_cost(const CostArgs& a) {
  vtsk::ShapeConfig shape;
  shape.width = a.width;
  shape.depth = a.depth;
  shape.mlp_width = a.mlp;
  shape.heads = a.heads;
  shape.patch_size = a.patch;
  shape.image_res = a.res;
  shape.channels = a.channels;
  shape.num_classes = a.classes;
  shape.head_type = vtsk::head_type_from(a.head_type);

  vtsk::MemoryModel model;
  model.budget_bytes = a.budget_gib * (1ull << 30);
  const vtsk::CostReport report = vtsk::cost_report(shape, a.batch, model);

  if (a.json_out) {
    json j;
    j["shape"] = {{"width", shape.width},       {"depth", shape.depth},
                  {"mlp_width", shape.mlp_width}, {"heads", shape.heads},
                  {"patch_size", shape.patch_size}, {"image_res", shape.image_res},
                  {"channels", shape.channels},  {"num_classes", shape.num_classes},
                  {"head_type", vtsk::to_string(shape.head_type)}};
    j["body_params"] = report.body_params;
    j["head_params"] = report.head_params;
    j["macs"] = report.macs;
    j["flops"] = report.flops;
    j["tokens"] = report.tokens;
    j["padded_tokens"] = report.padded_tokens;
    j["batch"] = a.batch;
    j["budget_bytes"] = model.budget_bytes;
    for (const auto& [mode, mb] : report.memory) j["memory"][mode] = memory_json(mb);
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  std::printf("shape          %lldw x %lldd, mlp %lld, %lld heads, patch %lld, %lldpx, %s head\n",
              (long long)shape.width, (long long)shape.depth, (long long)shape.mlp_width,
              (long long)shape.heads, (long long)shape.patch_size, (long long)shape.image_res,
              vtsk::to_string(shape.head_type).c_str());
  std::printf("body params    %.2f M\n", report.body_params / 1e6);
  std::printf("head params    %.2f M\n", report.head_params / 1e6);
  std::printf("flops          %.2f GFLOPs @ %lld^2 (2 x %.2f GMACs)\n", report.flops / 1e9,
              (long long)shape.image_res, report.macs / 1e9);
  std::printf("tokens         %lld (padded to %lld)\n", (long long)report.tokens,
              (long long)report.padded_tokens);
  std::printf("memory @ batch %lld, budget %.1f GiB\n", (long long)a.batch,
              gib(model.budget_bytes));
  for (const auto& [mode, mb] : report.memory) {
    if (!a.optimizer.empty() && mode != a.optimizer) continue;
    std::printf("  %-14s params %7.3f GiB  optstate %7.3f GiB  grads %7.3f GiB  acts %7.3f GiB  %s\n",
                mode.c_str(), gib(mb.params_bytes), gib(mb.optimizer_bytes), gib(mb.grad_bytes),
                gib(mb.activation_bytes), mb.fits ? "fits" : "DOES NOT FIT");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// shapefind
// ---------------------------------------------------------------------------

struct ShapefindArgs {
  std::string widths, depths, heads, mlps;
  std::int64_t patch = 14, res = 224, batch = 1;
  double budget_gib = 16.0;
  std::string modes = "adam,adam-hp,adafactor-mod";
  bool json_out = false;
};

int run_shapefind(const ShapefindArgs& a) {
  vtsk::GridSpec grid;
  grid.widths = parse_int_list(a.widths);
  grid.depths = parse_int_list(a.depths);
  grid.heads = parse_int_list(a.heads);
  grid.mlp_widths = parse_int_list(a.mlps);
  grid.patch_size = a.patch;

  std::vector<vtsk::OptimizerMode> modes;
  std::string cur;
  for (char c : a.modes + ",") {
    if (c == ',') {
      if (!cur.empty()) modes.push_back(vtsk::optimizer_mode_from(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }

  vtsk::MemoryModel model;
  model.budget_bytes = a.budget_gib * (1ull << 30);
  const auto points = vtsk::shapefind(grid, a.res, a.batch, modes, model);

  if (a.json_out) {
    json arr = json::array();
    for (const auto& p : points) {
      json j = {{"width", p.shape.width},   {"depth", p.shape.depth},
                {"mlp_width", p.shape.mlp_width}, {"heads", p.shape.heads},
                {"params", p.params},       {"flops", p.flops},
                {"speed_proxy", p.speed_proxy}};
      for (const auto& [mode, fits] : p.fits) j["fits"][mode] = fits;
      arr.push_back(j);
    }
    std::cout << arr.dump(2) << "\n";
    return 0;
  }

  std::printf("%6s %6s %6s %6s %12s %12s %14s", "depth", "width", "mlp", "heads", "params",
              "GFLOPs", "speed proxy");
  for (const auto& mode : modes) std::printf(" %14s", vtsk::to_string(mode).c_str());
  std::printf("\n");
  for (const auto& p : points) {
    std::printf("%6lld %6lld %6lld %6lld %11.1fM %12.1f %14.3e",
                (long long)p.shape.depth, (long long)p.shape.width,
                (long long)p.shape.mlp_width, (long long)p.shape.heads, p.params / 1e6,
                p.flops / 1e9, p.speed_proxy);
    for (const auto& mode : modes)
      std::printf(" %14s", p.fits.at(vtsk::to_string(mode)) ? "fits" : "-");
    std::printf("\n");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// fit-law
// ---------------------------------------------------------------------------

struct FitArgs {
  std::string runs, shapes, metric = "INet10";
  std::string out = "fit.json", curve, svg;
  std::int64_t batch = 4096;
  bool all_points = false;
  bool linear_space = false;
  std::uint64_t seed = 0;
  bool json_out = false;
};

int run_fit_law(const FitArgs& a) {
  vtsk::RunTable table = vtsk::parse_runs_csv(a.runs);
  const auto shapes = vtsk::parse_shape_table(a.shapes);
  vtsk::attach_compute(table, shapes, a.batch);

  std::vector<vtsk::RunRecord> selected;
  for (const auto& r : table.records)
    if (r.metric_name == a.metric) selected.push_back(r);
  if (selected.empty())
    throw vtsk::DataError("no rows with metric '" + a.metric + "' in " + a.runs);

  const auto frontier = vtsk::pareto_frontier(selected);
  vtsk::FitOptions options;
  options.log_space = !a.linear_space;
  options.seed = a.seed;
  options.frontier_only = !a.all_points;
  const auto pts = vtsk::to_fit_points(options.frontier_only ? frontier : selected);
  const vtsk::FitReport fit = vtsk::fit_law(pts, options);

  json out;
  out["params"] = {{"a", fit.params.a}, {"b", fit.params.b}, {"c", fit.params.c},
                   {"d", fit.params.d}};
  out["rms"] = fit.rms_residual;
  out["n_points"] = fit.n_points;
  out["converged"] = fit.converged;
  out["restarts_used"] = fit.restarts_used;
  out["metric"] = a.metric;
  out["objective"] = options.log_space ? "log" : "linear";
  out["frontier"] = json::array();
  for (const auto& r : frontier)
    out["frontier"].push_back({{"compute", r.compute},
                               {"error", r.error_rate},
                               {"model", r.model_name},
                               {"steps", r.steps},
                               {"data_size", r.dataset_size}});
  out["residuals"] = json::array();
  for (const auto& [compute, error] : pts) {
    const double pred = vtsk::predict(fit.params, compute);
    out["residuals"].push_back(options.log_space ? std::log(error) - std::log(pred)
                                                 : error - pred);
  }
  {
    std::ofstream f(a.out);
    if (!f) throw vtsk::DataError("cannot write " + a.out);
    f << out.dump(2) << "\n";
  }

  if (!a.curve.empty() || !a.svg.empty()) {
    std::vector<vtsk::CurvePoint> curve;
    for (const auto& [compute, error] : pts)
      curve.push_back({compute, error, vtsk::predict(fit.params, compute)});
    if (!a.curve.empty()) vtsk::emit_plot(curve, a.curve, vtsk::PlotFormat::kCsv);
    if (!a.svg.empty()) vtsk::emit_plot(curve, a.svg, vtsk::PlotFormat::kSvg);
  }

  if (a.json_out) {
    std::cout << out.dump(2) << "\n";
  } else {
    std::printf("fit: E = %.6g * (C + %.6g)^(-%.6g) + %.6g\n", fit.params.a, fit.params.d,
                fit.params.b, fit.params.c);
    std::printf("rms(%s) = %.6g over %d frontier points (%d starts, %s)\n",
                options.log_space ? "log" : "linear", fit.rms_residual, fit.n_points,
                fit.restarts_used, fit.converged ? "converged" : "NOT CONVERGED");
    std::printf("wrote %s\n", a.out.c_str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

struct ScheduleArgs {
  double base = 8e-4;
  std::int64_t warmup = 10000;
  std::string decay = "rsqrt";
  double timescale = 10000;
  std::int64_t total = 100000;
  std::int64_t cooldown = 50000;
  std::int64_t every = 1;
  std::string out;
};

int run_schedule(const ScheduleArgs& a) {
  vtsk::ScheduleConfig s;
  s.base_lr = a.base;
  s.warmup_steps = a.warmup;
  s.decay_type = vtsk::decay_type_from(a.decay);
  s.timescale = a.timescale;
  s.total_steps = a.total;
  s.cooldown_steps = a.cooldown;
  s.validate();

  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!a.out.empty()) {
    file.open(a.out, std::ios::binary);
    if (!file) throw vtsk::DataError("cannot write " + a.out);
    os = &file;
  }
  (*os) << "step,lr\n";
  char buf[64];
  for (std::int64_t step = 0; step <= a.total; step += a.every) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g\n", (long long)step, vtsk::lr_at(s, step));
    (*os) << buf;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train / features / probe
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out_checkpoint = "checkpoint.bin";
  std::string out_log = "train_log.csv";
  std::int64_t steps = -1;
  std::int64_t seed = -1;
  std::string optimizer, head_type;
  bool json_out = false;
};

vtsk::TrainConfig train_config_from_json(const json& j) {
  vtsk::TrainConfig c;
  const json model = j.value("model", json::object());
  c.shape.width = model.value("width", 32);
  c.shape.depth = model.value("depth", 2);
  c.shape.mlp_width = model.value("mlp_width", 64);
  c.shape.heads = model.value("heads", 2);
  c.shape.patch_size = model.value("patch_size", 4);
  c.shape.image_res = model.value("image_res", 16);
  c.shape.channels = model.value("channels", 1);
  c.shape.num_classes = model.value("num_classes", 4);
  c.shape.head_type = vtsk::head_type_from(model.value("pool_type", "gap"));
  c.shape.map_mlp = model.value("map_mlp", false);

  c.optimizer = vtsk::optimizer_mode_from(j.value("optimizer", "adafactor-mod"));
  const double lr = j.value("lr", 8e-4);
  c.schedule.base_lr = lr;
  const json sched = j.value("schedule", json::object());
  c.schedule.decay_type = vtsk::decay_type_from(sched.value("decay_type", "rsqrt"));
  c.schedule.timescale = sched.value("timescale", 500.0);
  c.schedule.warmup_steps = sched.value("warmup_steps", 100);
  c.schedule.cooldown_steps = sched.value("cooldown_steps", 400);
  c.total_steps = j.value("total_steps", 2000);
  c.schedule.total_steps = c.total_steps;
  c.base_wd = j.value("wd", 0.03 * lr);
  if (j.contains("wd_mults")) {
    c.wd_rules.clear();
    for (const auto& rule : j.at("wd_mults"))
      c.wd_rules.push_back({rule.at(0).get<std::string>(), rule.at(1).get<double>()});
  }
  c.batch = j.value("batch_size", 16);
  c.seed = j.value("seed", 0);
  c.polyak_decay = j.value("polyak", -1.0);
  return c;
}

vtsk::SyntheticSpec data_spec_from_json(const json& j, const vtsk::ShapeConfig& shape) {
  vtsk::SyntheticSpec spec;
  const json data = j.value("data", json::object());
  spec.res = shape.image_res;
  spec.classes = static_cast<int>(shape.num_classes);
  spec.per_class = data.value("per_class", 128);
  spec.sigma = data.value("sigma", 0.05);
  spec.amplitude = data.value("amplitude", 1.0);
  spec.seed = data.value("seed", 0);
  return spec;
}

int run_train(const TrainArgs& a) {
  json j = json::object();
  if (!a.config.empty()) {
    std::ifstream f(a.config);
    if (!f) throw vtsk::DataError("cannot open config: " + a.config);
    f >> j;
  }
  vtsk::TrainConfig config = train_config_from_json(j);
  if (a.steps >= 0) {
    config.total_steps = a.steps;
    config.schedule.total_steps = a.steps;
    if (config.schedule.warmup_steps + config.schedule.cooldown_steps > a.steps) {
      config.schedule.warmup_steps = a.steps / 10;
      config.schedule.cooldown_steps = a.steps / 5;
    }
  }
  if (a.seed >= 0) config.seed = static_cast<std::uint64_t>(a.seed);
  if (!a.optimizer.empty()) config.optimizer = vtsk::optimizer_mode_from(a.optimizer);
  if (!a.head_type.empty()) config.shape.head_type = vtsk::head_type_from(a.head_type);

  vtsk::LabeledImages data;
  const json data_cfg = j.value("data", json::object());
  if (data_cfg.contains("idx_images")) {
    data = vtsk::load_idx(data_cfg.at("idx_images").get<std::string>(),
                          data_cfg.at("idx_labels").get<std::string>());
  } else {
    data = vtsk::gen_synthetic(data_spec_from_json(j, config.shape));
  }

  const vtsk::TrainResult result = vtsk::train(config, data);
  vtsk::save_checkpoint(a.out_checkpoint, config.shape, result.params);
  result.log.write_csv(a.out_log);
  const double accuracy = vtsk::evaluate_accuracy(result.params, data, config.shape);

  if (a.json_out) {
    json out = {{"steps", config.total_steps},
                {"final_loss", result.log.rows.empty() ? std::log(double(config.shape.num_classes))
                                                       : result.log.rows.back().loss},
                {"train_accuracy", accuracy},
                {"optimizer", vtsk::to_string(config.optimizer)},
                {"head_type", vtsk::to_string(config.shape.head_type)},
                {"checkpoint", a.out_checkpoint},
                {"log", a.out_log}};
    std::cout << out.dump(2) << "\n";
  } else {
    std::printf("trained %lld steps (%s, %s head): final loss %.4f, train accuracy %.4f\n",
                (long long)config.total_steps, vtsk::to_string(config.optimizer).c_str(),
                vtsk::to_string(config.shape.head_type).c_str(),
                result.log.rows.empty() ? 0.0 : result.log.rows.back().loss, accuracy);
    std::printf("wrote %s and %s\n", a.out_checkpoint.c_str(), a.out_log.c_str());
  }
  return 0;
}

struct FeatureArgs {
  std::string checkpoint;
  std::string out = "features.bin";
  std::string idx_images, idx_labels;
  std::int64_t per_class = 128;
  double sigma = 0.05;
  double amplitude = 1.0;
  std::uint64_t seed = 1;  // a different draw than the default training seed
  bool json_out = false;
};

int run_features(const FeatureArgs& a) {
  auto [shape, params] = vtsk::load_checkpoint(a.checkpoint);
  vtsk::LabeledImages data;
  if (!a.idx_images.empty()) {
    data = vtsk::load_idx(a.idx_images, a.idx_labels);
  } else {
    vtsk::SyntheticSpec spec;
    spec.res = shape.image_res;
    spec.classes = static_cast<int>(shape.num_classes);
    spec.per_class = a.per_class;
    spec.sigma = a.sigma;
    spec.amplitude = a.amplitude;
    spec.seed = a.seed;
    data = vtsk::gen_synthetic(spec);
  }
  const vtsk::FeatureSet features = vtsk::extract_features(params, data, shape);
  vtsk::save_features(a.out, features);
  if (a.json_out) {
    json out = {{"n", features.n()}, {"dim", features.dim()},
                {"classes", features.class_count}, {"out", a.out}};
    std::cout << out.dump(2) << "\n";
  } else {
    std::printf("wrote %lld x %lld features (%d classes) to %s\n", (long long)features.n(),
                (long long)features.dim(), features.class_count, a.out.c_str());
  }
  return 0;
}

struct ProbeArgs {
  std::string features;
  std::string test_features;
  int shots = 10;
  double l2 = -1.0;  // < 0: the 1e-3 * n default
  std::uint64_t seed = 0;
  bool bias = false;
  bool json_out = false;
};

int run_probe(const ProbeArgs& a) {
  const vtsk::FeatureSet all = vtsk::load_features(a.features);
  const vtsk::KShotSplit split = vtsk::kshot_split(all, a.shots, a.seed);
  const vtsk::FeatureSet& train = split.train;
  const double lambda = a.l2 >= 0.0 ? a.l2 : 1e-3 * static_cast<double>(train.n());

  vtsk::FeatureSet test;
  if (!a.test_features.empty()) {
    test = vtsk::load_features(a.test_features);
  } else if (split.has_rest) {
    test = split.rest;
  } else {
    throw vtsk::DataError("every row went into the k-shot sample; pass --test-features");
  }

  const vtsk::Tensor X = a.bias ? vtsk::augment_ones(train.X) : train.X;
  const vtsk::Tensor W =
      vtsk::solve_ridge(X, vtsk::one_hot(train.y, train.class_count), lambda);
  const double accuracy = vtsk::evaluate_probe(W, test);

  if (a.json_out) {
    json out = {{"accuracy", accuracy},   {"shots", a.shots},
                {"l2", lambda},           {"train_size", train.n()},
                {"test_size", test.n()},  {"bias", a.bias}};
    std::cout << out.dump(2) << "\n";
  } else {
    std::printf("%d-shot probe: accuracy %.4f (l2 %.6g, %lld train rows, %lld test rows)\n",
                a.shots, accuracy, lambda, (long long)train.n(), (long long)test.n());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ViT scaling toolkit: cost model, shape search, law fitting, toy training"};
  app.require_subcommand(1);

  CostArgs cost;
  auto* cost_cmd = app.add_subcommand("cost", "Parameters, FLOPs and memory for one shape");
  cost_cmd->add_option("--width", cost.width)->required();
  cost_cmd->add_option("--depth", cost.depth)->required();
  cost_cmd->add_option("--mlp", cost.mlp)->required();
  cost_cmd->add_option("--heads", cost.heads)->required();
  cost_cmd->add_option("--patch", cost.patch);
  cost_cmd->add_option("--res", cost.res);
  cost_cmd->add_option("--classes", cost.classes);
  cost_cmd->add_option("--channels", cost.channels);
  cost_cmd->add_option("--head-type", cost.head_type);
  cost_cmd->add_option("--optimizer", cost.optimizer);
  cost_cmd->add_option("--batch", cost.batch);
  cost_cmd->add_option("--budget-gib", cost.budget_gib);
  cost_cmd->add_flag("--json", cost.json_out);

  ShapefindArgs sf;
  auto* sf_cmd = app.add_subcommand("shapefind", "Feasibility sweep over a shape grid");
  sf_cmd->add_option("--widths", sf.widths)->required();
  sf_cmd->add_option("--depths", sf.depths)->required();
  sf_cmd->add_option("--heads", sf.heads)->required();
  sf_cmd->add_option("--mlps", sf.mlps)->required();
  sf_cmd->add_option("--patch", sf.patch);
  sf_cmd->add_option("--res", sf.res);
  sf_cmd->add_option("--batch", sf.batch);
  sf_cmd->add_option("--budget-gib", sf.budget_gib);
  sf_cmd->add_option("--modes", sf.modes);
  sf_cmd->add_flag("--json", sf.json_out);

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit-law", "Fit the saturating power law to run logs");
  fit_cmd->add_option("--runs", fit.runs)->required();
  fit_cmd->add_option("--shapes", fit.shapes)->required();
  fit_cmd->add_option("--metric", fit.metric);
  fit_cmd->add_option("--out", fit.out);
  fit_cmd->add_option("--curve", fit.curve);
  fit_cmd->add_option("--svg", fit.svg);
  fit_cmd->add_option("--batch", fit.batch);
  fit_cmd->add_flag("--all-points", fit.all_points);
  fit_cmd->add_flag("--linear-space", fit.linear_space);
  fit_cmd->add_option("--seed", fit.seed);
  fit_cmd->add_flag("--json", fit.json_out);

  ScheduleArgs sched;
  auto* sched_cmd = app.add_subcommand("schedule", "Dump a step,lr schedule CSV");
  sched_cmd->add_option("--base", sched.base);
  sched_cmd->add_option("--warmup", sched.warmup);
  sched_cmd->add_option("--decay", sched.decay);
  sched_cmd->add_option("--timescale", sched.timescale);
  sched_cmd->add_option("--total", sched.total);
  sched_cmd->add_option("--cooldown", sched.cooldown);
  sched_cmd->add_option("--every", sched.every);
  sched_cmd->add_option("--out", sched.out);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train the toy ViT on the synthetic task");
  train_cmd->add_option("--config", train.config);
  train_cmd->add_option("--out-checkpoint", train.out_checkpoint);
  train_cmd->add_option("--out-log", train.out_log);
  train_cmd->add_option("--steps", train.steps);
  train_cmd->add_option("--seed", train.seed);
  train_cmd->add_option("--optimizer", train.optimizer);
  train_cmd->add_option("--head-type", train.head_type);
  train_cmd->add_flag("--json", train.json_out);

  FeatureArgs feats;
  auto* feat_cmd = app.add_subcommand("features", "Extract frozen features from a checkpoint");
  feat_cmd->add_option("--checkpoint", feats.checkpoint)->required();
  feat_cmd->add_option("--out", feats.out);
  feat_cmd->add_option("--idx-images", feats.idx_images);
  feat_cmd->add_option("--idx-labels", feats.idx_labels);
  feat_cmd->add_option("--per-class", feats.per_class);
  feat_cmd->add_option("--sigma", feats.sigma);
  feat_cmd->add_option("--amplitude", feats.amplitude);
  feat_cmd->add_option("--seed", feats.seed);
  feat_cmd->add_flag("--json", feats.json_out);

  ProbeArgs probe;
  auto* probe_cmd = app.add_subcommand("probe", "Few-shot ridge probe on stored features");
  probe_cmd->add_option("--features", probe.features)->required();
  probe_cmd->add_option("--test-features", probe.test_features);
  probe_cmd->add_option("--shots", probe.shots);
  probe_cmd->add_option("--l2", probe.l2);
  probe_cmd->add_option("--seed", probe.seed);
  probe_cmd->add_flag("--bias", probe.bias);
  probe_cmd->add_flag("--json", probe.json_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // help text, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // usage error
  }

  try {
    if (cost_cmd->parsed()) return run_cost(cost);
    if (sf_cmd->parsed()) return run_shapefind(sf);
    if (fit_cmd->parsed()) return run_fit_law(fit);
    if (sched_cmd->parsed()) return run_schedule(sched);
    if (train_cmd->parsed()) return run_train(train);
    if (feat_cmd->parsed()) return run_features(feats);
    if (probe_cmd->parsed()) return run_probe(probe);
  } catch (const vtsk::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const vtsk::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
