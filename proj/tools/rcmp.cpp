// rcmp: command-line driver for the train -> prune -> finetune -> quantize
// -> eval -> bench pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 runtime or data error.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rcmp/rcmp.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Global {
  bool json_mode = false;
  std::string config_path;
  std::optional<std::uint64_t> seed;

  std::uint64_t resolved_seed() const {
    if (seed) return *seed;
    if (const char* env = std::getenv("RCMP_SEED"); env && *env) {
      try {
        std::size_t used = 0;
        const auto v = std::stoull(env, &used);
        if (used == std::strlen(env)) return v;
      } catch (const std::exception&) {
      }
      throw UsageError(std::string("RCMP_SEED is not an unsigned integer: '") + env + "'");
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------
// Config file expansion: keys of a flat JSON object become long flags placed
// before the user's own arguments; keys the user passed explicitly are
// dropped, so flags always win over the file.

const std::vector<std::string> kCommands{"gen-data", "train", "prune", "finetune",
                                         "quantize", "eval",  "bench", "inspect"};

bool user_gave(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (!path) return args;
  std::ifstream in(*path);
  if (!in) throw UsageError("cannot open config file '" + *path + "'");
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config file '" + *path + "' is not valid JSON: " + e.what());
  }
  if (!cfg.is_object()) throw UsageError("config file '" + *path + "' must hold a JSON object");
  std::vector<std::string> extra;
  for (const auto& [key, value] : cfg.items()) {
    const std::string flag = "--" + key;
    if (key == "config" || user_gave(args, flag)) continue;
    auto scalar = [&](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        extra.push_back(flag);
        extra.push_back(scalar(v));
      }
    } else if (!value.is_null()) {
      extra.push_back(flag);
      extra.push_back(scalar(value));
    }
  }
  auto pos = std::find_if(args.begin() + 1, args.end(), [](const std::string& a) {
    return std::find(kCommands.begin(), kCommands.end(), a) != kCommands.end();
  });
  const auto at = pos == args.end() ? args.begin() + 1 : pos + 1;
  args.insert(at, extra.begin(), extra.end());
  return args;
}

// ---------------------------------------------------------------------------
// Shared helpers

double now_ms() { return rcmp::steady_ms(); }

fs::path sidecar(const fs::path& out, const std::string& suffix) { return fs::path(out.string() + suffix); }

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
}

json provenance(const std::string& command, const json& config, const std::optional<std::string>& input_hash) {
  json p{{"tool", "rcmp"}, {"command", command}, {"config", config}};
  p["input_model_hash"] = input_hash ? json(*input_hash) : json(nullptr);
  return p;
}

/// Echoes the resolved configuration next to the artifact.
void echo_config(const fs::path& out, const std::string& command, const json& config) {
  write_json_file(sidecar(out, ".config.json"), {{"command", command}, {"config", config}});
}

/// Wall time of this command plus the accumulated time of the model it
/// started from, kept outside the artifact so artifacts stay reproducible.
void write_timing(const fs::path& out, const std::string& command, double wall_ms,
                  const std::optional<fs::path>& input_model) {
  double upstream = 0.0;
  if (input_model) {
    std::ifstream in(sidecar(*input_model, ".timing.json"));
    if (in) {
      try {
        upstream = json::parse(in).value("pipeline_ms", 0.0);
      } catch (const json::exception&) {
      }
    }
  }
  write_json_file(sidecar(out, ".timing.json"),
                  {{"command", command}, {"wall_ms", wall_ms}, {"pipeline_ms", upstream + wall_ms}});
}

struct SplitFlags {
  double train = 0.8, val = 0.1, test = 0.1;
  std::optional<std::uint64_t> split_seed;

  void add(CLI::App* cmd) {
    cmd->add_option("--train-frac", train, "Fraction of groups used for training")->capture_default_str();
    cmd->add_option("--val-frac", val, "Fraction of groups used for validation")->capture_default_str();
    cmd->add_option("--test-frac", test, "Fraction of groups used for testing")->capture_default_str();
    cmd->add_option("--split-seed", split_seed, "Seed of the group shuffle (defaults to --seed)");
  }
  rcmp::SplitSpec spec(std::uint64_t seed) const { return {train, val, test, split_seed.value_or(seed)}; }
  json to_json(std::uint64_t seed) const {
    return {{"train_frac", train}, {"val_frac", val}, {"test_frac", test}, {"split_seed", split_seed.value_or(seed)}};
  }
};

struct LoadedData {
  rcmp::DatasetIndex index;
  rcmp::DatasetSplit split;
};

LoadedData load_data(const std::string& dir, const rcmp::SplitSpec& spec, bool json_mode) {
  LoadedData d{rcmp::load_index(dir), {}};
  if (!json_mode)
    for (const auto& w : d.index.warnings) std::cerr << "warning: " << w << '\n';
  d.split = rcmp::group_split(d.index, spec);
  return d;
}

const rcmp::DatasetIndex& pick_split(const rcmp::DatasetSplit& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw UsageError("unknown split '" + name + "' (expected train, val or test)");
}

void emit(const Global& g, const json& result, const std::string& human) {
  if (g.json_mode)
    std::cout << result.dump() << '\n';
  else
    std::cout << human;
}

std::string with_commas(std::int64_t v) {
  auto s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > (v < 0 ? 1 : 0); i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

rcmp::TrainConfig train_config(double lr, int batch, int epochs, std::uint64_t seed, const fs::path& out) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  rcmp::TrainConfig c;
  c.learning_rate = lr;
  c.batch_size = batch;
  c.epochs = epochs;
  c.seed = seed;
  c.log_path = sidecar(out, ".log.jsonl");
  return c;
}

std::string history_line(const rcmp::TrainHistory& h) {
  if (h.epochs.empty()) return "no epochs run\n";
  const auto& e = h.epochs.back();
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch %d: train loss %.4f acc %.4f", e.epoch, e.train_loss, e.train_accuracy);
  std::string s = buf;
  if (e.val_accuracy) {
    std::snprintf(buf, sizeof buf, ", val loss %.4f acc %.4f", *e.val_loss, *e.val_accuracy);
    s += buf;
  }
  return s + "\n";
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataOpts {
  std::string out;
  int groups = 25;
  int image_size = 64;
};

int cmd_gen_data(const Global& g, const GenDataOpts& o) {
  rcmp::GeneratorConfig c;
  c.groups_per_class = o.groups;
  c.image_size = o.image_size;
  c.seed = g.resolved_seed();
  const auto idx = rcmp::generate_synthetic(o.out, c);
  emit(g, {{"command", "gen-data"}, {"out", o.out}, {"images", idx.size()}, {"classes", idx.class_names}},
       "wrote " + std::to_string(idx.size()) + " images in " + std::to_string(idx.class_names.size()) +
           " classes to " + o.out + "\n");
  return 0;
}

struct TrainOpts {
  std::string data, out, preset = "resnet-desk", init_weights, mapping;
  std::optional<int> input_size;
  int epochs = 15, batch_size = 32;
  double lr = 0.001;
  SplitFlags split;
};

int cmd_train(const Global& g, const TrainOpts& o) {
  const double t0 = now_ms();
  const auto seed = g.resolved_seed();
  const auto data = load_data(o.data, o.split.spec(seed), g.json_mode);
  auto config = rcmp::preset_config(o.preset, static_cast<int>(data.index.class_names.size()));
  if (o.input_size) config.input_size = *o.input_size;
  json resolved{{"data", o.data},       {"out", o.out},   {"preset", o.preset},         {"model", config},
                {"epochs", o.epochs},   {"batch_size", o.batch_size}, {"learning_rate", o.lr}, {"seed", seed},
                {"split", o.split.to_json(seed)}, {"class_names", data.index.class_names}};
  auto model = rcmp::build(config, seed);
  json import_report = nullptr;
  if (!o.init_weights.empty()) {
    const auto mapping = o.mapping.empty() ? rcmp::WeightMapping{} : rcmp::load_weight_mapping(o.mapping);
    import_report = rcmp::import_external_weights(model, rcmp::read_archive(o.init_weights), mapping);
    resolved["init_weights"] = o.init_weights;
    resolved["weight_mapping"] = o.mapping;
  }
  const auto train_set = rcmp::load_image_set(data.split.train, config.input_size);
  const auto val_set = rcmp::load_image_set(data.split.val, config.input_size);
  const auto history = rcmp::train(model, train_set, val_set, train_config(o.lr, o.batch_size, o.epochs, seed, o.out));
  rcmp::save(model, o.out, provenance("train", resolved, std::nullopt));
  write_json_file(sidecar(o.out, ".history.json"), history);
  echo_config(o.out, "train", resolved);
  write_timing(o.out, "train", now_ms() - t0, std::nullopt);
  emit(g, {{"command", "train"}, {"out", o.out}, {"model_hash", rcmp::model_hash(model)}, {"history", history},
           {"import", import_report}},
       history_line(history) + "saved " + o.out + " (" + rcmp::model_hash(model) + ")\n");
  return 0;
}

struct PruneOpts {
  std::string model, out, report, data;
  double retain_quantile = 0.67;
  std::string scope = "global";
  SplitFlags split;
};

int cmd_prune(const Global& g, const PruneOpts& o) {
  const double t0 = now_ms();
  rcmp::PruneConfig cfg;
  cfg.retain_quantile = o.retain_quantile;
  cfg.scope = rcmp::parse_prune_scope(o.scope);
  cfg.validate();
  const auto input = rcmp::load(o.model);
  const auto input_hash = rcmp::model_hash(input);
  auto result = rcmp::apply_prune(input, cfg);
  const auto seed = g.resolved_seed();
  json resolved{{"model", o.model}, {"out", o.out}, {"retain_quantile", o.retain_quantile}, {"scope", o.scope}};
  if (!o.data.empty()) {
    const auto data = load_data(o.data, o.split.spec(seed), g.json_mode);
    const auto val_set = rcmp::load_image_set(data.split.val, input.config.input_size);
    result.report.loss_before = rcmp::evaluate_loss_accuracy(input, val_set).loss;
    result.report.loss_after = rcmp::evaluate_loss_accuracy(result.model, val_set).loss;
    resolved["data"] = o.data;
    resolved["split"] = o.split.to_json(seed);
  }
  rcmp::save(result.model, o.out, provenance("prune", resolved, input_hash));
  json sparsity = result.report;
  sparsity["threshold"] = result.threshold.scope == rcmp::PruneScope::global ? json(result.threshold.global)
                                                                           : json(result.threshold.per_tensor);
  sparsity["provenance"] = provenance("prune", resolved, input_hash);
  write_json_file(o.report.empty() ? sidecar(o.out, ".sparsity.json") : fs::path(o.report), sparsity);
  echo_config(o.out, "prune", resolved);
  write_timing(o.out, "prune", now_ms() - t0, fs::path(o.model));
  char buf[200];
  std::snprintf(buf, sizeof buf, "retained %s of %s parameters (%.2f%% reduction)\n",
                with_commas(result.report.nonzero).c_str(), with_commas(result.report.total).c_str(),
                result.report.reduction_percent);
  emit(g, {{"command", "prune"}, {"out", o.out}, {"model_hash", rcmp::model_hash(result.model)}, {"sparsity", sparsity}},
       buf + std::string("saved ") + o.out + " (" + rcmp::model_hash(result.model) + ")\n");
  return 0;
}

struct FinetuneOpts {
  std::string model, data, out;
  int epochs = 5, batch_size = 32;
  double lr = 0.0005;
  SplitFlags split;
};

int cmd_finetune(const Global& g, const FinetuneOpts& o) {
  const double t0 = now_ms();
  const auto seed = g.resolved_seed();
  auto model = rcmp::load(o.model);
  const auto input_hash = rcmp::model_hash(model);
  const auto data = load_data(o.data, o.split.spec(seed), g.json_mode);
  json resolved{{"model", o.model},     {"data", o.data},       {"out", o.out},
                {"epochs", o.epochs},   {"batch_size", o.batch_size}, {"learning_rate", o.lr},
                {"seed", seed},         {"split", o.split.to_json(seed)}};
  const auto train_set = rcmp::load_image_set(data.split.train, model.config.input_size);
  const auto val_set = rcmp::load_image_set(data.split.val, model.config.input_size);
  const auto masks = model.masks;
  const auto history =
      rcmp::masked_finetune(model, masks, train_set, val_set, train_config(o.lr, o.batch_size, o.epochs, seed, o.out));
  rcmp::sparsity_report(model);  // integrity check: masked positions stayed zero
  rcmp::save(model, o.out, provenance("finetune", resolved, input_hash));
  write_json_file(sidecar(o.out, ".history.json"), history);
  echo_config(o.out, "finetune", resolved);
  write_timing(o.out, "finetune", now_ms() - t0, fs::path(o.model));
  emit(g, {{"command", "finetune"}, {"out", o.out}, {"model_hash", rcmp::model_hash(model)}, {"history", history}},
       history_line(history) + "saved " + o.out + " (" + rcmp::model_hash(model) + ")\n");
  return 0;
}

struct QuantizeOpts {
  std::string model, data, out;
  int calibration_batches = 10, batch_size = 32;
  std::string activation_sites = "all";
  SplitFlags split;
};

int cmd_quantize(const Global& g, const QuantizeOpts& o) {
  const double t0 = now_ms();
  const auto seed = g.resolved_seed();
  if (o.calibration_batches < 1) throw UsageError("--calibration-batches must be at least 1");
  if (o.batch_size < 1) throw UsageError("--batch-size must be at least 1");
  const auto sites = rcmp::parse_activation_sites(o.activation_sites);
  const auto model = rcmp::load(o.model);
  const auto input_hash = rcmp::model_hash(model);
  const auto data = load_data(o.data, o.split.spec(seed), g.json_mode);
  const auto calib_set = rcmp::load_image_set(data.split.train, model.config.input_size);
  std::vector<std::size_t> order(calib_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rcmp::Rng rng(rcmp::derive_seed(seed, "calibration"));
  rng.shuffle(order.begin(), order.end());
  std::vector<rcmp::Tensor<float>> batches;
  for (std::size_t start = 0; start < order.size() && batches.size() < static_cast<std::size_t>(o.calibration_batches);
       start += static_cast<std::size_t>(o.batch_size)) {
    const auto end = std::min(order.size(), start + static_cast<std::size_t>(o.batch_size));
    batches.push_back(calib_set.batch<float>(std::span<const std::size_t>(order.data() + start, end - start)));
  }
  const auto stats = rcmp::calibrate(model, batches);
  const auto qmodel = rcmp::quantize_model(model, stats, sites);
  json resolved{{"model", o.model},
                {"data", o.data},
                {"out", o.out},
                {"calibration_batches", o.calibration_batches},
                {"batch_size", o.batch_size},
                {"activation_sites", o.activation_sites},
                {"seed", seed},
                {"split", o.split.to_json(seed)}};
  rcmp::save(qmodel, o.out, provenance("quantize", resolved, input_hash));
  write_json_file(sidecar(o.out, ".calibration.json"), stats);
  echo_config(o.out, "quantize", resolved);
  write_timing(o.out, "quantize", now_ms() - t0, fs::path(o.model));
  const auto dense_bytes = rcmp::to_archive(model).blob_size("param");
  const auto q_bytes = rcmp::to_archive(qmodel).blob_size("qweight");
  emit(g,
       {{"command", "quantize"}, {"out", o.out}, {"model_hash", rcmp::model_hash(qmodel)},
        {"calibration_batches", batches.size()}, {"qweight_bytes", q_bytes}, {"dense_param_bytes", dense_bytes}},
       "calibrated on " + std::to_string(batches.size()) + " batches; saved " + o.out + " (" +
           rcmp::model_hash(qmodel) + ")\n");
  return 0;
}

struct EvalOpts {
  std::string model, data, out, curves_dir, from_logits;
  std::string split_name = "test";
  std::string mode = "integer";
  SplitFlags split;
};

json logits_json(const rcmp::Tensor<float>& logits, const std::vector<int>& labels,
                 const std::vector<std::string>& names) {
  json rows = json::array();
  const auto C = static_cast<std::size_t>(logits.dim(1));
  for (std::size_t n = 0; n < labels.size(); ++n)
    rows.push_back(std::vector<float>(logits.data() + n * C, logits.data() + (n + 1) * C));
  return {{"class_names", names}, {"labels", labels}, {"logits", rows}};
}

int cmd_eval(const Global& g, const EvalOpts& o) {
  rcmp::Tensor<float> logits;
  std::vector<int> labels;
  std::vector<std::string> names;
  json resolved;
  std::optional<std::string> input_hash;
  if (!o.from_logits.empty()) {
    std::ifstream in(o.from_logits);
    if (!in) throw std::runtime_error("cannot open logits file '" + o.from_logits + "'");
    const auto j = json::parse(in);
    names = j.at("class_names").get<std::vector<std::string>>();
    labels = j.at("labels").get<std::vector<int>>();
    const auto rows = j.at("logits").get<std::vector<std::vector<float>>>();
    if (rows.empty()) throw std::runtime_error("logits file holds no samples");
    std::vector<float> flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    logits = rcmp::Tensor<float>(rcmp::Shape{static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(rows[0].size())},
                                 std::move(flat));
    resolved = {{"from_logits", o.from_logits}, {"out", o.out}};
    if (j.contains("provenance")) resolved["source"] = j["provenance"];
  } else {
    if (o.model.empty() || o.data.empty()) throw UsageError("eval needs --model and --data (or --from-logits)");
    const auto seed = g.resolved_seed();
    const auto model = rcmp::load_any(o.model);
    input_hash = rcmp::model_hash(model);
    const auto mode = rcmp::parse_quant_mode(o.mode);
    const auto data = load_data(o.data, o.split.spec(seed), g.json_mode);
    const auto& part = pick_split(data.split, o.split_name);
    const auto set = rcmp::load_image_set(part, rcmp::model_config(model).input_size);
    logits = rcmp::predict_logits(model, set, mode);
    labels = set.labels;
    names = data.index.class_names;
    resolved = {{"model", o.model},      {"data", o.data}, {"out", o.out}, {"split_name", o.split_name},
                {"mode", o.mode},        {"variant", rcmp::variant_of(model)}, {"seed", seed},
                {"split", o.split.to_json(seed)}};
  }
  const auto report = rcmp::evaluate_logits(logits, labels, names);
  json out{{"report", report}, {"provenance", provenance("eval", resolved, input_hash)}};
  write_json_file(o.out, out);
  if (o.from_logits.empty()) {
    auto lj = logits_json(logits, labels, names);
    lj["provenance"] = out["provenance"];
    write_json_file(sidecar(o.out, ".logits.json"), lj);
  }
  if (!o.curves_dir.empty()) {
    for (const auto& c : report.classes) {
      if (c.roc) write_text_file(fs::path(o.curves_dir) / (c.name + "_roc.csv"), rcmp::curve_csv(*c.roc, "fpr", "tpr"));
      if (c.pr)
        write_text_file(fs::path(o.curves_dir) / (c.name + "_pr.csv"), rcmp::curve_csv(*c.pr, "recall", "precision"));
    }
  }
  echo_config(o.out, "eval", resolved);
  char buf[200];
  std::snprintf(buf, sizeof buf, "accuracy %.4f  macro precision %.4f  recall %.4f  F1 %.4f  (%lld samples)\n",
                report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1,
                static_cast<long long>(report.samples));
  emit(g, {{"command", "eval"}, {"out", o.out}, {"accuracy", report.accuracy}, {"macro_f1", report.macro_f1}}, buf);
  return 0;
}

struct BenchOpts {
  std::vector<std::string> models;
  std::string data, out;
  std::string split_name = "test";
  std::string mode = "integer";
  int warmup = 10, repeats = 100, load_repeats = 5;
  SplitFlags split;
};

int cmd_bench(const Global& g, const BenchOpts& o) {
  if (o.warmup < 0 || o.repeats < 1 || o.load_repeats < 1)
    throw UsageError("bench needs --warmup >= 0, --repeats >= 1 and --load-repeats >= 1");
  const auto seed = g.resolved_seed();
  const auto mode = rcmp::parse_quant_mode(o.mode);
  const auto data = load_data(o.data, o.split.spec(seed), g.json_mode);
  const auto& part = pick_split(data.split, o.split_name);
  if (part.records.empty()) throw std::runtime_error("bench: the " + o.split_name + " split is empty");
  std::vector<rcmp::BenchReport> reports;
  json inputs = json::array();
  for (const auto& path : o.models) {
    const double load_ms = rcmp::bench_load([&] { (void)rcmp::load_any(path); }, o.load_repeats);
    const auto model = rcmp::load_any(path);
    const auto hash_before = rcmp::model_hash(model);
    const int S = rcmp::model_config(model).input_size;
    auto prepare = [&](std::size_t i) { return rcmp::load_batch({part.records[i]}, S); };
    rcmp::BenchReport r;
    if (const auto* q = std::get_if<rcmp::QuantizedModel>(&model)) {
      const rcmp::QuantizedEngine engine(*q);
      r = rcmp::bench_classify(part.records.size(), prepare, [&](const auto& x) { (void)engine.forward(x, mode); },
                               static_cast<std::size_t>(o.warmup), static_cast<std::size_t>(o.repeats));
    } else {
      const auto& m = std::get<rcmp::Model>(model);
      r = rcmp::bench_classify(part.records.size(), prepare, [&](const auto& x) { (void)rcmp::forward(m, x); },
                               static_cast<std::size_t>(o.warmup), static_cast<std::size_t>(o.repeats));
    }
    if (rcmp::model_hash(model) != hash_before) throw std::logic_error("bench: model changed during measurement");
    r.model_path = path;
    r.variant = rcmp::variant_of(model);
    r.model_hash = hash_before;
    r.load_time_ms = load_ms;
    if (std::ifstream t(sidecar(path, ".timing.json")); t) {
      try {
        r.pipeline_time_ms = json::parse(t).at("pipeline_ms").get<double>();
      } catch (const json::exception&) {
      }
    }
    reports.push_back(std::move(r));
    inputs.push_back({{"path", path}, {"model_hash", hash_before}});
  }
  const auto emitted = rcmp::emit_report(reports);
  json resolved{{"models", o.models}, {"data", o.data}, {"out", o.out}, {"split_name", o.split_name},
                {"mode", o.mode},     {"warmup", o.warmup}, {"repeats", o.repeats}, {"load_repeats", o.load_repeats},
                {"seed", seed},       {"split", o.split.to_json(seed)}};
  json out = emitted.json;
  out["provenance"] = provenance("bench", resolved, std::nullopt);
  out["provenance"]["inputs"] = inputs;
  if (!o.out.empty()) {
    write_json_file(o.out, out);
    echo_config(o.out, "bench", resolved);
  }
  emit(g, out, emitted.table);
  return 0;
}

struct InspectOpts {
  std::string model, preset;
  int num_classes = 6;
  std::optional<int> input_size;
};

int cmd_inspect(const Global& g, const InspectOpts& o) {
  if (o.model.empty() == o.preset.empty()) throw UsageError("inspect needs exactly one of --model or --preset");
  rcmp::AnyModel model = o.model.empty() ? rcmp::AnyModel(rcmp::build(rcmp::preset_config(o.preset, o.num_classes),
                                                                      g.resolved_seed()))
                                         : rcmp::load_any(o.model);
  auto config = rcmp::model_config(model);
  const int input_size = o.input_size.value_or(config.input_size);
  const auto arch = rcmp::describe(config);
  std::int64_t total = 0;
  std::map<std::string, std::int64_t> per_layer;
  for (const auto& p : arch.parameters()) {
    const auto n = static_cast<std::int64_t>(rcmp::shape_numel(p.shape));
    total += n;
    per_layer[p.layer] += n;
  }
  const auto flops = rcmp::count_flops(config, input_size);
  json summary{{"preset", config.preset},         {"num_classes", config.num_classes},
               {"input_size", input_size},        {"parameters", total},
               {"flops", flops},                  {"variant", rcmp::variant_of(model)},
               {"model_hash", rcmp::model_hash(model)}, {"layer_count", config.layer_count()}};
  std::ostringstream os;
  os << "model: " << config.preset << ", " << config.num_classes << " classes, input " << input_size << "x"
     << input_size << ", variant " << rcmp::variant_of(model) << "\n";
  os << "layers:\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "  %-28s %-8s %6s %6s %3s %3s %5s %12s\n", "name", "kind", "in", "out", "k", "s",
                "size", "params");
  os << buf;
  for (const auto& l : arch.layers()) {
    const auto it = per_layer.find(l.name);
    std::snprintf(buf, sizeof buf, "  %-28s %-8s %6d %6d %3d %3d %5d %12s\n", l.name.c_str(),
                  std::string(rcmp::layer_kind_name(l.kind)).c_str(), l.in_channels, l.out_channels, l.kernel,
                  l.stride, l.out_size, it == per_layer.end() ? "-" : with_commas(it->second).c_str());
    os << buf;
  }
  os << "parameters: " << with_commas(total) << "\n";
  os << "FLOPs (multiply-accumulates per image): " << with_commas(flops) << "\n";
  if (const auto* m = std::get_if<rcmp::Model>(&model)) {
    const auto sp = rcmp::sparsity_report(*m);
    summary["sparsity"] = sp;
    std::snprintf(buf, sizeof buf, "sparsity: %s nonzero of %s (%.2f%% reduction), %zu masked tensors\n",
                  with_commas(sp.nonzero).c_str(), with_commas(sp.total).c_str(), sp.reduction_percent, m->masks.size());
    os << buf;
  } else {
    const auto& q = std::get<rcmp::QuantizedModel>(model);
    json layers = json::object();
    os << "quantization: unsigned " << q.layers.begin()->second.weight.params.bits
       << "-bit per-tensor, activation sites " << rcmp::activation_sites_name(q.site_mode)
       << (q.bn_folded ? ", batch norm folded" : "") << "\n";
    for (const auto& spec : rcmp::weight_layers(q.arch)) {
      const auto& p = q.layer(spec.name).weight.params;
      layers[spec.name] = p;
      std::snprintf(buf, sizeof buf, "  %-28s scale %.6g zero_point %d\n", spec.name.c_str(), p.scale, p.zero_point);
      os << buf;
    }
    for (const auto& [site, p] : q.activations) {
      std::snprintf(buf, sizeof buf, "  site %-23s scale %.6g zero_point %d\n", site.c_str(), p.scale, p.zero_point);
      os << buf;
    }
    summary["quantization"] = {{"weights", layers},
                               {"activations", q.activations},
                               {"activation_sites", rcmp::activation_sites_name(q.site_mode)}};
  }
  emit(g, summary, os.str());
  return 0;
}

// ---------------------------------------------------------------------------

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const rcmp::FormatError*>(&e)) return "format";
  if (dynamic_cast<const rcmp::DatasetError*>(&e)) return "data";
  if (dynamic_cast<const rcmp::IntegrityError*>(&e)) return "integrity";
  if (dynamic_cast<const rcmp::QuantizationError*>(&e)) return "quantization";
  if (dynamic_cast<const rcmp::ImportError*>(&e)) return "import";
  if (dynamic_cast<const rcmp::ShapeError*>(&e)) return "shape";
  return "runtime";
}

void report_error(bool json_mode, const std::string& kind, const std::string& message, int code) {
  if (json_mode)
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << '\n';
  else
    std::cerr << "rcmp: " << message << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> raw(argv, argv + argc);
  const bool json_mode = user_gave(raw, "--json");
  Global g;
  CLI::App app{"rcmp: train, prune, quantize, evaluate and benchmark residual image classifiers"};
  app.fallthrough();
  app.require_subcommand(1);
  app.add_flag("--json", g.json_mode, "Structured output; errors as single-line JSON on stderr");
  app.add_option("--config", g.config_path, "JSON file of flag values (command-line flags take precedence)");
  app.add_option("--seed", g.seed, "Seed for every random choice (falls back to RCMP_SEED, then 0)");

  GenDataOpts gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic six-class dataset");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--groups-per-class", gen.groups, "Specimens per class (12 images each)")->capture_default_str();
  c_gen->add_option("--image-size", gen.image_size, "Side of the generated images")->capture_default_str();

  TrainOpts tr;
  auto* c_train = app.add_subcommand("train", "Train a model from scratch on a dataset directory");
  c_train->add_option("--data", tr.data, "Dataset root")->required();
  c_train->add_option("--out", tr.out, "Output model file")->required();
  c_train->add_option("--preset", tr.preset, "resnet-desk or resnet18-full")->capture_default_str();
  c_train->add_option("--input-size", tr.input_size, "Override the preset's input side");
  c_train->add_option("--epochs", tr.epochs)->capture_default_str();
  c_train->add_option("--batch-size", tr.batch_size)->capture_default_str();
  c_train->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
  c_train->add_option("--init-weights", tr.init_weights, "Model file whose matching tensors seed the new model");
  c_train->add_option("--weight-mapping", tr.mapping, "JSON name-mapping table for --init-weights");
  tr.split.add(c_train);

  PruneOpts pr;
  auto* c_prune = app.add_subcommand("prune", "Global magnitude pruning");
  c_prune->add_option("--model", pr.model)->required();
  c_prune->add_option("--out", pr.out)->required();
  c_prune->add_option("--retain-quantile", pr.retain_quantile, "Weights below this |w| quantile are zeroed")
      ->capture_default_str();
  c_prune->add_option("--scope", pr.scope, "global or per_layer")->capture_default_str();
  c_prune->add_option("--report", pr.report, "Sparsity JSON path (default <out>.sparsity.json)");
  c_prune->add_option("--data", pr.data, "Dataset root; adds validation loss before/after to the report");
  pr.split.add(c_prune);

  FinetuneOpts ft;
  auto* c_ft = app.add_subcommand("finetune", "Retrain surviving weights with pruning masks fixed");
  c_ft->add_option("--model", ft.model)->required();
  c_ft->add_option("--data", ft.data)->required();
  c_ft->add_option("--out", ft.out)->required();
  c_ft->add_option("--epochs", ft.epochs)->capture_default_str();
  c_ft->add_option("--batch-size", ft.batch_size)->capture_default_str();
  c_ft->add_option("--lr", ft.lr)->capture_default_str();
  ft.split.add(c_ft);

  QuantizeOpts qz;
  auto* c_q = app.add_subcommand("quantize", "Calibrate and quantize to 8-bit");
  c_q->add_option("--model", qz.model)->required();
  c_q->add_option("--data", qz.data, "Dataset root; calibration draws from the training split")->required();
  c_q->add_option("--out", qz.out)->required();
  c_q->add_option("--calibration-batches", qz.calibration_batches)->capture_default_str();
  c_q->add_option("--batch-size", qz.batch_size)->capture_default_str();
  c_q->add_option("--activation-sites", qz.activation_sites, "all or boundary")->capture_default_str();
  qz.split.add(c_q);

  EvalOpts ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate on a split and write the metrics report");
  c_eval->add_option("--model", ev.model);
  c_eval->add_option("--data", ev.data);
  c_eval->add_option("--out", ev.out, "Report JSON path")->required();
  c_eval->add_option("--curves-dir", ev.curves_dir, "Directory for per-class ROC/PR CSV files");
  c_eval->add_option("--split-name", ev.split_name, "train, val or test")->capture_default_str();
  c_eval->add_option("--mode", ev.mode, "Quantized execution: integer or simulated")->capture_default_str();
  c_eval->add_option("--from-logits", ev.from_logits, "Rebuild the report from a saved .logits.json");
  ev.split.add(c_eval);

  BenchOpts bn;
  auto* c_bench = app.add_subcommand("bench", "Measure load time and per-image latency");
  c_bench->add_option("--model", bn.models, "Model file (repeatable)")->required();
  c_bench->add_option("--data", bn.data)->required();
  c_bench->add_option("--out", bn.out, "Report JSON path");
  c_bench->add_option("--split-name", bn.split_name)->capture_default_str();
  c_bench->add_option("--mode", bn.mode, "Quantized execution: integer or simulated")->capture_default_str();
  c_bench->add_option("--warmup", bn.warmup)->capture_default_str();
  c_bench->add_option("--repeats", bn.repeats, "Measured inferences per model")->capture_default_str();
  c_bench->add_option("--load-repeats", bn.load_repeats)->capture_default_str();
  bn.split.add(c_bench);

  InspectOpts in;
  auto* c_inspect = app.add_subcommand("inspect", "Summarize a model file or a preset");
  c_inspect->add_option("--model", in.model);
  c_inspect->add_option("--preset", in.preset);
  c_inspect->add_option("--num-classes", in.num_classes)->capture_default_str();
  c_inspect->add_option("--input-size", in.input_size);

  try {
    auto args = expand_config(raw);
    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error(json_mode, "usage", e.what(), kExitUsage);
    return kExitUsage;
  } catch (const UsageError& e) {
    report_error(json_mode, "usage", e.what(), kExitUsage);
    return kExitUsage;
  }

  try {
    if (*c_gen) return cmd_gen_data(g, gen);
    if (*c_train) return cmd_train(g, tr);
    if (*c_prune) return cmd_prune(g, pr);
    if (*c_ft) return cmd_finetune(g, ft);
    if (*c_q) return cmd_quantize(g, qz);
    if (*c_eval) return cmd_eval(g, ev);
    if (*c_bench) return cmd_bench(g, bn);
    if (*c_inspect) return cmd_inspect(g, in);
  } catch (const UsageError& e) {
    report_error(g.json_mode, "usage", e.what(), kExitUsage);
    return kExitUsage;
  } catch (const rcmp::ConfigError& e) {
    report_error(g.json_mode, "usage", e.what(), kExitUsage);
    return kExitUsage;
  } catch (const std::exception& e) {
    report_error(g.json_mode, error_kind(e), e.what(), kExitRuntime);
    return kExitRuntime;
  }
  return kExitUsage;
}
