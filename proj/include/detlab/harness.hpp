#pragma once

// Experiment harness: JSON experiment configs (unknown keys rejected),
// a deterministic training loop over synthetic scenes, per-epoch validation
// AP, mixing-weight traces, paired-seed ablations, and convergence
// comparisons. All randomness flows from one master seed.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detlab/checkpoint.hpp"
#include "detlab/decoder.hpp"
#include "detlab/matching.hpp"
#include "detlab/optim.hpp"
#include "detlab/synth.hpp"

namespace detlab {

inline constexpr const char* kVersion = "detlab-0.1.0";

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Training hit a non-finite loss; diagnostic identifies the offending batch.
struct NumericalAbort : std::runtime_error {
  nlohmann::json diagnostic;
  NumericalAbort(const std::string& msg, nlohmann::json diag)
      : std::runtime_error(msg), diagnostic(std::move(diag)) {}
};

struct ScheduleConfig {
  int epochs = 50;
  int batch_size = 8;
  int lr_drop_epoch = 0;  // 0 selects the default: 80% of total epochs
  double lr_drop_factor = 0.1;
};

struct DataConfig {
  int train_scenes = 200;
  int val_scenes = 50;
  int grid = 7;
  int n_max = 8;
  double min_separation = 0.05;
};

struct ExperimentConfig {
  DecoderConfig model;
  AdamWConfig optimizer;
  ScheduleConfig schedule;
  DataConfig data;

  // epochs strictly after this one run at the dropped learning rate
  int effective_lr_drop_epoch() const {
    if (schedule.lr_drop_epoch > 0) return schedule.lr_drop_epoch;
    return (schedule.epochs * 4) / 5;
  }

  void validate() const {
    model.validate();
    if (optimizer.lr <= 0.0) throw ConfigError("config: lr must be positive");
    if (optimizer.weight_decay < 0.0)
      throw ConfigError("config: weight decay must be nonnegative");
    if (schedule.epochs < 1 || schedule.batch_size < 1)
      throw ConfigError("config: epochs and batch size must be at least 1");
    if (schedule.lr_drop_epoch < 0 || schedule.lr_drop_epoch > schedule.epochs)
      throw ConfigError("config: lr drop epoch outside the run");
    if (schedule.lr_drop_factor <= 0.0 || schedule.lr_drop_factor > 1.0)
      throw ConfigError("config: lr drop factor must be in (0, 1]");
    if (data.train_scenes < 1 || data.val_scenes < 1)
      throw ConfigError("config: scene counts must be at least 1");
    if (data.grid < 2) throw ConfigError("config: grid side must be at least 2");
    if (data.n_max < 1) throw ConfigError("config: n_max must be at least 1");
    if (data.n_max > model.num_queries)
      throw ConfigError("config: n_max " + std::to_string(data.n_max) +
                        " exceeds the " + std::to_string(model.num_queries) +
                        " object queries; matching needs a query per object");
    if (data.min_separation < 0.0)
      throw ConfigError("config: min separation must be nonnegative");
  }

  SceneConfig scene_config() const {
    SceneConfig sc;
    sc.num_classes = model.num_classes;
    sc.n_max = data.n_max;
    sc.min_separation = data.min_separation;
    return sc;
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::vector<std::string>& known,
                                const std::string& section) {
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end())
      throw ConfigError("config: unknown key \"" + item.key() + "\" in " + section);
  }
}

}  // namespace detail

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
  return {{"model", decoder_config_to_json(cfg.model)},
          {"optimizer",
           {{"lr", cfg.optimizer.lr},
            {"weight_decay", cfg.optimizer.weight_decay},
            {"beta1", cfg.optimizer.beta1},
            {"beta2", cfg.optimizer.beta2}}},
          {"schedule",
           {{"epochs", cfg.schedule.epochs},
            {"batch_size", cfg.schedule.batch_size},
            {"lr_drop_epoch", cfg.schedule.lr_drop_epoch},
            {"lr_drop_factor", cfg.schedule.lr_drop_factor}}},
          {"data",
           {{"train_scenes", cfg.data.train_scenes},
            {"val_scenes", cfg.data.val_scenes},
            {"grid", cfg.data.grid},
            {"n_max", cfg.data.n_max},
            {"min_separation", cfg.data.min_separation}}}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"model", "optimizer", "schedule", "data"}, "config root");
  ExperimentConfig cfg;
  try {
    if (j.contains("model")) cfg.model = decoder_config_from_json(j.at("model"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::reject_unknown_keys(o, {"lr", "weight_decay", "beta1", "beta2"}, "optimizer");
    cfg.optimizer.lr = o.value("lr", cfg.optimizer.lr);
    cfg.optimizer.weight_decay = o.value("weight_decay", cfg.optimizer.weight_decay);
    cfg.optimizer.beta1 = o.value("beta1", cfg.optimizer.beta1);
    cfg.optimizer.beta2 = o.value("beta2", cfg.optimizer.beta2);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    detail::reject_unknown_keys(
        s, {"epochs", "batch_size", "lr_drop_epoch", "lr_drop_factor"}, "schedule");
    cfg.schedule.epochs = s.value("epochs", cfg.schedule.epochs);
    cfg.schedule.batch_size = s.value("batch_size", cfg.schedule.batch_size);
    cfg.schedule.lr_drop_epoch = s.value("lr_drop_epoch", cfg.schedule.lr_drop_epoch);
    cfg.schedule.lr_drop_factor = s.value("lr_drop_factor", cfg.schedule.lr_drop_factor);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown_keys(
        d, {"train_scenes", "val_scenes", "grid", "n_max", "min_separation"}, "data");
    cfg.data.train_scenes = d.value("train_scenes", cfg.data.train_scenes);
    cfg.data.val_scenes = d.value("val_scenes", cfg.data.val_scenes);
    cfg.data.grid = d.value("grid", cfg.data.grid);
    cfg.data.n_max = d.value("n_max", cfg.data.n_max);
    cfg.data.min_separation = d.value("min_separation", cfg.data.min_separation);
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

// FNV-1a over the canonical config dump.
inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string dump = experiment_config_to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Run records

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  bool val_defined = false;
  double val_ap50 = 0.0;
  double val_ap_mean = 0.0;
  std::vector<std::array<double, 3>> lambda;  // per-layer mixing snapshot
};

struct RunRecord {
  std::string version = kVersion;
  std::string config_hash;
  std::uint64_t master_seed = 0;
  std::vector<EpochStats> epochs;
  double wall_clock_seconds = 0.0;

  // wall clock is measurement, not result: reproducibility comparisons use
  // include_wall_clock = false
  nlohmann::json to_json(bool include_wall_clock = true) const {
    nlohmann::json eps = nlohmann::json::array();
    for (const auto& e : epochs) {
      nlohmann::json le = nlohmann::json::array();
      for (const auto& row : e.lambda) le.push_back({row[0], row[1], row[2]});
      nlohmann::json je{{"epoch", e.epoch},
                        {"train_loss", e.train_loss},
                        {"lambda", le}};
      if (e.val_defined) {
        je["val_ap50"] = e.val_ap50;
        je["val_ap_mean"] = e.val_ap_mean;
      }
      eps.push_back(je);
    }
    nlohmann::json j{{"version", version},
                     {"config_hash", config_hash},
                     {"master_seed", master_seed},
                     {"epochs", eps}};
    if (include_wall_clock) j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  bool write_checkpoint = true;
  bool write_scenes = true;
};

namespace detail {

struct PreparedScene {
  Scene scene;
  GtList gt;
  MemoryGrid memory;
};

inline std::vector<PreparedScene> prepare_scenes(const ExperimentConfig& cfg,
                                                 std::uint64_t split_seed, int count) {
  std::vector<PreparedScene> out;
  out.reserve(static_cast<std::size_t>(count));
  const SceneConfig sc = cfg.scene_config();
  for (int i = 0; i < count; ++i) {
    PreparedScene p;
    p.scene = generate_scene(Rng::mix(split_seed, static_cast<std::uint64_t>(i)), sc);
    p.gt = scene_gt(p.scene);
    p.memory = rasterize_memory(p.scene, cfg.data.grid, cfg.model.num_classes,
                                cfg.model.d_model);
    out.push_back(std::move(p));
  }
  return out;
}

inline double scene_loss(Tape& t, DecoderParams& params, const PreparedScene& ps,
                         int num_classes, Tensor* out_loss) {
  auto outs = decoder_forward(t, params, ps.memory.raw, ps.memory.pos);
  // diverged forward: report non-finite instead of matching garbage
  for (const auto& o : outs) {
    for (double v : o.class_logits.data)
      if (!std::isfinite(v)) return std::numeric_limits<double>::quiet_NaN();
    for (double v : o.boxes.data)
      if (!std::isfinite(v)) return std::numeric_limits<double>::quiet_NaN();
  }
  Tensor loss = set_loss(t, as_predictions(outs), ps.gt, num_classes);
  if (out_loss) *out_loss = loss;
  return loss.data[0];
}

inline ApReport evaluate_split(DecoderParams& params,
                               const std::vector<PreparedScene>& split,
                               int num_classes) {
  std::vector<std::vector<Detection>> dets;
  std::vector<Scene> scenes;
  dets.reserve(split.size());
  scenes.reserve(split.size());
  for (const auto& ps : split) {
    Tape t;
    auto outs = decoder_forward(t, params, ps.memory.raw, ps.memory.pos);
    const LayerOutput& last = outs.back();
    dets.push_back(extract_detections(last.class_logits, last.box_values,
                                      num_classes));
    scenes.push_back(ps.scene);
  }
  return evaluate_ap(dets, scenes, num_classes);
}

}  // namespace detail

// Deterministic training run. Scene sets, parameter init, and batch order all
// derive from the master seed; two invocations with the same (config, seed)
// produce identical records. Artifacts land in out_dir unless it is empty.
inline RunRecord train(const ExperimentConfig& cfg, std::uint64_t master_seed,
                       const std::string& out_dir = "",
                       DecoderParams* out_params = nullptr,
                       const TrainOptions& opts = {}) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  auto train_set = detail::prepare_scenes(cfg, Rng::mix(master_seed, 1), cfg.data.train_scenes);
  auto val_set = detail::prepare_scenes(cfg, Rng::mix(master_seed, 2), cfg.data.val_scenes);

  DecoderParams params;
  params.init(cfg.model, Rng::mix(master_seed, 3));
  auto param_ptrs = params.all();

  AdamWState opt;
  opt.cfg = cfg.optimizer;
  const double base_lr = cfg.optimizer.lr;
  const int drop_epoch = cfg.effective_lr_drop_epoch();
  Rng order_rng(Rng::mix(master_seed, 4));

  RunRecord record;
  record.config_hash = config_hash(cfg);
  record.master_seed = master_seed;

  std::vector<int> indices(static_cast<std::size_t>(cfg.data.train_scenes));
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);

  for (int epoch = 1; epoch <= cfg.schedule.epochs; ++epoch) {
    opt.cfg.lr = epoch > drop_epoch ? base_lr * cfg.schedule.lr_drop_factor : base_lr;
    Rng erng = order_rng.fork(static_cast<std::uint64_t>(epoch));
    erng.shuffle(indices);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < indices.size();
         start += static_cast<std::size_t>(cfg.schedule.batch_size)) {
      const std::size_t stop =
          std::min(indices.size(), start + static_cast<std::size_t>(cfg.schedule.batch_size));
      zero_grads(param_ptrs);
      for (std::size_t bi = start; bi < stop; ++bi) {
        const auto& ps = train_set[static_cast<std::size_t>(indices[bi])];
        Tape tape;
        Tensor loss;
        const double value =
            detail::scene_loss(tape, params, ps, cfg.model.num_classes, &loss);
        if (!std::isfinite(value)) {
          nlohmann::json scene_ids = nlohmann::json::array();
          for (std::size_t bj = start; bj < stop; ++bj)
            scene_ids.push_back(train_set[static_cast<std::size_t>(indices[bj])].scene.seed);
          throw NumericalAbort(
              "train: non-finite loss at epoch " + std::to_string(epoch),
              {{"epoch", epoch},
               {"batch_first_index", start},
               {"loss", value},
               {"scene_seeds", scene_ids},
               {"master_seed", master_seed}});
        }
        loss_sum += value;
        tape.backward(loss);
        pull_grads(param_ptrs, tape, 1.0 / static_cast<double>(stop - start));
      }
      adamw_step(param_ptrs, opt);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(cfg.data.train_scenes);
    ApReport ap = detail::evaluate_split(params, val_set, cfg.model.num_classes);
    stats.val_defined = ap.has_gt;
    stats.val_ap50 = ap.ap50;
    stats.val_ap_mean = ap.mean;
    stats.lambda = params.scales.effective_values();
    record.epochs.push_back(std::move(stats));
  }

  record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream rec(out_dir + "/run_record.json");
    rec << record.to_json().dump(2) << "\n";
    if (opts.write_checkpoint) save_checkpoint(out_dir + "/checkpoint.bin", params);
    if (opts.write_scenes) {
      std::vector<Scene> tr, va;
      for (const auto& p : train_set) tr.push_back(p.scene);
      for (const auto& p : val_set) va.push_back(p.scene);
      write_scenes(out_dir + "/scenes_train.jsonl", tr);
      write_scenes(out_dir + "/scenes_val.jsonl", va);
    }
  }
  if (out_params) *out_params = params;
  return record;
}

// ---------------------------------------------------------------------------
// Mixing-weight trace

// Effective per-layer mixing rows of a progressive checkpoint.
inline std::vector<std::array<double, 3>> lambda_rows(DecoderParams& params) {
  if (!params.cfg.progressive)
    throw ConfigError(
        "trace-lambda: checkpoint was trained with progressive=false; "
        "the mixing weights are fixed, not learned");
  return params.scales.effective_values();
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_lambda_csv(const std::string& path,
                             const std::vector<std::array<double, 3>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_lambda_csv: cannot open " + path);
  out << "layer,lambda_local,lambda_medium,lambda_global\n";
  for (std::size_t l = 0; l < rows.size(); ++l)
    out << (l + 1) << "," << format_double(rows[l][0]) << "," << format_double(rows[l][1])
        << "," << format_double(rows[l][2]) << "\n";
}

// ---------------------------------------------------------------------------
// Ablations and convergence comparison

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  double final_ap50 = 0.0;
  double final_ap_mean = 0.0;
  double half_ap50 = 0.0;  // val AP@0.5 at the 50%-epoch checkpoint
  double final_train_loss = 0.0;
};

struct AblationResult {
  std::vector<std::string> variants;
  std::vector<AblationRun> runs;
};

namespace detail {

inline AblationRun summarize_run(const std::string& variant, std::uint64_t seed,
                                 const RunRecord& rec) {
  AblationRun r;
  r.variant = variant;
  r.seed = seed;
  const EpochStats& last = rec.epochs.back();
  r.final_ap50 = last.val_ap50;
  r.final_ap_mean = last.val_ap_mean;
  r.final_train_loss = last.train_loss;
  const std::size_t half = (rec.epochs.size() + 1) / 2;
  r.half_ap50 = rec.epochs[half - 1].val_ap50;
  return r;
}

}  // namespace detail

// Variant list for an ablation axis applied to a base config.
inline std::vector<std::pair<std::string, ExperimentConfig>> ablation_variants(
    const ExperimentConfig& base, const std::string& axis) {
  std::vector<std::pair<std::string, ExperimentConfig>> vs;
  if (axis == "heads") {
    for (int k : {0, 2, 4, 8}) {
      ExperimentConfig c = base;
      c.model.relation_heads = std::min(k, base.model.heads);
      const std::string name = "k" + std::to_string(c.model.relation_heads);
      // clamping to the head count can collapse entries; keep each once
      bool seen = false;
      for (const auto& [existing, cfg] : vs) seen |= existing == name;
      if (!seen) vs.emplace_back(name, c);
    }
  } else if (axis == "components") {
    ExperimentConfig baseline = base;
    baseline.model.relation_heads = 0;
    vs.emplace_back("baseline", baseline);
    ExperimentConfig local = base;
    local.model.progressive = false;
    vs.emplace_back("relation_local", local);
    ExperimentConfig pr = base;
    pr.model.progressive = true;
    vs.emplace_back("relation_pr", pr);
  } else {
    throw ConfigError("ablate: unknown axis \"" + axis + "\" (use heads or components)");
  }
  return vs;
}

// Paired-seed ablation: every variant trains on the same master seeds (same
// scenes, same shared-parameter init). Writes per-run records plus summary
// and per-run CSVs when out_dir is nonempty.
inline AblationResult ablate(const ExperimentConfig& base, const std::string& axis,
                             int num_seeds, const std::string& out_dir = "",
                             std::uint64_t base_seed = 1) {
  if (num_seeds < 1) throw ConfigError("ablate: need at least one seed");
  auto variants = ablation_variants(base, axis);

  AblationResult result;
  for (const auto& [name, cfg] : variants) result.variants.push_back(name);

  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  for (int s = 0; s < num_seeds; ++s) {
    const std::uint64_t master = Rng::mix(base_seed, static_cast<std::uint64_t>(s));
    for (const auto& [name, cfg] : variants) {
      std::string run_dir;
      if (!out_dir.empty()) run_dir = out_dir + "/" + name + "_seed" + std::to_string(s);
      TrainOptions opts;
      opts.write_checkpoint = false;
      opts.write_scenes = false;
      RunRecord rec = train(cfg, master, run_dir, nullptr, opts);
      result.runs.push_back(detail::summarize_run(name, master, rec));
    }
  }

  if (!out_dir.empty()) {
    std::ofstream runs(out_dir + "/runs.csv");
    runs << "variant,seed,final_ap50,final_ap_mean,half_ap50,final_train_loss\n";
    for (const auto& r : result.runs)
      runs << r.variant << "," << r.seed << "," << format_double(r.final_ap50) << ","
           << format_double(r.final_ap_mean) << "," << format_double(r.half_ap50) << ","
           << format_double(r.final_train_loss) << "\n";

    std::ofstream summary(out_dir + "/summary.csv");
    summary << "variant,seeds,mean_final_ap50,mean_final_ap_mean,mean_final_train_loss\n";
    for (const auto& name : result.variants) {
      double ap50 = 0.0, apm = 0.0, loss = 0.0;
      int n = 0;
      for (const auto& r : result.runs) {
        if (r.variant != name) continue;
        ap50 += r.final_ap50;
        apm += r.final_ap_mean;
        loss += r.final_train_loss;
        ++n;
      }
      summary << name << "," << n << "," << format_double(ap50 / n) << ","
              << format_double(apm / n) << "," << format_double(loss / n) << "\n";
    }
  }
  return result;
}

// Aligned per-epoch val AP@0.5 columns for a list of named configs, all run
// on the same master seed. Shorter runs are padded with NA.
inline void compare_convergence(
    const std::vector<std::pair<std::string, ExperimentConfig>>& named_configs,
    std::uint64_t master_seed, const std::string& out_csv) {
  if (named_configs.size() < 2)
    throw ConfigError("compare: need at least two configs");
  std::vector<RunRecord> records;
  records.reserve(named_configs.size());
  for (const auto& [name, cfg] : named_configs)
    records.push_back(train(cfg, master_seed));

  std::size_t max_epochs = 0;
  for (const auto& r : records) max_epochs = std::max(max_epochs, r.epochs.size());

  std::ofstream out(out_csv);
  if (!out) throw std::runtime_error("compare: cannot open " + out_csv);
  out << "epoch";
  for (const auto& [name, cfg] : named_configs) out << "," << name << "_ap50";
  out << "\n";
  for (std::size_t e = 0; e < max_epochs; ++e) {
    out << (e + 1);
    for (const auto& r : records) {
      if (e < r.epochs.size())
        out << "," << format_double(r.epochs[e].val_ap50);
      else
        out << ",NA";
    }
    out << "\n";
  }
}

}  // namespace detlab
