#include "faudit/audit.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <regex>
#include <sstream>
#include <thread>

#include "faudit/blackbox.hpp"
#include "faudit/rng.hpp"
#include "faudit/stats.hpp"
#include "json.hpp"

namespace faudit {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kDoneMarker = "complete";

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void log_line(const RunOptions& o, const std::string& msg) {
  static std::mutex m;
  std::lock_guard lock(m);
  std::ostream& os = o.log ? *o.log : std::cerr;
  os << msg << '\n';
  os.flush();
}

/// Runs f(i) for i in [0, n) on up to `jobs` threads; rethrows the first failure.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const auto i = next.fetch_add(1);
        if (i >= n) return;
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// ---- config parsing ----

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

const std::regex kNamePattern("[A-Za-z0-9_-]+");

void parse_train(const json& j, TrainConfig& t, const std::string& where) {
  check_keys(j, where,
             {"epochs", "lr", "batch_size", "early_stop_patience", "weight_decay", "grad_clip"});
  read(j, "epochs", t.epochs, where);
  read(j, "lr", t.lr, where);
  read(j, "batch_size", t.batch_size, where);
  read(j, "early_stop_patience", t.early_stop_patience, where);
  read(j, "weight_decay", t.weight_decay, where);
  read(j, "grad_clip", t.grad_clip, where);
  if (t.epochs == 0) throw ConfigError(where + ".epochs must be >= 1");
  if (t.batch_size == 0) throw ConfigError(where + ".batch_size must be >= 1");
  if (!(t.lr > 0.0)) throw ConfigError(where + ".lr must be positive");
}

json train_to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"lr", t.lr},
          {"batch_size", t.batch_size},
          {"early_stop_patience", t.early_stop_patience},
          {"weight_decay", t.weight_decay},
          {"grad_clip", t.grad_clip}};
}

bool known_explainer(const std::string& id) {
  for (const char* k : {kGradCam, kGradCamVit, kRollout, kClsLast, kRise, kRandom})
    if (id == k) return true;
  return false;
}

json model_arch_json(const ModelSpec& m) {
  const auto& c = m.model;
  json j{{"arch", to_string(c.arch)}};
  if (c.arch == Arch::cnn) {
    j["conv1_channels"] = c.conv1_channels;
    j["conv2_channels"] = c.conv2_channels;
    j["residual"] = c.residual;
    j["cbam_reduction"] = c.cbam_reduction;
    j["spatial_kernel"] = c.spatial_kernel;
  } else {
    j["patch"] = c.patch;
    j["embed_dim"] = c.embed_dim;
    j["depth"] = c.depth;
    j["heads"] = c.heads;
    j["mlp_hidden"] = c.mlp_hidden;
  }
  return j;
}

json resolved(const AuditConfig& c) {
  json j;
  j["output_dir"] = c.output_dir.string();
  j["seeds"] = c.seeds;
  const auto& d = c.dataset;
  json counts;
  for (std::size_t k = 0; k < kWaferClasses; ++k) {
    counts[class_name(k)] = {d.counts[k][0], d.counts[k][1], d.counts[k][2]};
  }
  const auto& g = d.geometry;
  j["dataset"] = {{"seed", d.seed},
                  {"noise_rate", d.noise_rate},
                  {"image_size", g.image_size},
                  {"counts", counts}};
  json models = json::array();
  for (const auto& m : c.models) {
    json mj{{"name", m.name}};
    if (m.black_box()) {
      mj["adapter"] = m.adapter;
      mj["window"] = m.window;
    } else {
      mj.update(model_arch_json(m));
      mj["train"] = train_to_json(m.train);
      mj["gradcam_layer"] = m.gradcam_layer;
    }
    mj["explainers"] = m.explainers;
    models.push_back(mj);
  }
  j["models"] = models;
  j["explainers"] = c.explainers;
  json fills = json::array();
  for (const auto& f : c.fills) fills.push_back(f.name());
  j["fills"] = fills;
  const auto& mt = c.metrics;
  j["metrics"] = {{"curve_steps", mt.curve_steps},
                  {"stability_k", mt.stability_k},
                  {"stability_align", mt.stability_align},
                  {"stability_explainers",
                   std::vector<std::string>(c.stability_explainers.begin(),
                                            c.stability_explainers.end())},
                  {"rotation_deg", mt.augmentation.max_rotation_deg},
                  {"max_shift", mt.augmentation.max_shift},
                  {"noise_sigma", mt.augmentation.noise_sigma},
                  {"topk", mt.topk_percents},
                  {"iou_percentile", mt.iou_percentile}};
  j["rise"] = {{"n_masks", c.rise.n_masks},
               {"grid", c.rise.grid},
               {"p", c.rise.p},
               {"random_shift", c.rise.random_shift}};
  j["audit"] = {{"samples_per_class", c.samples_per_class}, {"subset_seed", c.subset_seed}};
  j["report"] = {{"bootstrap_resamples", c.bootstrap_resamples},
                 {"bootstrap_seed", c.bootstrap_seed}};
  return j;
}

}  // namespace

AuditConfig AuditConfig::from_json(const std::string& text, const fs::path& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "config",
             {"output_dir", "seeds", "dataset", "models", "train", "explainers", "fills", "metrics",
              "rise", "audit", "report"});
  AuditConfig c;
  std::string out_dir = c.output_dir.string();
  read(j, "output_dir", out_dir, "config");
  c.output_dir = fs::path(out_dir).is_absolute() || base.empty() ? fs::path(out_dir) : base / out_dir;
  read(j, "seeds", c.seeds, "config");
  if (c.seeds.empty()) throw ConfigError("config.seeds must not be empty");

  // dataset
  std::size_t train_n = 100, val_n = 30, test_n = 40;
  c.dataset.seed = 1234;
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    check_keys(d, "dataset",
               {"seed", "train_per_class", "val_per_class", "test_per_class", "noise_rate",
                "image_size", "counts"});
    read(d, "seed", c.dataset.seed, "dataset");
    read(d, "train_per_class", train_n, "dataset");
    read(d, "val_per_class", val_n, "dataset");
    read(d, "test_per_class", test_n, "dataset");
    read(d, "noise_rate", c.dataset.noise_rate, "dataset");
    read(d, "image_size", c.dataset.geometry.image_size, "dataset");
  }
  for (auto& row : c.dataset.counts) row = {train_n, val_n, test_n};
  if (j.contains("dataset") && j["dataset"].contains("counts")) {
    const auto& counts = j["dataset"]["counts"];
    if (!counts.is_object()) throw ConfigError("dataset.counts: expected an object");
    for (const auto& [name, v] : counts.items()) {
      std::size_t cls;
      try {
        cls = class_from_name(name);
      } catch (const std::exception&) {
        throw ConfigError("dataset.counts: unknown class '" + name + "'");
      }
      std::array<std::size_t, 3> row{};
      try {
        row = v.get<std::array<std::size_t, 3>>();
      } catch (const json::exception&) {
        throw ConfigError("dataset.counts." + name + ": expected [train, val, test]");
      }
      c.dataset.counts[cls] = row;
    }
  }
  const double s = static_cast<double>(c.dataset.geometry.image_size);
  c.dataset.geometry.wafer_radius = s / 2.0 - 1.0;
  try {
    c.dataset.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }

  // training defaults
  TrainConfig train_defaults;
  if (j.contains("train")) parse_train(j["train"], train_defaults, "train");

  // models
  if (!j.contains("models") || !j["models"].is_array() || j["models"].empty()) {
    throw ConfigError("config.models must be a non-empty list");
  }
  std::set<std::string> names;
  for (std::size_t i = 0; i < j["models"].size(); ++i) {
    const auto& mj = j["models"][i];
    const std::string where = "models[" + std::to_string(i) + "]";
    check_keys(mj, where,
               {"name", "arch", "adapter", "window", "explainers", "gradcam_layer", "train",
                "conv1_channels", "conv2_channels", "residual", "cbam_reduction", "spatial_kernel",
                "patch", "embed_dim", "depth", "heads", "mlp_hidden"});
    ModelSpec m;
    read(mj, "name", m.name, where);
    if (!std::regex_match(m.name, kNamePattern)) {
      throw ConfigError(where + ".name must match [A-Za-z0-9_-]+");
    }
    if (!names.insert(m.name).second) throw ConfigError("duplicate model name '" + m.name + "'");
    read(mj, "adapter", m.adapter, where);
    read(mj, "window", m.window, where);
    read(mj, "explainers", m.explainers, where);
    read(mj, "gradcam_layer", m.gradcam_layer, where);
    std::string arch = "cnn";
    read(mj, "arch", arch, where);
    try {
      m.model.arch = arch_from_string(arch);
    } catch (const std::exception&) {
      throw ConfigError(where + ".arch: unknown architecture '" + arch + "'");
    }
    m.model.image_size = c.dataset.geometry.image_size;
    m.model.n_classes = kWaferClasses;
    read(mj, "conv1_channels", m.model.conv1_channels, where);
    read(mj, "conv2_channels", m.model.conv2_channels, where);
    read(mj, "residual", m.model.residual, where);
    read(mj, "cbam_reduction", m.model.cbam_reduction, where);
    read(mj, "spatial_kernel", m.model.spatial_kernel, where);
    read(mj, "patch", m.model.patch, where);
    read(mj, "embed_dim", m.model.embed_dim, where);
    read(mj, "depth", m.model.depth, where);
    read(mj, "heads", m.model.heads, where);
    read(mj, "mlp_hidden", m.model.mlp_hidden, where);
    m.train = train_defaults;
    if (mj.contains("train")) parse_train(mj["train"], m.train, where + ".train");
    if (m.window == 0) throw ConfigError(where + ".window must be >= 1");
    if (!m.black_box()) {
      try {
        make_model(m.model);
      } catch (const std::exception& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
    for (const auto& e : m.explainers) {
      if (!known_explainer(e)) throw ConfigError(where + ".explainers: unknown explainer '" + e + "'");
      if (m.black_box() ? needs_model_internals(e) : !supports(e, m.model.arch)) {
        throw ConfigError(where + ": explainer '" + e + "' does not apply to this model");
      }
    }
    c.models.push_back(std::move(m));
  }

  read(j, "explainers", c.explainers, "config");
  if (!j.contains("explainers")) c.explainers = {kGradCam, kRollout, kRise, kRandom};
  for (const auto& e : c.explainers)
    if (!known_explainer(e)) throw ConfigError("explainers: unknown explainer '" + e + "'");

  if (j.contains("fills")) {
    std::vector<std::string> fills;
    read(j, "fills", fills, "config");
    if (fills.empty()) throw ConfigError("config.fills must not be empty");
    c.fills.clear();
    for (const auto& f : fills) {
      try {
        c.fills.push_back(FillOperator::parse(f));
      } catch (const std::exception& e) {
        throw ConfigError(std::string("fills: ") + e.what());
      }
    }
  }

  if (j.contains("metrics")) {
    const auto& mj = j["metrics"];
    check_keys(mj, "metrics",
               {"curve_steps", "stability_k", "stability_align", "stability_explainers",
                "rotation_deg", "max_shift", "noise_sigma", "topk", "iou_percentile"});
    auto& m = c.metrics;
    read(mj, "curve_steps", m.curve_steps, "metrics");
    read(mj, "stability_k", m.stability_k, "metrics");
    read(mj, "stability_align", m.stability_align, "metrics");
    read(mj, "rotation_deg", m.augmentation.max_rotation_deg, "metrics");
    read(mj, "max_shift", m.augmentation.max_shift, "metrics");
    read(mj, "noise_sigma", m.augmentation.noise_sigma, "metrics");
    read(mj, "topk", m.topk_percents, "metrics");
    read(mj, "iou_percentile", m.iou_percentile, "metrics");
    std::vector<std::string> stab;
    read(mj, "stability_explainers", stab, "metrics");
    for (const auto& e : stab)
      if (!known_explainer(e)) throw ConfigError("metrics.stability_explainers: unknown '" + e + "'");
    c.stability_explainers.insert(stab.begin(), stab.end());
  }
  if (c.metrics.curve_steps < 1) throw ConfigError("metrics.curve_steps must be >= 1");
  if (c.metrics.stability_k < 1) throw ConfigError("metrics.stability_k must be >= 1");
  for (int k : c.metrics.topk_percents)
    if (k <= 0 || k > 100) throw ConfigError("metrics.topk values must lie in (0, 100]");
  if (!(c.metrics.iou_percentile >= 0.0 && c.metrics.iou_percentile < 100.0)) {
    throw ConfigError("metrics.iou_percentile must lie in [0, 100)");
  }

  if (j.contains("rise")) {
    const auto& rj = j["rise"];
    check_keys(rj, "rise", {"n_masks", "grid", "p", "random_shift"});
    read(rj, "n_masks", c.rise.n_masks, "rise");
    read(rj, "grid", c.rise.grid, "rise");
    read(rj, "p", c.rise.p, "rise");
    read(rj, "random_shift", c.rise.random_shift, "rise");
  }
  try {
    c.rise.validate(c.dataset.geometry.image_size, c.dataset.geometry.image_size);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }

  if (j.contains("audit")) {
    const auto& aj = j["audit"];
    check_keys(aj, "audit", {"samples_per_class", "subset_seed"});
    read(aj, "samples_per_class", c.samples_per_class, "audit");
    read(aj, "subset_seed", c.subset_seed, "audit");
  }
  if (c.samples_per_class == 0) throw ConfigError("audit.samples_per_class must be >= 1");
  for (std::size_t k = 0; k < kWaferClasses; ++k) {
    if (c.dataset.counts[k][2] < c.samples_per_class) {
      throw ConfigError("audit.samples_per_class exceeds the test count of class " +
                        class_name(k));
    }
  }
  if (j.contains("report")) {
    const auto& rj = j["report"];
    check_keys(rj, "report", {"bootstrap_resamples", "bootstrap_seed"});
    read(rj, "bootstrap_resamples", c.bootstrap_resamples, "report");
    read(rj, "bootstrap_seed", c.bootstrap_seed, "report");
  }
  if (c.bootstrap_resamples == 0) throw ConfigError("report.bootstrap_resamples must be >= 1");

  for (const auto& m : c.models) {
    if (c.explainers_for_model(m).empty()) {
      throw ConfigError("model '" + m.name + "' has no applicable explainer");
    }
  }
  return c;
}

AuditConfig AuditConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str(), path.parent_path());
}

std::string AuditConfig::resolved_json() const { return resolved(*this).dump(2); }

std::vector<std::string> AuditConfig::explainers_for_model(const ModelSpec& model) const {
  if (!model.explainers.empty()) return model.explainers;
  std::vector<std::string> out;
  for (const auto& e : explainers) {
    const bool ok = model.black_box() ? !needs_model_internals(e) : supports(e, model.model.arch);
    if (ok) out.push_back(e);
  }
  return out;
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::generate: return "generate";
    case Stage::train: return "train";
    case Stage::explain: return "explain";
    case Stage::audit: return "audit";
    case Stage::report: return "report";
  }
  return "?";
}

namespace {

json stage_slice(const AuditConfig& c, Stage stage) {
  const json r = resolved(c);
  switch (stage) {
    case Stage::generate: return r["dataset"];
    case Stage::train: {
      json models = json::array();
      for (const auto& m : c.models)
        if (!m.black_box())
          models.push_back({{"name", m.name}, {"arch", model_arch_json(m)},
                            {"train", train_to_json(m.train)}});
      return {{"seeds", r["seeds"]}, {"models", models}};
    }
    case Stage::explain:
      return {{"models", r["models"]}, {"explainers", r["explainers"]}, {"rise", r["rise"]},
              {"audit", r["audit"]}};
    case Stage::audit: return {{"fills", r["fills"]}, {"metrics", r["metrics"]}};
    case Stage::report: return r["report"];
  }
  return {};
}

}  // namespace

std::string stage_hash(const AuditConfig& config, Stage stage) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (int s = 0; s <= static_cast<int>(stage); ++s) {
    h = fnv1a(to_string(static_cast<Stage>(s)), h);
    h = fnv1a(stage_slice(config, static_cast<Stage>(s)).dump(), h);
  }
  return hex16(h);
}

fs::path stage_dir(const AuditConfig& config, Stage stage) {
  return config.output_dir / to_string(stage) / stage_hash(config, stage);
}

// ---- per-sample audit ----

std::uint64_t explainer_seed(std::uint64_t run_seed, const std::string& explainer,
                             std::uint64_t sample_id) {
  return mix_seed(mix_seed(run_seed, fnv1a(explainer)), sample_id);
}

std::uint64_t stability_seed(std::uint64_t run_seed, std::uint64_t sample_id) {
  return mix_seed(mix_seed(run_seed, fnv1a("stability")), sample_id);
}

namespace {

std::vector<std::uint8_t> mask_bytes(const Tensor& mask) {
  std::vector<std::uint8_t> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] > 0.5 ? 1 : 0;
  return out;
}

}  // namespace

SampleAudit audit_sample(const Classifier* model, const PredictFn& predict,
                         const std::string& model_name, std::uint64_t run_seed,
                         const WaferSample& sample, const std::vector<std::string>& explainers,
                         const AuditSettings& settings,
                         const std::map<std::string, Heatmap>* precomputed) {
  SampleAudit out;
  auto blank = [&](const std::string& explainer, const FillOperator& fill) {
    AuditRecord r;
    r.run_seed = run_seed;
    r.model = model_name;
    r.sample_id = sample.sample_id;
    r.true_class = sample.label;
    r.explainer = explainer;
    r.fill = fill.name();
    return r;
  };
  auto fail_all = [&](const std::string& explainer, const std::string& why, std::size_t pred,
                      bool have_pred) {
    for (const auto& fill : settings.fills) {
      auto r = blank(explainer, fill);
      if (have_pred) {
        r.predicted_class = pred;
        r.correct = pred == sample.label;
      }
      r.error = why;
      out.records.push_back(std::move(r));
    }
  };

  std::size_t pred = 0;
  try {
    pred = argmax(predict(sample.image));
  } catch (const std::exception& e) {
    for (const auto& ex : explainers) fail_all(ex, std::string("prediction failed: ") + e.what(), 0, false);
    return out;
  }
  const auto mask = mask_bytes(sample.mask);
  const auto region = region_mask(sample.image);
  auto transform = [&](Heatmap h) {
    if (settings.heatmap_transform)
      for (double& v : h.values) v = settings.heatmap_transform(v);
    return h;
  };

  for (const auto& explainer : explainers) {
    ExplainOptions opts;
    opts.rise = settings.rise;
    opts.rise.threads = 1;
    opts.gradcam_layer = settings.gradcam_layer;
    opts.seed = explainer_seed(run_seed, explainer, sample.sample_id);
    Heatmap base;
    StabilityResult stab;
    const bool measure = settings.stability_explainers.empty() ||
                         settings.stability_explainers.count(explainer) > 0;
    try {
      if (precomputed && precomputed->count(explainer)) {
        base = precomputed->at(explainer);
      } else {
        base = explain(explainer, model, predict, sample.image, pred, opts);
      }
      base.sample_id = sample.sample_id;
      base = transform(std::move(base));
      if (measure) {
        // Each augmented view gets its own explainer seed.
        std::uint64_t view = 0;
        const ExplainFn fn = [&](const Tensor& x) {
          auto o = opts;
          o.seed = mix_seed(opts.seed, ++view);
          return transform(explain(explainer, model, predict, x, argmax(predict(x)), o));
        };
        stab = stability(fn, sample.image, base, settings.metrics.stability_k,
                         settings.metrics.augmentation, region,
                         stability_seed(run_seed, sample.sample_id), settings.metrics.stability_align);
      }
    } catch (const std::exception& e) {
      fail_all(explainer, std::string("explainer failed: ") + e.what(), pred, true);
      continue;
    }

    for (const auto& fill : settings.fills) {
      auto r = blank(explainer, fill);
      r.predicted_class = pred;
      r.correct = pred == sample.label;
      try {
        const auto s = score_heatmap(predict, sample.image, base, mask, fill, settings.metrics);
        r.del_auc = s.del_auc;
        r.ins_auc = s.ins_auc;
        r.iou = s.iou;
        r.spearman_defect = s.spearman_defect;
        r.has_mask = s.has_mask;
        r.topk_drop = s.topk_drop;
        r.degenerate = base.degenerate;
        r.annotations = s.annotations;
        r.has_stability = measure;
        r.stability = measure ? stab.value : 0.0;
        if (measure && stab.degenerate_terms > 0) {
          r.annotations.push_back("stability_degenerate_terms:" +
                                  std::to_string(stab.degenerate_terms));
        }
        for (const auto* curve : {&s.deletion, &s.insertion})
          for (std::size_t i = 0; i < curve->fractions.size(); ++i)
            out.curves.push_back({run_seed, model_name, sample.sample_id, explainer, r.fill,
                                  curve->direction, curve->fractions[i], curve->probabilities[i]});
      } catch (const std::exception& e) {
        r = blank(explainer, fill);
        r.predicted_class = pred;
        r.correct = pred == sample.label;
        r.error = std::string("scoring failed: ") + e.what();
      }
      out.records.push_back(std::move(r));
    }
  }
  return out;
}

// ---- record files ----

std::string record_to_json(const AuditRecord& r) {
  json topk = json::object();
  for (const auto& [k, v] : r.topk_drop) topk[std::to_string(k)] = v;
  json j{{"run_seed", r.run_seed},
         {"model", r.model},
         {"sample_id", r.sample_id},
         {"true_class", r.true_class},
         {"predicted_class", r.predicted_class},
         {"correct", r.correct},
         {"explainer", r.explainer},
         {"fill", r.fill},
         {"del_auc", r.del_auc},
         {"ins_auc", r.ins_auc},
         {"stability", r.stability},
         {"iou", r.iou},
         {"spearman_defect", r.spearman_defect},
         {"topk_drop", topk},
         {"has_mask", r.has_mask},
         {"has_stability", r.has_stability},
         {"degenerate", r.degenerate},
         {"annotations", r.annotations},
         {"error", r.error}};
  return j.dump();
}

AuditRecord record_from_json(const std::string& line) {
  const json j = json::parse(line);
  AuditRecord r;
  r.run_seed = j.at("run_seed").get<std::uint64_t>();
  r.model = j.at("model").get<std::string>();
  r.sample_id = j.at("sample_id").get<std::uint64_t>();
  r.true_class = j.at("true_class").get<std::size_t>();
  r.predicted_class = j.at("predicted_class").get<std::size_t>();
  r.correct = j.at("correct").get<bool>();
  r.explainer = j.at("explainer").get<std::string>();
  r.fill = j.at("fill").get<std::string>();
  r.del_auc = j.at("del_auc").get<double>();
  r.ins_auc = j.at("ins_auc").get<double>();
  r.stability = j.at("stability").get<double>();
  r.iou = j.at("iou").get<double>();
  r.spearman_defect = j.at("spearman_defect").get<double>();
  for (const auto& [k, v] : j.at("topk_drop").items()) r.topk_drop[std::stoi(k)] = v.get<double>();
  r.has_mask = j.value("has_mask", true);
  r.has_stability = j.value("has_stability", true);
  r.degenerate = j.at("degenerate").get<bool>();
  r.annotations = j.at("annotations").get<std::vector<std::string>>();
  r.error = j.at("error").get<std::string>();
  return r;
}

void write_records_jsonl(const fs::path& path, const std::vector<AuditRecord>& rows) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& r : rows) out << record_to_json(r) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<AuditRecord> read_records_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot read " + path.string());
  std::vector<AuditRecord> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      rows.push_back(record_from_json(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

void write_records_csv(const fs::path& path, const std::vector<AuditRecord>& rows,
                       const std::vector<int>& topk) {
  std::ofstream out(path, std::ios::trunc);
  out << "run_seed,model,sample_id,true_class,predicted_class,correct,explainer,fill,del_auc,"
         "ins_auc,stability,iou,spearman_defect";
  for (int k : topk) out << ",topk_" << k;
  out << ",has_mask,has_stability,degenerate,annotations,error\n";
  for (const auto& r : rows) {
    out << r.run_seed << ',' << r.model << ',' << r.sample_id << ',' << r.true_class << ','
        << r.predicted_class << ',' << r.correct << ',' << r.explainer << ',' << r.fill << ',';
    if (r.ok()) {
      out << num(r.del_auc) << ',' << num(r.ins_auc) << ',' << num(r.stability) << ','
          << num(r.iou) << ',' << num(r.spearman_defect);
      for (int k : topk) {
        auto it = r.topk_drop.find(k);
        out << ',' << (it == r.topk_drop.end() ? std::string() : num(it->second));
      }
    } else {
      out << ",,,,";
      for (std::size_t i = 0; i < topk.size(); ++i) out << ',';
    }
    std::string notes;
    for (const auto& a : r.annotations) notes += (notes.empty() ? "" : ";") + a;
    std::string err = r.error;
    std::replace(err.begin(), err.end(), '"', '\'');
    out << ',' << r.has_mask << ',' << r.has_stability << ',' << r.degenerate << ',' << notes
        << ",\"" << err << "\"\n";
  }
}

void write_curves_csv(const fs::path& path, const std::vector<CurveRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  out << "run_seed,model,sample_id,explainer,fill,direction,fraction,probability\n";
  for (const auto& c : rows) {
    out << c.run_seed << ',' << c.model << ',' << c.sample_id << ',' << c.explainer << ','
        << c.fill << ',' << to_string(c.direction) << ',' << num(c.fraction) << ','
        << num(c.probability) << '\n';
  }
}

std::vector<CurveRow> read_curves_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot read " + path.string());
  std::vector<CurveRow> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw std::runtime_error("malformed curve row in " + path.string());
    CurveRow c;
    c.run_seed = std::stoull(f[0]);
    c.model = f[1];
    c.sample_id = std::stoull(f[2]);
    c.explainer = f[3];
    c.fill = f[4];
    c.direction = f[5] == "deletion" ? Direction::deletion : Direction::insertion;
    c.fraction = std::stod(f[6]);
    c.probability = std::stod(f[7]);
    rows.push_back(std::move(c));
  }
  return rows;
}

// ---- report ----

namespace {

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '<') out += "&lt;";
    else if (ch == '>') out += "&gt;";
    else if (ch == '&') out += "&amp;";
    else out += ch;
  }
  return out;
}

void write_svg(const fs::path& path, const std::string& title,
               const std::map<std::string, std::vector<std::pair<double, double>>>& series) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const double w = 640, h = 400, left = 60, right = 190, top = 40, bottom = 50;
  const double pw = w - left - right, ph = h - top - bottom;
  std::ofstream out(path, std::ios::trunc);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << left << "\" y=\"24\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    const double x = left + v * pw, y = top + (1 - v) * ph;
    out << "<text x=\"" << x - 8 << "\" y=\"" << top + ph + 16 << "\">" << fixed(v, 2) << "</text>\n";
    out << "<text x=\"" << left - 40 << "\" y=\"" << y + 4 << "\">" << fixed(v, 2) << "</text>\n";
    out << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << y << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n";
  }
  out << "<text x=\"" << left + pw / 2 - 60 << "\" y=\"" << h - 12
      << "\">fraction of pixels perturbed</text>\n";
  out << "<text x=\"14\" y=\"" << top + ph / 2 + 40
      << "\" transform=\"rotate(-90 14 " << top + ph / 2 + 40 << ")\">probability</text>\n";
  std::size_t idx = 0;
  for (const auto& [name, pts] : series) {
    const char* col = colors[idx % 10];
    out << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (const auto& [fx, fy] : pts) out << left + fx * pw << ',' << top + (1 - fy) * ph << ' ';
    out << "\"/>\n";
    const double ly = top + 10 + 18.0 * static_cast<double>(idx);
    out << "<line x1=\"" << left + pw + 10 << "\" x2=\"" << left + pw + 30 << "\" y1=\"" << ly
        << "\" y2=\"" << ly << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly + 4 << "\">" << svg_escape(name)
        << "</text>\n";
    ++idx;
  }
  out << "</svg>\n";
}

std::string family_row_header(const std::vector<int>& topk) {
  std::string h = "family,fill,n";
  for (auto m : stats::all_metrics()) h += "," + to_string(m) + "_mean," + to_string(m) + "_std";
  for (int k : topk) h += ",topk_" + std::to_string(k) + "_mean";
  return h + ",degenerate,del_auc_ci_low,del_auc_ci_high";
}

std::string family_row(const stats::FamilySummary& s, const std::vector<int>& topk) {
  std::string row = s.family + "," + s.fill + "," + std::to_string(s.n);
  for (auto m : stats::all_metrics()) {
    auto it = s.metrics.find(m);
    if (it == s.metrics.end()) row += ",,";
    else row += "," + num(it->second.mean) + "," + num(it->second.std);
  }
  for (int k : topk) {
    auto it = s.topk.find(k);
    row += "," + (it == s.topk.end() ? std::string() : num(it->second.mean));
  }
  return row + "," + std::to_string(s.degenerate) + "," + num(s.del_auc_ci.low) + "," +
         num(s.del_auc_ci.high);
}

json summary_json(const stats::FamilySummary& s) {
  json j{{"family", s.family}, {"fill", s.fill}, {"n", s.n}, {"degenerate", s.degenerate}};
  for (const auto& [m, v] : s.metrics) j[to_string(m)] = {{"mean", v.mean}, {"std", v.std}};
  json topk = json::object();
  for (const auto& [k, v] : s.topk) topk[std::to_string(k)] = {{"mean", v.mean}, {"std", v.std}};
  j["topk_drop"] = topk;
  j["del_auc_ci"] = {s.del_auc_ci.low, s.del_auc_ci.high};
  return j;
}

void write_family_table(const fs::path& path, const std::vector<stats::FamilySummary>& rows,
                        const std::vector<int>& topk) {
  std::ofstream out(path, std::ios::trunc);
  out << family_row_header(topk) << '\n';
  for (const auto& s : rows) out << family_row(s, topk) << '\n';
}

}  // namespace

void write_report(const fs::path& dir, const std::vector<AuditRecord>& records,
                  const std::vector<CurveRow>& curves, std::size_t bootstrap_resamples,
                  std::uint64_t bootstrap_seed) {
  fs::create_directories(dir);
  std::vector<AuditRecord> ok;
  std::vector<AuditRecord> failed;
  for (const auto& r : records) (r.ok() ? ok : failed).push_back(r);

  std::set<int> topk_set;
  for (const auto& r : ok)
    for (const auto& [k, _] : r.topk_drop) topk_set.insert(k);
  const std::vector<int> topk(topk_set.begin(), topk_set.end());
  std::set<std::string> fills;
  for (const auto& r : ok) fills.insert(r.fill);

  json report;
  std::ostringstream txt;
  txt << "Explanation faithfulness audit\n";
  txt << "rows: " << records.size() << " (" << failed.size() << " failed)\n\n";

  // Family means with bootstrap intervals.
  const auto fam = stats::summarize(ok, bootstrap_resamples, bootstrap_seed);
  write_family_table(dir / "family_means.csv", fam, topk);
  report["family_means"] = json::array();
  for (const auto& s : fam) report["family_means"].push_back(summary_json(s));
  txt << "Family means (lower deletion AUC and higher insertion AUC are more faithful)\n";
  for (const auto& s : fam) {
    auto get = [&](stats::Metric m) {
      auto it = s.metrics.find(m);
      return it == s.metrics.end() ? std::nan("") : it->second.mean;
    };
    txt << "  " << s.family << " [" << s.fill << "] n=" << s.n
        << "  del=" << fixed(get(stats::Metric::del_auc))
        << "  ins=" << fixed(get(stats::Metric::ins_auc))
        << "  stab=" << fixed(get(stats::Metric::stability))
        << "  iou=" << fixed(get(stats::Metric::iou))
        << "  rho=" << fixed(get(stats::Metric::spearman_defect))
        << "  degenerate=" << s.degenerate << "\n";
  }

  // Per-seed family means.
  {
    std::map<std::tuple<std::uint64_t, std::string, std::string>, std::array<std::vector<double>, 2>>
        by_seed;
    for (const auto& r : ok) {
      auto& cell = by_seed[{r.run_seed, r.family(), r.fill}];
      cell[0].push_back(r.del_auc);
      cell[1].push_back(r.ins_auc);
    }
    std::ofstream out(dir / "family_means_by_seed.csv", std::ios::trunc);
    out << "run_seed,family,fill,n,del_auc_mean,ins_auc_mean\n";
    report["family_means_by_seed"] = json::array();
    for (const auto& [key, v] : by_seed) {
      const auto& [seed, family, fill] = key;
      const double d = stats::mean(v[0]), i = stats::mean(v[1]);
      out << seed << ',' << family << ',' << fill << ',' << v[0].size() << ',' << num(d) << ','
          << num(i) << '\n';
      report["family_means_by_seed"].push_back(
          {{"run_seed", seed}, {"family", family}, {"fill", fill}, {"n", v[0].size()},
           {"del_auc", d}, {"ins_auc", i}});
    }
  }

  // Per-class deletion AUC.
  {
    std::ofstream out(dir / "per_class.csv", std::ios::trunc);
    out << "fill,class,family,del_auc_mean\n";
    report["per_class"] = json::array();
    for (const auto& fill : fills) {
      std::vector<AuditRecord> part;
      for (const auto& r : ok)
        if (r.fill == fill) part.push_back(r);
      const auto table = stats::per_class_table(part, stats::Metric::del_auc);
      for (auto cls : table.classes)
        for (const auto& f : table.families) {
          const auto v = table.at(cls, f);
          if (!v) continue;
          out << fill << ',' << class_name(cls) << ',' << f << ',' << num(*v) << '\n';
          report["per_class"].push_back(
              {{"fill", fill}, {"class", class_name(cls)}, {"family", f}, {"del_auc", *v}});
        }
    }
  }

  // Cohen's d between every pair of families under the same fill.
  {
    std::ofstream out(dir / "cohens_d.csv", std::ios::trunc);
    out << "fill,family_a,family_b,n_a,n_b,metric,mean_a,mean_b,cohens_d\n";
    report["cohens_d"] = json::array();
    txt << "\nEffect sizes (Cohen's d, pooled SD; a minus b)\n";
    for (const auto& fill : fills) {
      std::map<std::string, std::array<std::vector<double>, 2>> by_family;
      for (const auto& r : ok) {
        if (r.fill != fill) continue;
        by_family[r.family()][0].push_back(r.del_auc);
        by_family[r.family()][1].push_back(r.ins_auc);
      }
      for (auto a = by_family.begin(); a != by_family.end(); ++a)
        for (auto b = std::next(a); b != by_family.end(); ++b)
          for (int m = 0; m < 2; ++m) {
            const char* metric = m == 0 ? "del_auc" : "ins_auc";
            double d = std::nan("");
            try {
              d = stats::cohens_d(a->second[m], b->second[m]);
            } catch (const std::exception&) {
            }
            const double ma = stats::mean(a->second[m]), mb = stats::mean(b->second[m]);
            out << fill << ',' << a->first << ',' << b->first << ',' << a->second[m].size() << ','
                << b->second[m].size() << ',' << metric << ',' << num(ma) << ',' << num(mb) << ','
                << (std::isnan(d) ? "nan" : num(d)) << '\n';
            json row{{"fill", fill}, {"family_a", a->first}, {"family_b", b->first},
                     {"metric", metric}, {"mean_a", ma}, {"mean_b", mb},
                     {"n_a", a->second[m].size()}, {"n_b", b->second[m].size()}};
            row["cohens_d"] = std::isnan(d) ? json(nullptr) : json(d);
            report["cohens_d"].push_back(row);
            if (m == 0) {
              txt << "  [" << fill << "] " << a->first << " vs " << b->first
                  << "  del d=" << fixed(d, 3) << "\n";
            }
          }
    }
  }

  // Bootstrap intervals.
  {
    std::ofstream out(dir / "bootstrap_ci.csv", std::ios::trunc);
    out << "family,fill,n,del_auc_mean,ci_low,ci_high\n";
    for (const auto& s : fam) {
      out << s.family << ',' << s.fill << ',' << s.n << ','
          << num(s.metrics.at(stats::Metric::del_auc).mean) << ',' << num(s.del_auc_ci.low) << ','
          << num(s.del_auc_ci.high) << '\n';
    }
    txt << "\n95% percentile-bootstrap intervals for mean deletion AUC ("
        << bootstrap_resamples << " resamples)\n";
    for (const auto& s : fam) {
      txt << "  " << s.family << " [" << s.fill << "]  [" << fixed(s.del_auc_ci.low) << ", "
          << fixed(s.del_auc_ci.high) << "]\n";
    }
    txt << "  Note: rows are resampled as if independent. Rows that share a sample or a\n"
           "  training seed are correlated, so these intervals are narrower than a\n"
           "  seed-aware analysis would give.\n";
  }

  // Commonly-correct subset.
  {
    std::ofstream out(dir / "commonly_correct.csv", std::ios::trunc);
    try {
      const auto keys = stats::commonly_correct_filter(ok);
      const auto subset = stats::restrict_to(ok, keys);
      const auto s = stats::summarize(subset, bootstrap_resamples, bootstrap_seed);
      out << family_row_header(topk) << '\n';
      for (const auto& row : s) out << family_row(row, topk) << '\n';
      report["commonly_correct"] = {{"samples", keys.size()}, {"families", json::array()}};
      for (const auto& row : s) report["commonly_correct"]["families"].push_back(summary_json(row));
      txt << "\nCommonly-correct subset: " << keys.size()
          << " (seed, sample) pairs classified correctly by every model\n";
      for (const auto& row : s) {
        txt << "  " << row.family << " [" << row.fill << "] n=" << row.n
            << "  del=" << fixed(row.metrics.at(stats::Metric::del_auc).mean)
            << "  ins=" << fixed(row.metrics.at(stats::Metric::ins_auc).mean) << "\n";
      }
    } catch (const std::exception& e) {
      out << "error\n" << e.what() << '\n';
      report["commonly_correct"] = {{"error", e.what()}};
      txt << "\nCommonly-correct subset unavailable: " << e.what() << "\n";
    }
  }

  // Top-k confidence drop.
  {
    std::ofstream out(dir / "topk.csv", std::ios::trunc);
    out << "family,fill,k_percent,mean_drop,std_drop,n\n";
    report["topk"] = json::array();
    txt << "\nConfidence drop after removing the top-k% pixels\n";
    for (const auto& s : fam) {
      txt << "  " << s.family << " [" << s.fill << "]";
      for (const auto& [k, v] : s.topk) {
        out << s.family << ',' << s.fill << ',' << k << ',' << num(v.mean) << ',' << num(v.std)
            << ',' << s.n << '\n';
        report["topk"].push_back({{"family", s.family}, {"fill", s.fill}, {"k_percent", k},
                                  {"mean", v.mean}, {"std", v.std}});
        txt << "  " << k << "%=" << fixed(v.mean);
      }
      txt << "\n";
    }
  }

  // Without the defect-free class.
  {
    const auto subset = stats::exclude_class(ok, static_cast<std::size_t>(WaferClass::none));
    std::ofstream out(dir / "exclude_none.csv", std::ios::trunc);
    report["exclude_none"] = json::array();
    if (!subset.empty()) {
      const auto s = stats::summarize(subset, bootstrap_resamples, bootstrap_seed);
      write_family_table(dir / "exclude_none.csv", s, topk);
      for (const auto& row : s) report["exclude_none"].push_back(summary_json(row));
    } else {
      out << family_row_header(topk) << '\n';
    }
  }

  // Native explainers against the random baseline of the same model.
  {
    std::ofstream out(dir / "random_baseline.csv", std::ios::trunc);
    out << "model,fill,explainer,del_auc_mean,ins_auc_mean,random_del_auc,random_ins_auc,"
           "del_minus_random,ins_minus_random\n";
    report["random_baseline"] = json::array();
    std::map<std::tuple<std::string, std::string, std::string>, std::array<std::vector<double>, 2>>
        cells;
    for (const auto& r : ok) {
      auto& c = cells[{r.model, r.fill, r.explainer}];
      c[0].push_back(r.del_auc);
      c[1].push_back(r.ins_auc);
    }
    txt << "\nAgainst the random baseline (same model and fill)\n";
    for (const auto& [key, v] : cells) {
      const auto& [model, fill, explainer] = key;
      if (explainer == kRandom) continue;
      auto rnd = cells.find({model, fill, kRandom});
      if (rnd == cells.end()) continue;
      const double d = stats::mean(v[0]), i = stats::mean(v[1]);
      const double rd = stats::mean(rnd->second[0]), ri = stats::mean(rnd->second[1]);
      out << model << ',' << fill << ',' << explainer << ',' << num(d) << ',' << num(i) << ','
          << num(rd) << ',' << num(ri) << ',' << num(d - rd) << ',' << num(i - ri) << '\n';
      report["random_baseline"].push_back({{"model", model}, {"fill", fill},
                                           {"explainer", explainer}, {"del_auc", d},
                                           {"ins_auc", i}, {"random_del_auc", rd},
                                           {"random_ins_auc", ri}});
      txt << "  " << model << "/" << explainer << " [" << fill << "]  del " << fixed(d)
          << " vs random " << fixed(rd) << ", ins " << fixed(i) << " vs random " << fixed(ri)
          << "\n";
    }
  }

  // Mean curves and plots.
  {
    std::map<std::tuple<std::string, std::string, Direction, double>, std::pair<double, std::size_t>>
        acc;
    for (const auto& c : curves) {
      auto& cell = acc[{c.model + "/" + c.explainer, c.fill, c.direction, c.fraction}];
      cell.first += c.probability;
      ++cell.second;
    }
    std::ofstream out(dir / "curves_mean.csv", std::ios::trunc);
    out << "family,fill,direction,fraction,mean_probability\n";
    std::map<std::pair<std::string, Direction>,
             std::map<std::string, std::vector<std::pair<double, double>>>>
        plots;
    for (const auto& [key, v] : acc) {
      const auto& [family, fill, direction, fraction] = key;
      const double m = v.first / static_cast<double>(v.second);
      out << family << ',' << fill << ',' << to_string(direction) << ',' << num(fraction) << ','
          << num(m) << '\n';
      plots[{fill, direction}][family].emplace_back(fraction, m);
    }
    for (const auto& [key, series] : plots) {
      const auto& [fill, direction] = key;
      std::string safe = fill;
      std::replace(safe.begin(), safe.end(), ':', '_');
      write_svg(dir / ("curves_" + safe + "_" + to_string(direction) + ".svg"),
                "Mean " + to_string(direction) + " curve, " + fill + " fill", series);
    }
  }

  // Failed rows.
  {
    std::ofstream out(dir / "errors.csv", std::ios::trunc);
    out << "run_seed,model,sample_id,explainer,fill,error\n";
    for (const auto& r : failed) {
      std::string err = r.error;
      std::replace(err.begin(), err.end(), '"', '\'');
      out << r.run_seed << ',' << r.model << ',' << r.sample_id << ',' << r.explainer << ','
          << r.fill << ",\"" << err << "\"\n";
    }
    report["failed_rows"] = failed.size();
  }

  // Accuracy of each model over the audited samples.
  {
    std::map<std::string, std::map<std::pair<std::uint64_t, std::uint64_t>, std::pair<std::size_t, std::size_t>>>
        seen;
    for (const auto& r : records)
      seen[r.model][{r.run_seed, r.sample_id}] = {r.true_class, r.predicted_class};
    txt << "\nClassification on audited samples\n";
    report["accuracy"] = json::array();
    for (const auto& [model, rows] : seen) {
      std::vector<std::size_t> truth, pred;
      for (const auto& [_, tp] : rows) {
        truth.push_back(tp.first);
        pred.push_back(tp.second);
      }
      const double bacc = stats::balanced_accuracy(truth, pred, kWaferClasses);
      const double f1 = stats::macro_f1(truth, pred, kWaferClasses);
      report["accuracy"].push_back({{"model", model}, {"balanced_accuracy", bacc},
                                    {"macro_f1", f1}, {"n", truth.size()}});
      txt << "  " << model << "  balanced accuracy " << fixed(bacc) << "  macro-F1 " << fixed(f1)
          << "  (n=" << truth.size() << ")\n";
    }
  }

  std::ofstream(dir / "report.json", std::ios::trunc) << report.dump(2) << '\n';
  std::ofstream(dir / "summary.txt", std::ios::trunc) << txt.str();
}

// ---- stages ----

namespace {

void write_stage_config(const fs::path& dir, const AuditConfig& config, Stage stage) {
  fs::create_directories(dir);
  json j = json::parse(config.resolved_json());
  j["stage"] = to_string(stage);
  j["stage_hash"] = stage_hash(config, stage);
  std::ofstream(dir / "config.json", std::ios::trunc) << j.dump(2) << '\n';
}

void mark_done(const fs::path& dir) { std::ofstream(dir / kDoneMarker) << "ok\n"; }

fs::path require_stage(const AuditConfig& config, Stage stage) {
  const auto dir = stage_dir(config, stage);
  if (!fs::exists(dir / kDoneMarker)) {
    throw MissingArtifact("no completed '" + to_string(stage) + "' stage for this configuration (" +
                          dir.string() + "); run `faudit " + to_string(stage) + "` first");
  }
  return dir;
}

std::string model_file(const std::string& name, std::uint64_t seed) {
  return name + "_s" + std::to_string(seed) + ".faud";
}

bool executable_exists(const std::string& cmd) {
  if (cmd.find('/') != std::string::npos) return ::access(cmd.c_str(), X_OK) == 0;
  const char* path = std::getenv("PATH");
  if (!path) return false;
  std::stringstream ss(path);
  std::string dir;
  while (std::getline(ss, dir, ':'))
    if (!dir.empty() && ::access((fs::path(dir) / cmd).c_str(), X_OK) == 0) return true;
  return false;
}

void check_adapters(const AuditConfig& config) {
  for (const auto& m : config.models) {
    if (m.black_box() && !executable_exists(m.adapter.front())) {
      throw ConfigError("model '" + m.name + "': adapter '" + m.adapter.front() +
                        "' is not an executable");
    }
  }
}

std::vector<WaferSample> eval_subset(const AuditConfig& config) {
  const auto data_dir = require_stage(config, Stage::generate) / "data";
  const auto samples = load_dataset(data_dir);
  return balanced_eval_subset(samples, config.samples_per_class, config.subset_seed);
}

/// A model for one run seed: in-process classifier or adapter session.
struct LoadedModel {
  std::unique_ptr<Classifier> model;
  std::unique_ptr<bb::ModelHandle> handle;
  PredictFn predict;
};

LoadedModel load_for(const AuditConfig& config, const ModelSpec& spec, std::uint64_t seed) {
  LoadedModel lm;
  if (spec.black_box()) {
    bb::HandleOptions opts;
    opts.window = spec.window;
    lm.handle = bb::ModelHandle::spawn(spec.adapter, opts);
    if (lm.handle->n_classes() != kWaferClasses) {
      throw ConfigError("model '" + spec.name + "': adapter reports " +
                        std::to_string(lm.handle->n_classes()) + " classes, dataset has " +
                        std::to_string(kWaferClasses));
    }
    lm.predict = lm.handle->predictor();
  } else {
    const auto path = require_stage(config, Stage::train) / model_file(spec.name, seed);
    lm.model = load_model(path);
    lm.predict = predictor(*lm.model);
  }
  return lm;
}

std::string heatmap_stem(const std::string& model, std::uint64_t seed, const std::string& explainer,
                         std::uint64_t sample_id) {
  return "heatmaps/" + model + "_s" + std::to_string(seed) + "/" + explainer + "/" +
         std::to_string(sample_id);
}

}  // namespace

StageResult run_generate(const AuditConfig& config, const RunOptions& options) {
  const auto dir = stage_dir(config, Stage::generate);
  write_stage_config(dir, config, Stage::generate);
  const auto samples = generate(config.dataset);
  save_dataset(dir / "data", samples, resolved(config)["dataset"].dump());
  mark_done(dir);
  log_line(options, "generate: " + std::to_string(samples.size()) + " samples -> " + dir.string());
  return {dir, 0};
}

StageResult run_train(const AuditConfig& config, const RunOptions& options) {
  const auto data_dir = require_stage(config, Stage::generate) / "data";
  const auto dir = stage_dir(config, Stage::train);
  write_stage_config(dir, config, Stage::train);
  fs::remove(dir / kDoneMarker);
  const auto samples = load_dataset(data_dir);
  const auto train_set = to_labeled(filter_split(samples, Split::train));
  const auto val_set = to_labeled(filter_split(samples, Split::val));
  const auto test_set = to_labeled(filter_split(samples, Split::test));

  struct Job {
    const ModelSpec* spec;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto seed : config.seeds)
    for (const auto& m : config.models)
      if (!m.black_box()) jobs.push_back({&m, seed});

  std::vector<json> results(jobs.size());
  std::vector<std::string> logs(jobs.size());
  parallel_for(jobs.size(), options.jobs, [&](std::size_t i) {
    const auto& [spec, seed] = jobs[i];
    auto mc = spec->model;
    mc.init_seed = mix_seed(seed, 1);
    auto model = make_model(mc);
    auto tc = spec->train;
    tc.seed = mix_seed(seed, 2);
    const std::string tag = spec->name + " seed " + std::to_string(seed);
    std::ostringstream log;
    const auto res = train(*model, train_set, val_set, tc, [&](const EpochStats& e) {
      log << spec->name << ',' << seed << ',' << e.epoch << ',' << num(e.train_loss) << ','
          << num(e.val_balanced_accuracy) << '\n';
      log_line(options, "train " + tag + ": epoch " + std::to_string(e.epoch) + " loss " +
                            fixed(e.train_loss) + " val bacc " + fixed(e.val_balanced_accuracy));
    });
    save_model(dir / model_file(spec->name, seed), *model);
    std::vector<std::size_t> truth;
    for (const auto& s : test_set) truth.push_back(s.label);
    const auto pred = predict_all(*model, test_set);
    const double bacc = stats::balanced_accuracy(truth, pred, kWaferClasses);
    results[i] = {{"model", spec->name},
                  {"seed", seed},
                  {"best_epoch", res.best_epoch},
                  {"epochs_run", res.history.size()},
                  {"val_balanced_accuracy", res.best_val_balanced_accuracy},
                  {"test_balanced_accuracy", bacc},
                  {"test_macro_f1", stats::macro_f1(truth, pred, kWaferClasses)}};
    logs[i] = log.str();
    log_line(options, "train " + tag + ": test balanced accuracy " + fixed(bacc));
  });

  std::ofstream(dir / "metrics.json", std::ios::trunc) << json(results).dump(2) << '\n';
  std::ofstream log(dir / "training_log.csv", std::ios::trunc);
  log << "model,seed,epoch,train_loss,val_balanced_accuracy\n";
  for (const auto& l : logs) log << l;
  mark_done(dir);
  return {dir, 0};
}

StageResult run_explain(const AuditConfig& config, const RunOptions& options) {
  check_adapters(config);
  const auto subset = eval_subset(config);
  const auto dir = stage_dir(config, Stage::explain);
  write_stage_config(dir, config, Stage::explain);
  fs::remove(dir / kDoneMarker);

  std::size_t failures = 0;
  std::ofstream errors(dir / "errors.jsonl", std::ios::trunc);
  for (auto seed : config.seeds)
    for (const auto& spec : config.models) {
      auto lm = load_for(config, spec, seed);
      const auto explainers = config.explainers_for_model(spec);
      for (const auto& e : explainers)
        fs::create_directories((dir / heatmap_stem(spec.name, seed, e, 0)).parent_path());
      std::vector<std::vector<std::string>> errs(subset.size());
      parallel_for(subset.size(), options.jobs, [&](std::size_t i) {
        const auto& s = subset[i];
        std::size_t pred = 0;
        try {
          pred = argmax(lm.predict(s.image));
        } catch (const std::exception& ex) {
          for (const auto& e : explainers)
            errs[i].push_back(json{{"model", spec.name}, {"run_seed", seed}, {"sample_id", s.sample_id},
                                   {"explainer", e}, {"error", std::string("prediction failed: ") + ex.what()}}
                                  .dump());
          return;
        }
        for (const auto& e : explainers) {
          ExplainOptions opts;
          opts.rise = config.rise;
          opts.gradcam_layer = spec.gradcam_layer;
          opts.seed = explainer_seed(seed, e, s.sample_id);
          try {
            auto map = explain(e, lm.model.get(), lm.predict, s.image, pred, opts);
            map.sample_id = s.sample_id;
            const json extra{{"model", spec.name}, {"run_seed", seed}, {"explainer_seed", opts.seed}};
            save_heatmap(dir / heatmap_stem(spec.name, seed, e, s.sample_id), map, extra.dump());
          } catch (const std::exception& ex) {
            errs[i].push_back(json{{"model", spec.name}, {"run_seed", seed}, {"sample_id", s.sample_id},
                                   {"explainer", e}, {"error", ex.what()}}
                                  .dump());
          }
        }
      });
      for (const auto& v : errs)
        for (const auto& line : v) {
          errors << line << '\n';
          ++failures;
        }
      log_line(options, "explain: " + spec.name + " seed " + std::to_string(seed) + " done");
    }
  mark_done(dir);
  return {dir, failures};
}

StageResult run_audit(const AuditConfig& config, const RunOptions& options) {
  check_adapters(config);
  const auto subset = eval_subset(config);
  const auto explain_dir = require_stage(config, Stage::explain);
  const auto dir = stage_dir(config, Stage::audit);
  write_stage_config(dir, config, Stage::audit);
  fs::remove(dir / kDoneMarker);

  std::map<std::string, std::string> explain_errors;  // key: model/seed/explainer/sample
  {
    std::ifstream in(explain_dir / "errors.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      explain_errors[j["model"].get<std::string>() + "/" + std::to_string(j["run_seed"].get<std::uint64_t>()) +
                     "/" + j["explainer"].get<std::string>() + "/" +
                     std::to_string(j["sample_id"].get<std::uint64_t>())] = j["error"].get<std::string>();
    }
  }

  std::vector<AuditRecord> records;
  std::vector<CurveRow> curves;
  for (auto seed : config.seeds)
    for (const auto& spec : config.models) {
      auto lm = load_for(config, spec, seed);
      const auto explainers = config.explainers_for_model(spec);
      AuditSettings settings;
      settings.fills = config.fills;
      settings.metrics = config.metrics;
      settings.rise = config.rise;
      settings.gradcam_layer = spec.gradcam_layer;
      settings.stability_explainers = config.stability_explainers;
      std::vector<SampleAudit> results(subset.size());
      parallel_for(subset.size(), options.jobs, [&](std::size_t i) {
        const auto& s = subset[i];
        std::map<std::string, Heatmap> maps;
        std::vector<std::string> runnable;
        SampleAudit failed;
        for (const auto& e : explainers) {
          const auto key = spec.name + "/" + std::to_string(seed) + "/" + e + "/" + std::to_string(s.sample_id);
          std::string why;
          if (auto it = explain_errors.find(key); it != explain_errors.end()) {
            why = "explainer failed: " + it->second;
          } else {
            try {
              maps[e] = load_heatmap(explain_dir / heatmap_stem(spec.name, seed, e, s.sample_id));
              runnable.push_back(e);
              continue;
            } catch (const std::exception& ex) {
              why = std::string("heatmap unavailable: ") + ex.what();
            }
          }
          for (const auto& fill : settings.fills) {
            AuditRecord r;
            r.run_seed = seed;
            r.model = spec.name;
            r.sample_id = s.sample_id;
            r.true_class = s.label;
            r.explainer = e;
            r.fill = fill.name();
            r.error = why;
            failed.records.push_back(std::move(r));
          }
        }
        auto res = audit_sample(lm.model.get(), lm.predict, spec.name, seed, s, runnable, settings, &maps);
        // Keep configured explainer order.
        for (const auto& e : explainers) {
          for (auto& r : res.records)
            if (r.explainer == e) results[i].records.push_back(std::move(r));
          for (auto& r : failed.records)
            if (r.explainer == e) results[i].records.push_back(std::move(r));
        }
        results[i].curves = std::move(res.curves);
      });
      for (auto& r : results) {
        records.insert(records.end(), std::make_move_iterator(r.records.begin()),
                       std::make_move_iterator(r.records.end()));
        curves.insert(curves.end(), std::make_move_iterator(r.curves.begin()),
                      std::make_move_iterator(r.curves.end()));
      }
      log_line(options, "audit: " + spec.name + " seed " + std::to_string(seed) + " done");
    }

  std::size_t failures = 0;
  for (const auto& r : records) failures += !r.ok();
  write_records_jsonl(dir / "records.jsonl", records);
  write_records_csv(dir / "records.csv", records, config.metrics.topk_percents);
  write_curves_csv(dir / "curves.csv", curves);
  mark_done(dir);
  log_line(options, "audit: " + std::to_string(records.size()) + " rows (" +
                        std::to_string(failures) + " failed) -> " + dir.string());
  return {dir, failures};
}

StageResult run_report(const AuditConfig& config, const RunOptions& options) {
  const auto audit_dir = require_stage(config, Stage::audit);
  const auto dir = stage_dir(config, Stage::report);
  write_stage_config(dir, config, Stage::report);
  const auto records = read_records_jsonl(audit_dir / "records.jsonl");
  const auto curves = read_curves_csv(audit_dir / "curves.csv");
  write_report(dir, records, curves, config.bootstrap_resamples, config.bootstrap_seed);
  mark_done(dir);
  std::size_t failures = 0;
  for (const auto& r : records) failures += !r.ok();
  log_line(options, "report -> " + dir.string());
  return {dir, failures};
}

}  // namespace faudit
