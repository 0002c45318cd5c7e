#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "faudit/audit.hpp"
#include "faudit/stats.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace faudit;
using nlohmann::json;
using faudit::test::TempDir;
namespace fs = std::filesystem;

namespace {

/// A pipeline small enough to run in a few seconds: two tiny models, two
/// samples per class, one epoch.
json tiny_config(const fs::path& out) {
  return json{
      {"output_dir", out.string()},
      {"seeds", {0, 1}},
      {"dataset", {{"seed", 7}, {"train_per_class", 6}, {"val_per_class", 2}, {"test_per_class", 2}}},
      {"train", {{"epochs", 1}, {"batch_size", 8}, {"lr", 0.003}}},
      {"models",
       {{{"name", "cnn"}, {"arch", "cnn"}, {"conv1_channels", 4}, {"conv2_channels", 8}},
        {{"name", "vit"}, {"arch", "vit"}, {"embed_dim", 16}, {"depth", 2}, {"heads", 2},
         {"mlp_hidden", 16}, {"patch", 8}}}},
      {"explainers", {"gradcam", "rollout", "rise", "random"}},
      {"fills", {"zero", "blur:2"}},
      {"metrics", {{"stability_k", 2}}},
      {"rise", {{"n_masks", 20}}},
      {"audit", {{"samples_per_class", 2}}},
      {"report", {{"bootstrap_resamples", 200}}}};
}

AuditConfig parse(const json& j) { return AuditConfig::from_json(j.dump()); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void run_all(const AuditConfig& c, std::size_t jobs = 1) {
  RunOptions o;
  o.jobs = jobs;
  run_generate(c, o);
  run_train(c, o);
  run_explain(c, o);
  run_audit(c, o);
  run_report(c, o);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FAUDIT_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

WaferSample ring_sample() {
  DatasetSpec spec;
  spec.seed = 3;
  spec.counts[static_cast<std::size_t>(WaferClass::ring)] = {1, 0, 0};
  return generate(spec).front();
}

}  // namespace

// ---- configuration ----

TEST(Config, DefaultsAndRoundTrip) {
  TempDir dir("cfg");
  const auto c = parse(tiny_config(dir.path()));
  EXPECT_EQ(c.models.size(), 2u);
  EXPECT_EQ(c.fills.size(), 2u);
  EXPECT_EQ(c.explainers_for_model(c.models[0]), (std::vector<std::string>{"gradcam", "rise", "random"}));
  EXPECT_EQ(c.explainers_for_model(c.models[1]), (std::vector<std::string>{"rollout", "rise", "random"}));
  const auto again = AuditConfig::from_json(c.resolved_json());
  EXPECT_EQ(again.resolved_json(), c.resolved_json());
  for (auto s : {Stage::generate, Stage::train, Stage::explain, Stage::audit, Stage::report})
    EXPECT_EQ(stage_hash(again, s), stage_hash(c, s));
}

TEST(Config, InvalidConfigsRaiseConfigError) {
  TempDir dir("cfg_bad");
  const auto base = tiny_config(dir.path());
  EXPECT_THROW(AuditConfig::from_json("{not json"), ConfigError);
  EXPECT_THROW(AuditConfig::load(dir.path() / "missing.json"), ConfigError);
  auto mutate = [&](auto f) {
    json j = base;
    f(j);
    return j.dump();
  };
  const std::vector<std::string> bad = {
      mutate([](json& j) { j["surprise"] = 1; }),
      mutate([](json& j) { j["models"] = json::array(); }),
      mutate([](json& j) { j["models"][0]["arch"] = "mlp"; }),
      mutate([](json& j) { j["models"][1]["name"] = "cnn"; }),
      mutate([](json& j) { j["models"][0]["name"] = "has space"; }),
      mutate([](json& j) { j["models"][0]["explainers"] = {"rollout"}; }),
      mutate([](json& j) { j["explainers"] = {"lime"}; }),
      mutate([](json& j) { j["fills"] = {"paint"}; }),
      mutate([](json& j) { j["seeds"] = json::array(); }),
      mutate([](json& j) { j["dataset"]["noise_rate"] = 0.5; }),
      mutate([](json& j) { j["audit"]["samples_per_class"] = 3; }),
      mutate([](json& j) { j["rise"]["p"] = 0.0; }),
      mutate([](json& j) { j["metrics"]["topk"] = {0}; }),
      mutate([](json& j) { j["train"]["epochs"] = 0; }),
      mutate([](json& j) { j["seeds"] = "zero"; }),
  };
  for (const auto& text : bad) EXPECT_THROW(AuditConfig::from_json(text), ConfigError) << text;
}

TEST(Config, StageHashesChainDownstream) {
  TempDir dir("cfg_hash");
  const auto j = tiny_config(dir.path());
  const auto c = parse(j);
  auto rise = j;
  rise["rise"]["n_masks"] = 21;
  const auto c_rise = parse(rise);
  EXPECT_EQ(stage_hash(c, Stage::generate), stage_hash(c_rise, Stage::generate));
  EXPECT_EQ(stage_hash(c, Stage::train), stage_hash(c_rise, Stage::train));
  EXPECT_NE(stage_hash(c, Stage::explain), stage_hash(c_rise, Stage::explain));
  EXPECT_NE(stage_hash(c, Stage::report), stage_hash(c_rise, Stage::report));
  auto data = j;
  data["dataset"]["seed"] = 8;
  const auto c_data = parse(data);
  for (auto s : {Stage::generate, Stage::train, Stage::explain, Stage::audit, Stage::report})
    EXPECT_NE(stage_hash(c, s), stage_hash(c_data, s));
  EXPECT_NE(stage_dir(c, Stage::train), stage_dir(c_data, Stage::train));
}

// ---- records ----

TEST(Records, JsonRoundTripIsExact) {
  AuditRecord r;
  r.run_seed = 3;
  r.model = "cnn";
  r.sample_id = 12345678901234ULL;
  r.true_class = 4;
  r.predicted_class = 2;
  r.explainer = "rise";
  r.fill = "blur:2";
  r.del_auc = 0.1 + 0.2;
  r.ins_auc = 1.0 / 3.0;
  r.stability = -0.25;
  r.iou = 2e-17;
  r.spearman_defect = 0.7071067811865476;
  r.topk_drop = {{5, 0.125}, {20, -1e-3}};
  r.has_mask = false;
  r.has_stability = false;
  r.degenerate = true;
  r.annotations = {"degenerate heatmap", "ties"};
  const auto b = record_from_json(record_to_json(r));
  EXPECT_EQ(record_to_json(b), record_to_json(r));
  EXPECT_EQ(b.del_auc, r.del_auc);
  EXPECT_EQ(b.ins_auc, r.ins_auc);
  EXPECT_EQ(b.iou, r.iou);
  EXPECT_EQ(b.topk_drop, r.topk_drop);
  EXPECT_EQ(b.annotations, r.annotations);
  EXPECT_EQ(b.sample_id, r.sample_id);
  EXPECT_FALSE(b.has_mask);
  EXPECT_TRUE(b.degenerate);

  AuditRecord failed = r;
  failed.error = "adapter error: \"boom\"\n";
  EXPECT_EQ(record_from_json(record_to_json(failed)).error, failed.error);

  TempDir dir("records");
  write_records_jsonl(dir.path() / "r.jsonl", {r, failed});
  const auto back = read_records_jsonl(dir.path() / "r.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(record_to_json(back[1]), record_to_json(failed));
}

// ---- per-sample audit ----

TEST(AuditSample, MonotoneTransformKeepsRankMetrics) {
  ModelConfig mc;
  mc.init_seed = 4;
  auto model = make_model(mc);
  const auto sample = ring_sample();
  AuditSettings plain;
  plain.fills = {FillOperator::zero(), FillOperator::parse("blur:2")};
  plain.rise.n_masks = 30;
  plain.metrics.stability_k = 2;
  plain.stability_explainers = {"gradcam"};
  AuditSettings cubed = plain;
  cubed.heatmap_transform = [](double v) { return v * v * v; };
  const std::vector<std::string> ex = {"gradcam", "rise", "random"};
  const auto a = audit_sample(model.get(), predictor(*model), "cnn", 0, sample, ex, plain);
  const auto b = audit_sample(model.get(), predictor(*model), "cnn", 0, sample, ex, cubed);
  ASSERT_EQ(a.records.size(), 6u);
  ASSERT_EQ(b.records.size(), 6u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& x = a.records[i];
    const auto& y = b.records[i];
    ASSERT_TRUE(x.ok()) << x.error;
    EXPECT_EQ(x.del_auc, y.del_auc);
    EXPECT_EQ(x.ins_auc, y.ins_auc);
    EXPECT_EQ(x.iou, y.iou);
    EXPECT_EQ(x.spearman_defect, y.spearman_defect);
    EXPECT_EQ(x.topk_drop, y.topk_drop);
    EXPECT_EQ(x.has_stability, x.explainer == "gradcam");
  }
  // 2 directions x 21 points per record.
  EXPECT_EQ(a.curves.size(), 6u * 2u * 21u);
}

TEST(AuditSample, FailuresBecomeErrorRecords) {
  const auto sample = ring_sample();
  AuditSettings s;
  // Grad-CAM needs model internals; a black-box caller cannot supply them.
  PredictFn constant = [](const Tensor&) { return std::vector<double>(5, 0.2); };
  const auto out = audit_sample(nullptr, constant, "bb", 0, sample, {"gradcam", "random"}, s);
  ASSERT_EQ(out.records.size(), 2u);
  EXPECT_FALSE(out.records[0].ok());
  EXPECT_TRUE(out.records[1].ok());
  PredictFn throwing = [](const Tensor&) -> std::vector<double> { throw std::runtime_error("down"); };
  const auto dead = audit_sample(nullptr, throwing, "bb", 0, sample, {"random"}, s);
  ASSERT_EQ(dead.records.size(), 1u);
  EXPECT_NE(dead.records[0].error.find("down"), std::string::npos);
}

TEST(AuditSample, SeedsDependOnRunExplainerAndSample) {
  EXPECT_EQ(explainer_seed(0, "rise", 5), explainer_seed(0, "rise", 5));
  EXPECT_NE(explainer_seed(0, "rise", 5), explainer_seed(1, "rise", 5));
  EXPECT_NE(explainer_seed(0, "rise", 5), explainer_seed(0, "random", 5));
  EXPECT_NE(explainer_seed(0, "rise", 5), explainer_seed(0, "rise", 6));
  EXPECT_NE(stability_seed(0, 5), stability_seed(0, 6));
}

// ---- pipeline ----

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("pipeline");
    config_ = new AuditConfig(parse(tiny_config(dir_->path() / "a")));
    run_all(*config_);
  }
  static void TearDownTestSuite() {
    delete config_;
    delete dir_;
  }
  static TempDir* dir_;
  static AuditConfig* config_;
};
TempDir* Pipeline::dir_ = nullptr;
AuditConfig* Pipeline::config_ = nullptr;

TEST_F(Pipeline, RecordsCoverEveryCell) {
  const auto records = read_records_jsonl(stage_dir(*config_, Stage::audit) / "records.jsonl");
  // seeds x samples x (3 explainers per model x 2 models) x fills
  EXPECT_EQ(records.size(), 2u * 10u * 6u * 2u);
  std::set<std::tuple<std::uint64_t, std::string, std::uint64_t, std::string, std::string>> cells;
  for (const auto& r : records) {
    EXPECT_TRUE(r.ok()) << r.error;
    EXPECT_TRUE(cells.insert({r.run_seed, r.model, r.sample_id, r.explainer, r.fill}).second);
    EXPECT_GE(r.del_auc, 0.0);
    EXPECT_LE(r.del_auc, 1.0);
    EXPECT_EQ(r.correct, r.true_class == r.predicted_class);
  }
}

TEST_F(Pipeline, ReportIsCompleteAndConsistent) {
  const auto report_dir = stage_dir(*config_, Stage::report);
  for (const char* f : {"family_means.csv", "family_means_by_seed.csv", "per_class.csv", "cohens_d.csv",
                        "bootstrap_ci.csv", "commonly_correct.csv", "topk.csv", "exclude_none.csv",
                        "random_baseline.csv", "curves_mean.csv", "errors.csv", "report.json",
                        "summary.txt", "config.json"})
    EXPECT_TRUE(fs::exists(report_dir / f)) << f;
  const auto report = json::parse(slurp(report_dir / "report.json"));
  const auto records = read_records_jsonl(stage_dir(*config_, Stage::audit) / "records.jsonl");
  std::vector<double> a, b;
  for (const auto& r : records) {
    if (r.fill != "zero") continue;
    if (r.family() == "cnn/gradcam") a.push_back(r.del_auc);
    if (r.family() == "vit/rollout") b.push_back(r.del_auc);
  }
  bool found = false;
  for (const auto& row : report["cohens_d"]) {
    if (row["fill"] != "zero" || row["metric"] != "del_auc") continue;
    if (row["family_a"] != "cnn/gradcam" || row["family_b"] != "vit/rollout") continue;
    found = true;
    EXPECT_EQ(row["n_a"].get<std::size_t>(), a.size());
    EXPECT_NEAR(row["mean_a"].get<double>(), stats::mean(a), 1e-12);
    EXPECT_NEAR(row["cohens_d"].get<double>(), stats::cohens_d(a, b), 1e-12);
  }
  EXPECT_TRUE(found);
}

TEST_F(Pipeline, ReportIsIdempotent) {
  const auto dir = stage_dir(*config_, Stage::report);
  const auto before = slurp(dir / "report.json");
  const auto summary = slurp(dir / "summary.txt");
  run_report(*config_);
  EXPECT_EQ(slurp(dir / "report.json"), before);
  EXPECT_EQ(slurp(dir / "summary.txt"), summary);
}

TEST_F(Pipeline, RerunWithMoreJobsIsByteIdentical) {
  const auto other = parse(tiny_config(dir_->path() / "b"));
  run_all(other, 3);
  for (const char* f : {"records.jsonl", "records.csv", "curves.csv"})
    EXPECT_EQ(slurp(stage_dir(other, Stage::audit) / f), slurp(stage_dir(*config_, Stage::audit) / f))
        << f;
  EXPECT_EQ(slurp(stage_dir(other, Stage::report) / "report.json"),
            slurp(stage_dir(*config_, Stage::report) / "report.json"));
}

TEST(Stages, MissingPrerequisiteIsReported) {
  TempDir dir("missing");
  const auto c = parse(tiny_config(dir.path()));
  EXPECT_THROW(run_train(c), MissingArtifact);
  EXPECT_THROW(run_audit(c), MissingArtifact);
  EXPECT_THROW(run_report(c), MissingArtifact);
}

// ---- black-box models and the command line ----

namespace {

json black_box_config(const fs::path& out, const std::string& fault) {
  auto j = tiny_config(out);
  j["seeds"] = {0};
  std::vector<std::string> argv = {FAUD_TEST_ADAPTER, "--classes", "5"};
  if (!fault.empty()) argv.insert(argv.end(), {"--fault", fault});
  j["models"] = {{{"name", "remote"}, {"adapter", argv}}};
  return j;
}

}  // namespace

TEST(BlackBox, AdapterModelRunsForwardOnlyExplainers) {
  TempDir dir("bb_pipeline");
  const auto c = parse(black_box_config(dir.path(), ""));
  EXPECT_EQ(c.explainers_for_model(c.models[0]), (std::vector<std::string>{"rise", "random"}));
  run_generate(c);
  run_train(c);
  EXPECT_EQ(run_explain(c).failures, 0u);
  EXPECT_EQ(run_audit(c).failures, 0u);
  const auto records = read_records_jsonl(stage_dir(c, Stage::audit) / "records.jsonl");
  EXPECT_EQ(records.size(), 10u * 2u * 2u);
  for (const auto& r : records) {
    // A constant model never changes under perturbation.
    EXPECT_NEAR(r.del_auc, 0.2, 1e-12);
    EXPECT_NEAR(r.ins_auc, 0.2, 1e-12);
  }
}

TEST(BlackBox, ConfigRejectsInternalsAndMissingAdapters) {
  TempDir dir("bb_cfg");
  auto j = black_box_config(dir.path(), "");
  j["models"][0]["explainers"] = {"gradcam"};
  EXPECT_THROW(parse(j), ConfigError);
  j = black_box_config(dir.path(), "");
  j["models"][0]["adapter"] = {"/nonexistent/adapter"};
  const auto c = parse(j);
  run_generate(c);
  EXPECT_THROW(run_explain(c), ConfigError);
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  const auto cfg = dir.path() / "config.json";
  write_file(cfg, tiny_config("out").dump());
  const std::string flag = " --config " + cfg.string();
  EXPECT_EQ(run_cli("generate"), 2);
  EXPECT_EQ(run_cli("bogus" + flag), 2);
  EXPECT_EQ(run_cli("generate --config " + (dir.path() / "nope.json").string()), 2);
  EXPECT_EQ(run_cli("train" + flag), 1);
  EXPECT_EQ(run_cli("generate" + flag + " --jobs 0"), 2);
  EXPECT_EQ(run_cli("generate" + flag), 0);
  // output_dir is taken relative to the config file.
  EXPECT_TRUE(fs::exists(dir.path() / "out"));

  const auto bad = dir.path() / "bad.json";
  auto j = tiny_config("out");
  j["explainers"] = {"lime"};
  write_file(bad, j.dump());
  EXPECT_EQ(run_cli("generate --config " + bad.string()), 2);

  const auto faulty = dir.path() / "faulty.json";
  write_file(faulty, black_box_config("out_bb", "error").dump());
  const std::string ff = " --config " + faulty.string();
  EXPECT_EQ(run_cli("generate" + ff), 0);
  EXPECT_EQ(run_cli("train" + ff), 0);
  EXPECT_EQ(run_cli("explain" + ff), 3);
}
