// faudit: staged explanation-faithfulness audit.
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "faudit/audit.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitPartial = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explanation-faithfulness audit for wafer-map classifiers"};
  app.require_subcommand(1);

  std::string config_path;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;
  bool seed_given = false;

  const std::pair<const char*, faudit::Stage> stages[] = {
      {"generate", faudit::Stage::generate}, {"train", faudit::Stage::train},
      {"explain", faudit::Stage::explain},   {"audit", faudit::Stage::audit},
      {"report", faudit::Stage::report}};
  const char* help[] = {"Render the synthetic wafer dataset", "Train the reference models",
                        "Compute and store heatmaps for the evaluation subset",
                        "Score every heatmap and write per-sample records",
                        "Aggregate records into tables, plots and a summary"};
  for (std::size_t i = 0; i < 5; ++i) {
    auto* sub = app.add_subcommand(stages[i].first, help[i]);
    sub->add_option("--config", config_path, "Audit configuration (JSON)")->required();
    sub->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "Run only this training seed")
        ->each([&](const std::string&) { seed_given = true; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  faudit::Stage stage = faudit::Stage::generate;
  for (const auto& [name, s] : stages)
    if (app.got_subcommand(name)) stage = s;

  try {
    auto config = faudit::AuditConfig::load(config_path);
    if (seed_given) config.seeds = {seed};
    faudit::RunOptions options;
    options.jobs = jobs;
    faudit::StageResult result;
    switch (stage) {
      case faudit::Stage::generate: result = faudit::run_generate(config, options); break;
      case faudit::Stage::train: result = faudit::run_train(config, options); break;
      case faudit::Stage::explain: result = faudit::run_explain(config, options); break;
      case faudit::Stage::audit: result = faudit::run_audit(config, options); break;
      case faudit::Stage::report: result = faudit::run_report(config, options); break;
    }
    std::cout << result.dir.string() << '\n';
    if (result.failures > 0) {
      std::cerr << "faudit: " << result.failures << " failed rows\n";
      return kExitPartial;
    }
    return kExitOk;
  } catch (const faudit::ConfigError& e) {
    std::cerr << "faudit: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "faudit: " << e.what() << '\n';
    return kExitFailure;
  }
}
