#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdbank/evaluation.hpp"
#include "mdbank/trainer.hpp"

namespace mdbank::exp {

class ExperimentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One training-plus-evaluation job.
struct RunSpec {
  std::string key;
  TrainConfig config;
  std::filesystem::path dataset_root;
  std::filesystem::path run_dir;
};

struct RunResult {
  std::string key;
  bool ok = false;
  std::string error;
  eval::EvalReport report;
};

using Launcher = std::function<RunResult(const RunSpec&)>;

/// Trains and evaluates inside the calling process. Used by tests.
Launcher in_process_launcher(eval::EvalOptions options = {});
/// Runs `executable train ...` and `executable eval ...` as child processes,
/// one pair per run, with output captured in run_dir/log.txt.
Launcher subprocess_launcher(std::filesystem::path executable);

/// Runs every spec with at most `workers` in flight; results come back in
/// spec order regardless of completion order.
std::vector<RunResult> run_all(const std::vector<RunSpec>& specs, const Launcher& launcher, int workers);

/// Key-value form of a TrainConfig as read by the CLI's --config option.
std::map<std::string, std::string> flat_config(const TrainConfig& config);
std::string render_flat_config(const TrainConfig& config);

struct AblateOptions {
  std::filesystem::path dataset_root;
  std::filesystem::path out_dir;
  std::vector<std::uint64_t> seeds;
  std::vector<Variant> variants;
  TrainConfig base;
  int workers = 1;
};

struct AblateRow {
  Variant variant = Variant::mdbank;
  int runs = 0;
  int failures = 0;
  double mean_map = 0;
  double spread = 0;  // sample standard deviation over successful seeds
  std::map<int, double> per_class_ap;  // mean over successful seeds
  std::map<std::uint64_t, double> seed_map;
};

struct AblateTable {
  std::vector<AblateRow> rows;
  std::vector<RunResult> cells;
};

void to_json(nlohmann::json& j, const AblateTable& t);
std::string render_table(const AblateTable& t);

AblateTable ablate(const AblateOptions& options, const Launcher& launcher);

enum class SweepParam { eta, lambda };
std::string to_string(SweepParam p);
SweepParam sweep_param_from_string(const std::string& s);

struct SweepOptions {
  std::filesystem::path dataset_root;
  std::filesystem::path out_dir;
  SweepParam param = SweepParam::eta;
  std::vector<double> values;
  TrainConfig base;  // variant and seed are taken from here
  int workers = 1;
};

struct SweepPoint {
  double value = 0;
  bool ok = false;
  double map = 0;
  std::string error;
};

struct SweepResult {
  SweepParam param = SweepParam::eta;
  Variant variant = Variant::mdbank;
  std::uint64_t seed = 0;
  std::vector<SweepPoint> points;
};

void to_json(nlohmann::json& j, const SweepResult& s);
void from_json(const nlohmann::json& j, SweepResult& s);

SweepResult sweep(const SweepOptions& options, const Launcher& launcher);

}  // namespace mdbank::exp
