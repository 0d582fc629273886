#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "mdbank/dcbank.hpp"
#include "mdbank/detector.hpp"
#include "mdbank/meanteacher.hpp"
#include "mdbank/synthdata.hpp"

namespace mdbank {

enum class Variant { faster_only, mt_ins, mdbank_h, mdbank };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double eta = 5.0;
  double lambda = 0.1;
  double gamma = 2.0;
  double alpha = 0.99;
  int k_top_target = kDefaultTargetProposals;
  std::optional<GateKind> gate;  // unset: G2 for mdbank, G1 for mdbank_h
  Variant variant = Variant::mdbank;
  int steps = 3000;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int lr_decay_step = 0;         // lr is multiplied by lr_decay_factor from this step on; 0 disables
  double lr_decay_factor = 0.1;
  double grad_clip = 10.0;  // global L2 norm per parameter group; <= 0 disables
  std::uint64_t seed = 1;
  int burnin_steps = 500;
  double grl_coeff = 1.0;
  bool grl_ramp = false;     // coeff * (2 / (1 + exp(-10 p)) - 1), p = post-burn-in progress
  bool unit_entropy = false; // force e_r = 1 regardless of variant
  bool deterministic = true;
  int checkpoint_every = 1000;
  int bank_hidden = 128;
  DetectorConfig detector;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
/// Step-decayed learning rate in effect at `step`.
double learning_rate(const TrainConfig& c, int step);
/// Throws TrainError on out-of-range values or contradictory variant settings.
void validate(const TrainConfig& c);

/// Which objective terms and bank layout a variant uses.
struct ActiveComponents {
  bool consistency = false;
  bool entropy_weighting = false;
  bool bank = false;
  int bank_classifiers = 0;
  GateKind gate = GateKind::hard;
  bool uses_target = false;
};

ActiveComponents variant_wiring(Variant v, int num_classes, std::optional<GateKind> configured_gate = std::nullopt);

struct StepMetrics {
  int step = 0;
  double l_det = 0;
  double l_mt = 0;
  double l_adv = 0;
  double l_total = 0;
  double domain_acc = 0;
};

void to_json(nlohmann::json& j, const StepMetrics& m);
void from_json(const nlohmann::json& j, StepMetrics& m);

struct TrainState {
  ParamStore student;
  ParamStore bank;
  TeacherState teacher;
  ParamStore student_velocity;
  ParamStore bank_velocity;
  Rng source_rng;
  Rng target_rng;
  int step = 0;
};

/// Fixed network pieces shared by every step of one run.
class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  const TrainConfig& config() const { return config_; }
  const Detector& detector() const { return detector_; }
  const DomainBank& bank() const { return bank_; }
  const ActiveComponents& wiring() const { return wiring_; }

  TrainState init_state() const;

  /// One optimizer step on student and bank followed by one EMA update.
  /// `target` may be null only while adaptation is inactive.
  StepMetrics train_step(TrainState& state, const synth::ImageSample& source,
                         const synth::ImageSample* target) const;

  /// True when the adaptation terms contribute at this step.
  bool adaptation_active(int step) const;

 private:
  double grl_coefficient(int step) const;

  TrainConfig config_;
  ActiveComponents wiring_;
  Detector detector_;
  DomainBank bank_;
};

struct FitOptions {
  std::filesystem::path dataset_root;
  std::filesystem::path run_dir;
  std::string command = "train";
  bool quiet = false;
  /// Called after every step (for progress reporting).
  std::function<void(const StepMetrics&)> on_step;
};

/// Full training run. Writes config_echo.json, metrics.jsonl, run_manifest.json
/// and checkpoints/{step_N,student_final,teacher_final}.ckpt under run_dir.
std::filesystem::path fit(const TrainConfig& config, const FitOptions& options);

/// Config echo stored inside checkpoints.
nlohmann::json checkpoint_config(const TrainConfig& config, const std::string& role);

}  // namespace mdbank
