#include "mdbank/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "mdbank/checkpoint.hpp"
#include "mdbank/run_manifest.hpp"

namespace mdbank {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void add_scaled(Tensor& dst, const Tensor& src, double scale) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

void scale(Tensor& t, double s) {
  for (auto& v : t.values()) v *= s;
}

void sgd_step(ParamStore& params, const ParamStore& grads, ParamStore& velocity, const TrainConfig& c, double lr) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  const double clip = (c.grad_clip > 0 && norm > c.grad_clip) ? c.grad_clip / norm : 1.0;
  for (auto& [name, w] : params) {
    const Tensor& g = grads.get(name);
    Tensor& v = velocity.get(name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = c.momentum * v[i] + (clip * g[i] + c.weight_decay * w[i]);
      w[i] -= lr * v[i];
    }
  }
}

void check_finite(double v, const char* component) {
  if (!std::isfinite(v)) throw TrainError(std::string("non-finite loss component: ") + component);
}

}  // namespace

double learning_rate(const TrainConfig& c, int step) {
  return (c.lr_decay_step > 0 && step >= c.lr_decay_step) ? c.lr * c.lr_decay_factor : c.lr;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::faster_only: return "faster_only";
    case Variant::mt_ins: return "mt_ins";
    case Variant::mdbank_h: return "mdbank_h";
    case Variant::mdbank: return "mdbank";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "faster_only") return Variant::faster_only;
  if (s == "mt_ins") return Variant::mt_ins;
  if (s == "mdbank_h") return Variant::mdbank_h;
  if (s == "mdbank") return Variant::mdbank;
  throw TrainError("unknown variant: " + s);
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"eta", c.eta},
       {"lambda", c.lambda},
       {"gamma", c.gamma},
       {"alpha", c.alpha},
       {"k_top_target", c.k_top_target},
       {"gate", c.gate ? json(to_string(*c.gate)) : json(nullptr)},
       {"variant", to_string(c.variant)},
       {"steps", c.steps},
       {"lr", c.lr},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"lr_decay_step", c.lr_decay_step},
       {"lr_decay_factor", c.lr_decay_factor},
       {"grad_clip", c.grad_clip},
       {"seed", c.seed},
       {"burnin_steps", c.burnin_steps},
       {"grl_coeff", c.grl_coeff},
       {"grl_ramp", c.grl_ramp},
       {"unit_entropy", c.unit_entropy},
       {"deterministic", c.deterministic},
       {"checkpoint_every", c.checkpoint_every},
       {"bank_hidden", c.bank_hidden},
       {"detector", c.detector}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.eta = j.value("eta", d.eta);
  c.lambda = j.value("lambda", d.lambda);
  c.gamma = j.value("gamma", d.gamma);
  c.alpha = j.value("alpha", d.alpha);
  c.k_top_target = j.value("k_top_target", d.k_top_target);
  c.gate.reset();
  if (j.contains("gate") && !j.at("gate").is_null()) c.gate = gate_from_string(j.at("gate").get<std::string>());
  c.variant = variant_from_string(j.value("variant", to_string(d.variant)));
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.lr_decay_step = j.value("lr_decay_step", d.lr_decay_step);
  c.lr_decay_factor = j.value("lr_decay_factor", d.lr_decay_factor);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.seed = j.value("seed", d.seed);
  c.burnin_steps = j.value("burnin_steps", d.burnin_steps);
  c.grl_coeff = j.value("grl_coeff", d.grl_coeff);
  c.grl_ramp = j.value("grl_ramp", d.grl_ramp);
  c.unit_entropy = j.value("unit_entropy", d.unit_entropy);
  c.deterministic = j.value("deterministic", d.deterministic);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.bank_hidden = j.value("bank_hidden", d.bank_hidden);
  c.detector = j.contains("detector") ? j.at("detector").get<DetectorConfig>() : d.detector;
}

void validate(const TrainConfig& c) {
  if (!(c.eta >= 0)) throw TrainError("eta must be >= 0");
  if (!(c.lambda >= 0)) throw TrainError("lambda must be >= 0");
  if (!(c.gamma > 0)) throw TrainError("gamma must be > 0");
  if (!(c.alpha >= 0 && c.alpha < 1)) throw TrainError("alpha must lie in [0,1)");
  if (c.k_top_target < 1) throw TrainError("k_top_target must be >= 1");
  if (c.steps < 0 || c.burnin_steps < 0) throw TrainError("steps and burnin_steps must be >= 0");
  if (!(c.lr > 0)) throw TrainError("lr must be > 0");
  if (c.lr_decay_step < 0) throw TrainError("lr_decay_step must be >= 0");
  if (!(c.lr_decay_factor > 0)) throw TrainError("lr_decay_factor must be > 0");
  if (!(c.grl_coeff >= 0)) throw TrainError("grl_coeff must be >= 0");
  if (c.variant == Variant::mdbank_h && c.gate == GateKind::soft) {
    throw TrainError("variant mdbank_h uses hard gates; gate=G2 contradicts it");
  }
  if (c.gate == GateKind::agnostic && c.variant != Variant::mt_ins) {
    throw TrainError("the agnostic gate belongs to the mt_ins variant");
  }
}

ActiveComponents variant_wiring(Variant v, int num_classes, std::optional<GateKind> configured_gate) {
  ActiveComponents a;
  switch (v) {
    case Variant::faster_only:
      break;
    case Variant::mt_ins:
      a = {true, false, true, 1, GateKind::agnostic, true};
      break;
    case Variant::mdbank_h:
      a = {true, false, true, num_classes + 1, GateKind::hard, true};
      break;
    case Variant::mdbank:
      a = {true, true, true, num_classes + 1, configured_gate.value_or(GateKind::soft), true};
      break;
  }
  return a;
}

void to_json(json& j, const StepMetrics& m) {
  j = {{"step", m.step},   {"l_det", m.l_det},     {"l_mt", m.l_mt},
       {"l_adv", m.l_adv}, {"l_total", m.l_total}, {"domain_acc", m.domain_acc}};
}

void from_json(const json& j, StepMetrics& m) {
  m.step = j.at("step").get<int>();
  m.l_det = j.at("l_det").get<double>();
  m.l_mt = j.at("l_mt").get<double>();
  m.l_adv = j.at("l_adv").get<double>();
  m.l_total = j.at("l_total").get<double>();
  m.domain_acc = j.at("domain_acc").get<double>();
}

Trainer::Trainer(TrainConfig config)
    : config_((validate(config), std::move(config))),
      wiring_(variant_wiring(config_.variant, config_.detector.num_classes, config_.gate)),
      detector_(config_.detector),
      bank_(BankConfig{std::max(1, wiring_.bank_classifiers), config_.detector.pooled_dim(), config_.bank_hidden}) {}

TrainState Trainer::init_state() const {
  TrainState s;
  s.student = detector_.init_params(config_.seed);
  if (wiring_.bank) s.bank = bank_.init_params(config_.seed);
  s.teacher = make_teacher(s.student, config_.alpha);
  s.student_velocity = s.student.zeros_like();
  s.bank_velocity = s.bank.zeros_like();
  s.source_rng = Rng(derive_seed(config_.seed, "source-sampling"));
  s.target_rng = Rng(derive_seed(config_.seed, "target-sampling"));
  return s;
}

bool Trainer::adaptation_active(int step) const {
  return wiring_.uses_target && step >= config_.burnin_steps && config_.eta > 0;
}

double Trainer::grl_coefficient(int step) const {
  if (!config_.grl_ramp) return config_.grl_coeff;
  const int span = std::max(1, config_.steps - config_.burnin_steps);
  const double p = std::clamp(static_cast<double>(step - config_.burnin_steps) / span, 0.0, 1.0);
  return config_.grl_coeff * (2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0);
}

StepMetrics Trainer::train_step(TrainState& state, const synth::ImageSample& source,
                                const synth::ImageSample* target) const {
  if (!source.annotations) throw TrainError("source sample " + source.sample_id + " has no annotations");
  const auto& gt = *source.annotations;
  const Detector& det = detector_;
  const ParamStore& student = state.student;
  StepMetrics m;
  m.step = state.step;

  ParamStore grads = student.zeros_like();
  ParamStore bank_grads = state.bank.zeros_like();

  // Supervised source branch.
  BackboneTrace source_trace;
  const FeatureMap source_features = det.backbone_forward(student, source.pixels, source_trace);
  RpnTrace rpn_trace;
  const RpnOutput rpn_out = det.rpn_forward(student, source_features, rpn_trace);
  const auto anchors = det.anchors(source_features.height(), source_features.width());
  const AnchorTargets anchor_targets = det.assign_anchor_targets(anchors, gt, state.source_rng);
  const RegionBatch proposals = det.proposals_from(rpn_out, source_features, config_.detector.train_proposals);
  const RoiTargets rois = det.sample_rois(proposals.boxes, gt, state.source_rng);
  const Tensor source_pooled = det.pool_region_features(source_features, rois.rois);
  HeadTrace source_head_trace;
  const HeadOutput source_head = det.head_forward(student, source_pooled, source_head_trace);
  DetectionLoss det_loss;
  try {
    det_loss = detection_loss(rpn_out, anchor_targets, source_head, rois);
  } catch (const DetectorError& e) {
    throw TrainError(std::string("l_det: ") + e.what());
  }
  m.l_det = det_loss.total();
  Tensor grad_source_pooled =
      det.head_backward(student, source_head_trace, det_loss.grad_class_logits, det_loss.grad_box_deltas, grads);

  const bool adapt = adaptation_active(state.step);
  if (adapt) {
    if (target == nullptr) throw TrainError("adaptation step without a target sample");
    const double eta = config_.eta, lam = config_.lambda;
    const PseudoBatch pseudo = teacher_pseudo_labels(det, state.teacher, target->pixels, config_.k_top_target);
    const synth::ImageSample augmented = synth::augment_photometric(*target, state.target_rng);
    BackboneTrace target_trace;
    const FeatureMap target_features = det.backbone_forward(student, augmented.pixels, target_trace);
    const Tensor target_pooled = det.pool_region_features(target_features, pseudo.proposals);
    HeadTrace target_head_trace;
    const HeadOutput target_head = det.head_forward(student, target_pooled, target_head_trace);
    Tensor grad_target_pooled(target_pooled.shape());
    Tensor weights(pseudo.teacher_probs.shape(), 1.0);

    if (wiring_.bank) {
      const int k = bank_.config().num_classifiers;
      const Tensor source_gates = label_gate_matrix(wiring_.gate, rois.labels, k);
      const Tensor target_gates = gate_matrix(wiring_.gate, pseudo.teacher_probs, config_.gamma, k);
      const GradientReversal grl{grl_coefficient(state.step)};
      const BankLoss bank_loss =
          bank_.loss(state.bank, source_pooled, source_gates, target_pooled, target_gates, grl);
      m.l_adv = bank_loss.value;
      m.domain_acc = bank_loss.accuracy;
      check_finite(m.l_adv, "l_adv");
      bank_grads.add_scaled(bank_loss.grad_params, eta * lam);
      add_scaled(grad_source_pooled, bank_loss.grad_source_features, eta * lam);
      add_scaled(grad_target_pooled, bank_loss.grad_target_features, eta * lam);
      if (wiring_.entropy_weighting && !config_.unit_entropy) weights = entropy_weights(bank_loss.target_scores);
    }
    if (wiring_.consistency) {
      const ConsistencyLoss mt = consistency_loss(pseudo.teacher_probs, pseudo.teacher_deltas, target_head.class_probs,
                                                  target_head.box_deltas, weights);
      m.l_mt = mt.value;
      check_finite(m.l_mt, "l_mt");
      Tensor grad_logits = softmax_backward(target_head.class_probs, mt.grad_student_probs);
      Tensor grad_deltas = mt.grad_student_deltas;
      scale(grad_logits, eta);
      scale(grad_deltas, eta);
      add_scaled(grad_target_pooled,
                 det.head_backward(student, target_head_trace, grad_logits, grad_deltas, grads), 1.0);
    }
    Tensor grad_target_features(target_features.data.shape());
    det.pool_backward(target_features, pseudo.proposals, grad_target_pooled, grad_target_features);
    det.backbone_backward(student, target_trace, grad_target_features, grads);
  }

  Tensor grad_source_features(source_features.data.shape());
  det.pool_backward(source_features, rois.rois, grad_source_pooled, grad_source_features);
  det.rpn_backward(student, source_features, rpn_trace, det_loss.grad_objectness_logits, det_loss.grad_rpn_deltas,
                   grads, grad_source_features);
  det.backbone_backward(student, source_trace, grad_source_features, grads);

  m.l_total = m.l_det + config_.eta * (m.l_mt + config_.lambda * m.l_adv);
  check_finite(m.l_total, "l_total");

  const double lr = learning_rate(config_, state.step);
  sgd_step(state.student, grads, state.student_velocity, config_, lr);
  // The bank has no objective outside adaptation; leave it (and its decay) untouched.
  if (adapt && state.bank.size() > 0) sgd_step(state.bank, bank_grads, state.bank_velocity, config_, lr);
  ema_update(state.teacher, state.student);
  ++state.step;
  return m;
}

json checkpoint_config(const TrainConfig& config, const std::string& role) {
  return {{"role", role},
          {"num_classes", config.detector.num_classes},
          {"detector", config.detector},
          {"train", config}};
}

fs::path fit(const TrainConfig& config, const FitOptions& options) {
  validate(config);
  const synth::DatasetManifest manifest = [&] {
    try {
      return synth::load_manifest(options.dataset_root);
    } catch (const std::exception& e) {
      throw TrainError(std::string("dataset manifest: ") + e.what());
    }
  }();
  if (manifest.num_classes != config.detector.num_classes) {
    throw TrainError("dataset has " + std::to_string(manifest.num_classes) + " classes, config expects " +
                     std::to_string(config.detector.num_classes));
  }
  Trainer trainer(config);
  const auto load = [&](const char* split) {
    try {
      return synth::load_split(options.dataset_root, split);
    } catch (const std::exception& e) {
      throw TrainError(std::string("missing or unreadable split '") + split + "': " + e.what());
    }
  };
  const auto source = load(synth::kSourceSplit);
  const auto target = trainer.wiring().uses_target ? load(synth::kTargetSplit) : std::vector<synth::ImageSample>{};
  if (source.empty()) throw TrainError("source split is empty");
  if (trainer.wiring().uses_target && target.empty()) throw TrainError("target split is empty");

  const fs::path run_dir = options.run_dir;
  fs::create_directories(run_dir / "checkpoints");
  write_file_atomic(run_dir / "config_echo.json", json(config).dump(2) + "\n");
  RunManifest run_manifest{options.command, json(config), dataset_fingerprint(options.dataset_root), kCodeVersion,
                           utc_timestamp(), ""};
  write_file_atomic(run_dir / "run_manifest.json", json(run_manifest).dump(2) + "\n");

  const auto epoch_order = [](std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  };
  const std::uint64_t source_seed = derive_seed(config.seed, "source-order");
  const std::uint64_t target_seed = derive_seed(config.seed, "target-order");

  TrainState state = trainer.init_state();
  std::ofstream metrics(run_dir / "metrics.jsonl", std::ios::trunc);
  std::vector<int> source_order, target_order;
  for (int step = 0; step < config.steps; ++step) {
    const int ns = static_cast<int>(source.size());
    if (step % ns == 0) source_order = epoch_order(source.size(), source_seed, step / ns);
    const synth::ImageSample* tgt = nullptr;
    if (!target.empty()) {
      const int nt = static_cast<int>(target.size());
      if (step % nt == 0) target_order = epoch_order(target.size(), target_seed, step / nt);
      tgt = &target[target_order[step % nt]];
    }
    const StepMetrics m = trainer.train_step(state, source[source_order[step % ns]], tgt);
    metrics << json(m).dump() << '\n';
    if (options.on_step) options.on_step(m);
    if (!options.quiet && (step % 100 == 0 || step + 1 == config.steps)) {
      spdlog::info("[{} seed {}] step {}/{} l_det {:.4f} l_mt {:.4f} l_adv {:.4f} acc {:.3f}", to_string(config.variant),
                   config.seed, step, config.steps, m.l_det, m.l_mt, m.l_adv, m.domain_acc);
    }
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps) {
      ParamStore snapshot = state.student;
      snapshot.merge(state.bank, "dcbank/");
      save_checkpoint(run_dir / "checkpoints" / ("step_" + std::to_string(step + 1) + ".ckpt"), snapshot,
                      checkpoint_config(config, "student"));
    }
  }
  metrics.close();

  ParamStore student = state.student;
  student.merge(state.bank, "dcbank/");
  save_checkpoint(run_dir / "checkpoints" / "student_final.ckpt", student, checkpoint_config(config, "student"));
  save_checkpoint(run_dir / "checkpoints" / "teacher_final.ckpt", state.teacher.params,
                  checkpoint_config(config, "teacher"));
  run_manifest.finished_at = utc_timestamp();
  write_file_atomic(run_dir / "run_manifest.json", json(run_manifest).dump(2) + "\n");
  return run_dir;
}

}  // namespace mdbank
