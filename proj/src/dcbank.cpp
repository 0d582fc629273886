#include "mdbank/dcbank.hpp"

#include <algorithm>
#include <cmath>

#include "mdbank/kernels.hpp"

namespace mdbank {
namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

std::string prefix(int i) { return std::to_string(i) + "/"; }

}  // namespace

Tensor GradientReversal::backward(const Tensor& grad_output) const {
  Tensor g = grad_output;
  for (auto& v : g.values()) v *= -coeff;
  return g;
}

std::string to_string(GateKind g) {
  switch (g) {
    case GateKind::hard: return "G1";
    case GateKind::soft: return "G2";
    case GateKind::agnostic: return "agnostic";
  }
  return "?";
}

GateKind gate_from_string(const std::string& s) {
  if (s == "G1" || s == "g1" || s == "hard") return GateKind::hard;
  if (s == "G2" || s == "g2" || s == "soft") return GateKind::soft;
  if (s == "agnostic") return GateKind::agnostic;
  throw BankError("unknown gate: " + s);
}

std::vector<double> gate_g1(std::span<const double> p) {
  std::vector<double> out(p.size(), 0.0);
  if (p.empty()) return out;
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  out[best] = 1.0;
  return out;
}

std::vector<double> gate_g2(std::span<const double> p, double gamma) {
  if (!(gamma > 0)) throw BankError("gate gamma must be positive");
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = std::pow(p[i], gamma);
  return out;
}

double binary_entropy(double d) {
  double e = 0.0;
  if (d > 0) e -= d * std::log(d);
  if (d < 1) e -= (1 - d) * std::log1p(-d);
  return e;
}

Tensor entropy_weights(const Tensor& scores) {
  Tensor e(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) e[i] = binary_entropy(scores[i]);
  return e;
}

Tensor gate_matrix(GateKind kind, const Tensor& class_probs, double gamma, int num_classifiers) {
  const int n = class_probs.empty() ? 0 : class_probs.dim(0);
  Tensor g({n, num_classifiers});
  for (int r = 0; r < n; ++r) {
    if (kind == GateKind::agnostic) {
      for (int i = 0; i < num_classifiers; ++i) g.at(r, i) = 1.0;
      continue;
    }
    if (class_probs.dim(1) != num_classifiers) throw BankError("class probabilities do not match the bank size");
    const auto w = kind == GateKind::hard ? gate_g1(class_probs.row(r)) : gate_g2(class_probs.row(r), gamma);
    std::copy(w.begin(), w.end(), g.row(r).begin());
  }
  return g;
}

Tensor label_gate_matrix(GateKind kind, std::span<const int> labels, int num_classifiers) {
  const int n = static_cast<int>(labels.size());
  Tensor g({n, num_classifiers});
  for (int r = 0; r < n; ++r) {
    if (kind == GateKind::agnostic) {
      for (int i = 0; i < num_classifiers; ++i) g.at(r, i) = 1.0;
    } else {
      if (labels[r] < 0 || labels[r] >= num_classifiers) throw BankError("region label outside the bank");
      g.at(r, labels[r]) = 1.0;  // G1 and G2 agree on one-hot labels
    }
  }
  return g;
}

DomainBank::DomainBank(BankConfig config) : config_(config) {
  if (config_.num_classifiers < 1) throw BankError("bank needs at least one classifier");
}

ParamStore DomainBank::init_params(std::uint64_t seed) const {
  Rng rng(derive_seed(seed, "dcbank-init"));
  ParamStore p;
  for (int i = 0; i < config_.num_classifiers; ++i) {
    init_he_normal(p.add(prefix(i) + "fc1/weight", {config_.hidden, config_.input_dim}), config_.input_dim, rng);
    p.add(prefix(i) + "fc1/bias", {config_.hidden});
    init_normal(p.add(prefix(i) + "fc2/weight", {1, config_.hidden}), 0.01, rng);
    p.add(prefix(i) + "fc2/bias", {1});
  }
  return p;
}

void DomainBank::check_params(const ParamStore& params) const {
  if (!params.same_layout(init_params(0))) throw BankError("bank parameters do not match the bank configuration");
}

Tensor DomainBank::forward(const ParamStore& params, const Tensor& features, BankTrace& trace) const {
  const int n = features.empty() ? 0 : features.dim(0);
  if (n > 0 && features.dim(1) != config_.input_dim) throw BankError("feature width does not match the bank");
  const int k = config_.num_classifiers, h = config_.hidden;
  trace.input = features;
  trace.hidden.assign(k, Tensor({n, h}));
  Tensor logits({n, k});
  if (n == 0) return logits;
  Tensor z({n, 1});
  for (int i = 0; i < k; ++i) {
    const std::string p = prefix(i);
    Tensor& hid = trace.hidden[i];
    kernels::linear_forward(n, config_.input_dim, h, features.span(), params.get(p + "fc1/weight").span(),
                            params.get(p + "fc1/bias").span(), hid.span());
    for (auto& v : hid.values()) v = v > 0 ? v : 0.0;
    kernels::linear_forward(n, h, 1, hid.span(), params.get(p + "fc2/weight").span(), params.get(p + "fc2/bias").span(),
                            z.span());
    for (int r = 0; r < n; ++r) logits.at(r, i) = z[r];
  }
  return logits;
}

Tensor DomainBank::domain_scores(const ParamStore& params, const Tensor& features) const {
  BankTrace trace;
  Tensor s = forward(params, features, trace);
  for (auto& v : s.values()) v = sigmoid(v);
  return s;
}

Tensor DomainBank::backward(const ParamStore& params, const BankTrace& trace, const Tensor& grad_logits,
                            ParamStore& grads) const {
  const int n = trace.input.empty() ? 0 : trace.input.dim(0);
  const int k = config_.num_classifiers, h = config_.hidden;
  Tensor grad_input({n, config_.input_dim});
  if (n == 0) return grad_input;
  Tensor gz({n, 1}), gh({n, h}), gx({n, config_.input_dim});
  for (int i = 0; i < k; ++i) {
    bool active = false;
    for (int r = 0; r < n; ++r) {
      gz[r] = grad_logits.at(r, i);
      active |= gz[r] != 0.0;
    }
    if (!active) continue;
    const std::string p = prefix(i);
    const Tensor& hid = trace.hidden[i];
    kernels::linear_backward(n, h, 1, hid.span(), params.get(p + "fc2/weight").span(), gz.span(),
                             grads.get(p + "fc2/weight").span(), grads.get(p + "fc2/bias").span(), gh.span());
    for (std::size_t j = 0; j < gh.size(); ++j) {
      if (!(hid[j] > 0)) gh[j] = 0.0;
    }
    kernels::linear_backward(n, config_.input_dim, h, trace.input.span(), params.get(p + "fc1/weight").span(),
                             gh.span(), grads.get(p + "fc1/weight").span(), grads.get(p + "fc1/bias").span(), gx.span());
    for (std::size_t j = 0; j < gx.size(); ++j) grad_input[j] += gx[j];
  }
  return grad_input;
}

BankLoss DomainBank::loss(const ParamStore& params, const Tensor& source_features, const Tensor& source_gates,
                          const Tensor& target_features, const Tensor& target_gates,
                          const GradientReversal& grl) const {
  const int ns = source_features.empty() ? 0 : source_features.dim(0);
  const int nt = target_features.empty() ? 0 : target_features.dim(0);
  if (ns == 0 && nt == 0) throw BankError("bank loss needs source or target regions");
  const int k = config_.num_classifiers;
  BankLoss out;
  out.grad_params = params.zeros_like();
  int correct = 0;

  const auto side = [&](const Tensor& features, const Tensor& gates, double label, int n, double& term,
                        Tensor& scores, Tensor& grad_features) {
    grad_features = Tensor(features.shape());
    scores = Tensor({n, k});
    if (n == 0) return;
    BankTrace trace;
    const Tensor logits = forward(params, grl.forward(features), trace);
    Tensor grad_logits({n, k});
    const double inv = 1.0 / n;
    for (int r = 0; r < n; ++r) {
      int top = 0;
      for (int i = 0; i < k; ++i) {
        const double z = logits.at(r, i);
        const double s = sigmoid(z);
        scores.at(r, i) = s;
        const double g = gates.at(r, i);
        if (g > gates.at(r, top)) top = i;
        if (g == 0.0) continue;
        // BCE with domain label 1 (source) or 0 (target), from logits.
        term += inv * g * (label > 0.5 ? softplus(-z) : softplus(z));
        grad_logits.at(r, i) = inv * g * (s - label);
      }
      correct += ((scores.at(r, top) > 0.5) == (label > 0.5)) ? 1 : 0;
    }
    grad_features = grl.backward(backward(params, trace, grad_logits, out.grad_params));
  };

  side(source_features, source_gates, 1.0, ns, out.source_term, out.source_scores, out.grad_source_features);
  side(target_features, target_gates, 0.0, nt, out.target_term, out.target_scores, out.grad_target_features);
  out.value = out.source_term + out.target_term;
  out.accuracy = static_cast<double>(correct) / (ns + nt);
  if (!std::isfinite(out.value)) throw BankError("non-finite domain classifier bank loss");
  return out;
}

}  // namespace mdbank
