#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdbank/params.hpp"
#include "mdbank/tensor.hpp"

namespace mdbank {

/// Identity on the forward pass; multiplies the upstream gradient by
/// -coeff on the way back.
struct GradientReversal {
  double coeff = 1.0;

  Tensor forward(const Tensor& x) const { return x; }
  Tensor backward(const Tensor& grad_output) const;
};

/// How region gate weights over the bank are formed.
enum class GateKind {
  hard,      // G1: one-hot at the argmax class
  soft,      // G2: elementwise p^gamma
  agnostic,  // single class-agnostic classifier, weight 1 for every region
};

std::string to_string(GateKind g);
GateKind gate_from_string(const std::string& s);

class BankError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One-hot at argmax(p); ties go to the lowest index.
std::vector<double> gate_g1(std::span<const double> p);
/// Elementwise p^gamma; gamma must be positive.
std::vector<double> gate_g2(std::span<const double> p, double gamma);

/// Binary entropy (natural log) of a domain score in (0,1).
double binary_entropy(double d);
/// Elementwise binary entropy of an N×K score matrix.
Tensor entropy_weights(const Tensor& scores);

struct BankConfig {
  int num_classifiers = 4;  // C+1 for the class-level bank, 1 for the agnostic variant
  int input_dim = 1024;
  int hidden = 128;
};

/// Per-region gate matrix (N×num_classifiers).
Tensor gate_matrix(GateKind kind, const Tensor& class_probs, double gamma, int num_classifiers);
/// Gates for labelled regions: G applied to one-hot labels.
Tensor label_gate_matrix(GateKind kind, std::span<const int> labels, int num_classifiers);

struct BankTrace {
  Tensor input;
  std::vector<Tensor> hidden;  // one N×hidden activation per classifier
};

struct BankLoss {
  double value = 0;         // L_D = source term + target term
  double source_term = 0;
  double target_term = 0;
  double accuracy = 0;      // fraction of regions whose top-gated classifier picks the right domain
  Tensor source_scores, target_scores;
  ParamStore grad_params;   // dL_D / d bank parameters
  Tensor grad_source_features;  // already passed back through the reversal layer
  Tensor grad_target_features;
};

/// Bank of independent binary domain classifiers over region features. The
/// i-th classifier owns the parameters "<i>/fc1/*" and "<i>/fc2/*".
class DomainBank {
 public:
  explicit DomainBank(BankConfig config = {});
  const BankConfig& config() const { return config_; }

  ParamStore init_params(std::uint64_t seed) const;
  void check_params(const ParamStore& params) const;

  /// Domain scores d (N×K), each in (0,1); 1 means "source".
  Tensor domain_scores(const ParamStore& params, const Tensor& features) const;
  Tensor forward(const ParamStore& params, const Tensor& features, BankTrace& trace) const;  // returns logits
  /// Accumulates parameter gradients; returns dL/dfeatures.
  Tensor backward(const ParamStore& params, const BankTrace& trace, const Tensor& grad_logits,
                  ParamStore& grads) const;

  /// Gate-weighted binary cross-entropy, features routed through `grl`.
  /// Source regions carry domain label 1 and target regions label 0.
  BankLoss loss(const ParamStore& params, const Tensor& source_features, const Tensor& source_gates,
                const Tensor& target_features, const Tensor& target_gates, const GradientReversal& grl) const;

 private:
  BankConfig config_;
};

}  // namespace mdbank
