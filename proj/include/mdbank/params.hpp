#pragma once

#include <map>
#include <string>
#include <vector>

#include "mdbank/rng.hpp"
#include "mdbank/tensor.hpp"

namespace mdbank {

/// Named collection of trainable arrays. Iteration order is the lexicographic
/// name order, which is stable across save/load.
class ParamStore {
 public:
  Tensor& add(const std::string& name, std::vector<int> shape);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.contains(name); }
  std::vector<std::string> names() const;
  std::size_t size() const { return tensors_.size(); }
  std::size_t total_elements() const;

  /// Same names and shapes, all zeros.
  ParamStore zeros_like() const;
  void zero();
  bool same_layout(const ParamStore& other) const;
  /// Adds `other` (which must share this layout) scaled by `scale`.
  void add_scaled(const ParamStore& other, double scale);
  /// Inserts every tensor of `other` under `prefix`.
  void merge(const ParamStore& other, const std::string& prefix = "");
  /// Tensors whose names start with `prefix`, with the prefix stripped.
  ParamStore extract(const std::string& prefix) const;

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

 private:
  std::map<std::string, Tensor> tensors_;
};

void init_he_normal(Tensor& t, int fan_in, Rng& rng);
void init_normal(Tensor& t, double stddev, Rng& rng);

}  // namespace mdbank
