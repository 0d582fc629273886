#include "mdbank/params.hpp"

#include <cmath>
#include <stdexcept>

namespace mdbank {

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor& ParamStore::add(const std::string& name, std::vector<int> shape) {
  auto [it, inserted] = tensors_.emplace(name, Tensor(std::move(shape)));
  if (!inserted) throw std::invalid_argument("duplicate parameter: " + name);
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  for (const auto& [name, t] : tensors_) out.add(name, t.shape());
  return out;
}

void ParamStore::zero() {
  for (auto& [_, t] : tensors_) t.fill(0.0);
}

bool ParamStore::same_layout(const ParamStore& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto a = tensors_.begin();
  auto b = other.tensors_.begin();
  for (; a != tensors_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
  }
  return true;
}

void ParamStore::add_scaled(const ParamStore& other, double scale) {
  for (auto& [name, t] : tensors_) {
    const Tensor& o = other.get(name);
    if (!t.same_shape(o)) throw std::invalid_argument("shape mismatch for " + name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += scale * o[i];
  }
}

void ParamStore::merge(const ParamStore& other, const std::string& prefix) {
  for (const auto& [name, t] : other.tensors_) add(prefix + name, t.shape()) = t;
}

ParamStore ParamStore::extract(const std::string& prefix) const {
  ParamStore out;
  for (const auto& [name, t] : tensors_) {
    if (name.starts_with(prefix)) out.add(name.substr(prefix.size()), t.shape()) = t;
  }
  return out;
}

void init_he_normal(Tensor& t, int fan_in, Rng& rng) {
  init_normal(t, std::sqrt(2.0 / fan_in), rng);
}

void init_normal(Tensor& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
}

}  // namespace mdbank
