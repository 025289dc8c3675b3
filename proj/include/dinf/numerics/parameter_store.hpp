#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dinf/numerics/tensor.hpp"

namespace dinf {

/// Named trainable tensors. Each entry carries its value, a gradient
/// accumulator and a momentum buffer of identical shape. Once sealed the
/// name set is frozen, which is how weight sharing across refinement
/// iterations is enforced: every iteration resolves the same names.
template <typename Scalar>
class ParameterStore {
 public:
  struct Entry {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    Tensor<Scalar> momentum;
  };

  void add(const std::string& name, Tensor<Scalar> value) {
    if (sealed_) throw std::logic_error("parameter store is sealed; cannot add '" + name + "'");
    if (entries_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    Tensor<Scalar> zeros(value.shape());
    entries_.emplace(name, Entry{std::move(value), zeros, zeros});
  }

  void seal() { sealed_ = true; }
  bool sealed() const { return sealed_; }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Entry& entry(const std::string& name) { return lookup(entries_, name); }
  const Entry& entry(const std::string& name) const { return lookup(entries_, name); }

  Tensor<Scalar>& value(const std::string& name) { return entry(name).value; }
  const Tensor<Scalar>& value(const std::string& name) const { return entry(name).value; }

  /// Sorted by name; iteration order is the deterministic reduction order.
  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& [name, e] : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, e] : entries_) e.grad.data().setZero();
  }

  /// Adds `other`'s gradients into this store, entry by entry in name order.
  void merge_gradients(const ParameterStore& other) {
    for (auto& [name, e] : entries_) e.grad.data() += other.entry(name).grad.data();
  }

 private:
  template <typename Map>
  static auto& lookup(Map& m, const std::string& name) {
    auto it = m.find(name);
    if (it == m.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
  bool sealed_ = false;
};

using ParameterStored = ParameterStore<double>;

}  // namespace dinf
