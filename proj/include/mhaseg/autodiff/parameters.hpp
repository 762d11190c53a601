// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mhaseg/autodiff/tensor.hpp"

namespace mhaseg::ad {

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

/// Insertion-ordered set of trainable tensors; each name may be registered once.
template <typename T>
class ParameterRegistry {
 public:
  Tensor<T>& add(std::string name, Tensor<T> tensor) {
    if (index_.count(name)) fail(ErrorCode::BadConfig, "parameter " + name + " registered twice");
    tensor.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(tensor)});
    return entries_.back().tensor;
  }

  Tensor<T>& at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) fail(ErrorCode::BadConfig, "no parameter named " + std::string(name));
    return entries_[it->second].tensor;
  }
  const Tensor<T>& at(std::string_view name) const { return const_cast<ParameterRegistry*>(this)->at(name); }
  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  std::vector<NamedParameter<T>>& entries() { return entries_; }
  const std::vector<NamedParameter<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<NamedParameter<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mhaseg::ad
