// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string_view>
#include <utility>
#include <vector>

#include "mhaseg/autodiff/tensor.hpp"

namespace mhaseg::ad {

/// Ordered record of executed primitives and their backward rules.
///
/// Entries are appended in execution order, so every operation's inputs were produced
/// by earlier entries (or are leaves); `backward` replays the rules in reverse.
/// A tape constructed with `recording = false` records nothing and is used for inference.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }

  /// True when an op over these inputs must be recorded.
  template <typename... Ts>
  bool tracks(const Ts&... inputs) const {
    return recording_ && (inputs.requires_grad() || ...);
  }

  void record(std::string_view op, Tensor<T> output, std::function<void()> rule) {
    entries_.push_back(Entry{op, std::move(output), std::move(rule)});
  }

  std::size_t size() const { return entries_.size(); }
  std::string_view op_name(std::size_t i) const { return entries_.at(i).op; }

  /// Seeds d(root)/d(root) = 1 and propagates to every reachable requires_grad tensor.
  ///
  /// Intermediate gradients are reset on each call; leaf gradients accumulate across
  /// calls until the caller zeroes them.
  void backward(Tensor<T> root) {
    if (!root.defined() || root.size() != 1) {
      fail(ErrorCode::NotScalarRoot, "backward root must be a one-element tensor");
    }
    bool on_tape = false;
    for (auto& e : entries_) {
      e.output.clear_grad();
      on_tape = on_tape || e.output.same_storage(root);
    }
    if (!on_tape) fail(ErrorCode::NotScalarRoot, "backward root was not produced on this tape");
    root.grad()[0] = T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->rule();
    }
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::string_view op;
    Tensor<T> output;
    std::function<void()> rule;
  };
  bool recording_;
  std::vector<Entry> entries_;
};

}  // namespace mhaseg::ad
