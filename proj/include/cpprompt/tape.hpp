#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "cpprompt/tensor.hpp"

namespace cpprompt {

/// Ordered record of the differentiable operations executed in a forward pass.
///
/// Ops only record themselves when at least one operand requires a gradient,
/// so a pass over frozen tensors leaves the tape empty. backward() replays the
/// entries in exact reverse order.
class Tape {
 public:
  struct Entry {
    Tensor output;
    std::function<void(std::span<const double> out_grad)> backward;
  };

  void record(Tensor output, std::function<void(std::span<const double>)> backward) {
    entries_.push_back(Entry{std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor that
  /// requires a gradient. The tape is consumed.
  void backward(Tensor loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw UsageError("backward needs a scalar loss, got shape " +
                       (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
    }
    if (!loss.requires_grad()) {
      throw UsageError("backward on a loss that does not depend on any trainable tensor");
    }
    loss.grad_mut()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output.has_grad()) continue;  // did not contribute to the loss
      it->backward(it->output.grad());
    }
    // Intermediate gradients die with the entries; leaves keep theirs.
    entries_.clear();
  }

 private:
  std::vector<Entry> entries_;
};

/// Free-function form used throughout the library.
inline void backward(Tensor loss, Tape& tape) { tape.backward(std::move(loss)); }

}  // namespace cpprompt
