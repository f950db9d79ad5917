#pragma once

// Capture/replay of one decode step.
//
// Capture runs a real decode step and records every resolved kernel with its
// bound buffers. Replay writes the token and position into the runner's fixed
// inputs and re-runs the recorded calls, with no table lookups or allocation.
// One plan serves every step of a request.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "edgert/errors.hpp"
#include "edgert/kv_manager.hpp"
#include "edgert/model.hpp"

namespace edgert {

class StepPlan {
 public:
  // Executes one decode step of `token` at slot.current_len() and records it.
  // The slot advances by one entry exactly as an eager step would.
  static StepPlan capture(ModelRunner& runner, KVSlot& slot, TokenId token) {
    if (!runner.table().frozen()) throw ValidationError("capture requires a frozen dispatch table");
    StepPlan plan;
    plan.runner_ = &runner;
    plan.slot_ = &slot;
    plan.geometry_ = slot.geometry();
    plan.keys_ = slot.raw_keys().data();
    plan.vocab_size_ = runner.arch().vocab_size;
    ForwardOptions opts;
    opts.recorder = &plan.steps_;
    auto view = slot.base_view();
    const auto out = runner.decode_step(view, token, opts);
    plan.capture_logits_.assign(out.logits.begin(), out.logits.end());
    return plan;
  }

  std::span<const float> replay(TokenId token, std::int64_t position, KVSlot& slot) const {
    if (&slot != slot_ || slot.geometry() != geometry_ || slot.raw_keys().data() != keys_)
      throw GeometryDrift("slot '" + slot.request_id() + "' does not match the geometry this plan was captured on");
    if (position != slot.current_len())
      throw RangeError("replay position " + std::to_string(position) + " != slot length " +
                       std::to_string(slot.current_len()));
    if (position + 1 > geometry_.capacity) throw CapacityError("KV slot full");
    if (token < 0 || token >= vocab_size_) throw RangeError("token id outside vocabulary");

    runner_->token_buffer()[0] = token;
    runner_->dynamic_inputs()->position = position;
    for (const auto& op : steps_) op.fn(op.args);
    auto view = slot.base_view();
    *view.length = position + 1;
    return {runner_->logits_buffer(), static_cast<std::size_t>(vocab_size_)};
  }

  std::size_t size() const { return steps_.size(); }
  const std::vector<RecordedOp>& ops() const { return steps_; }
  const KVSlot* slot() const { return slot_; }
  // Logits produced by the captured step itself.
  const std::vector<float>& capture_logits() const { return capture_logits_; }

 private:
  StepPlan() = default;

  std::vector<RecordedOp> steps_;
  ModelRunner* runner_ = nullptr;
  KVSlot* slot_ = nullptr;
  KVGeometry geometry_;
  const float* keys_ = nullptr;
  std::int64_t vocab_size_ = 0;
  std::vector<float> capture_logits_;
};

}  // namespace edgert
