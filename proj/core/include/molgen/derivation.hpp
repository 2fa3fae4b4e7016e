// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "molgen/attributes.hpp"
#include "molgen/grammar.hpp"

namespace molgen {

/// A leftmost derivation: the ordered rule ids that expand the root into an
/// all-terminal sequence.
struct Derivation {
  std::vector<int> rule_ids;
  std::string source;  // original SMILES when parsed from text
};

/// One in-flight leftmost derivation with all masking state.  The pending
/// tokens are kept as a stack (top = leftmost); emitted terminals accumulate
/// into the output string as they are reached.
class DerivationState {
 public:
  explicit DerivationState(const AttributeEngine& engine);

  bool complete() const { return pending_.empty(); }

  /// Leftmost nonterminal.  Undefined once complete().
  const ExtendedToken& cursor() const;

  /// Conjunction of applicability, numeral, cycle-size, and budget masks
  /// over the global rule list.  Throws MaskViolation (with a state dump)
  /// if no rule survives; the masking invariants make that unreachable.
  void combined_mask(std::vector<char>& out) const;
  std::vector<char> combined_mask() const;

  /// Applies one rule to the cursor.  Throws MaskViolation if the rule is
  /// forbidden by any mask component.
  void apply(int rule_id);

  int steps_used() const { return steps_used_; }
  int steps_left() const { return engine_->config().max_steps - steps_used_; }

  /// Extended terminal distance of the pending sequence.
  int sequence_td() const { return seq_td_; }

  const std::string& emitted() const { return emitted_; }
  const std::vector<int>& rule_history() const { return history_; }
  const NumeralCache& numerals() const { return cache_; }
  const AttributeEngine& engine() const { return *engine_; }

  /// Highest number of live tokens that ever shared one cycle id.
  int max_group_share() const { return max_group_share_; }

  std::string dump() const;

 private:
  void drain_terminals();
  void check_invariant() const;

  const AttributeEngine* engine_;
  std::vector<ExtendedToken> pending_;  // back() = leftmost
  std::string emitted_;
  NumeralCache cache_;
  std::vector<int> history_;
  std::unordered_map<std::int32_t, int> live_;  // cycle id -> live token count
  std::int32_t next_group_ = 0;
  int steps_used_ = 0;
  int seq_td_ = 0;
  int max_group_share_ = 0;
};

/// Outcome of re-running a recorded derivation through the masking engine.
struct ReplayResult {
  bool ok = false;
  std::size_t failed_step = 0;
  std::string message;
  std::string smiles;
  std::vector<std::vector<char>> masks;  // per step, when requested
};

/// Replays `rule_ids` from the root, checking every step against the
/// combined mask.  Mask inconsistency is reported, not thrown.
ReplayResult replay(const AttributeEngine& engine, std::span<const int> rule_ids,
                    bool collect_masks = false);

}  // namespace molgen
