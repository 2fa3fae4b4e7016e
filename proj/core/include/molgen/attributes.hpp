// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "molgen/grammar.hpp"

namespace molgen {

/// Inconsistency between the grammar and its ring-attribute table.
class AttributeError : public Error {
 public:
  using Error::Error;
};

/// A rule application that the combined mask forbids, or a broken masking
/// invariant.  Carries a full state dump; this is the primary debugging
/// surface for attribute bugs.
class MaskViolation : public Error {
 public:
  using Error::Error;
};

/// All ring-closure numerals simultaneously open.  Unreachable under the
/// default limits; raised loudly because it indicates an attribute bug.
class NumeralExhaustion : public Error {
 public:
  using Error::Error;
};

struct MaskConfig {
  int max_ring_size = 8;
  int min_ring_size = 3;
  int max_steps = 277;

  void validate() const;
};

/// A grammar token plus the generation-time attributes attached to it:
/// the cycle it belongs to and how many atoms that cycle holds so far.
/// `ring_size` counts the atoms the cycle will contain if it is closed by
/// the next closing rule (see core/data/ring_table.txt).
struct ExtendedToken {
  TokenId token = -1;
  std::int32_t group = -1;     // cycle id; -1 when not on any cycle path
  std::int16_t ring_size = -1; // -1 when no ring size applies
};

enum class CycleClass : std::uint8_t { none, extends, closes };

struct RingTableEntry {
  int inherit = 0;
  int fresh_num = -1;   // initial size for the `num`/`cycle` receiver group
  int fresh_num1 = -1;  // initial size for the `num1` receiver group
};

/// Hand-audited per-rule ring-size increments, loaded from a data file that
/// ships next to the grammar.
class RingTable {
 public:
  static RingTable load_file(const std::string& path);
  static RingTable load_text(std::string_view text);

  const RingTableEntry* find(const std::string& rule_text) const;
  const std::map<std::string, RingTableEntry>& entries() const { return entries_; }

 private:
  std::map<std::string, RingTableEntry> entries_;
};

/// Canonical one-line form of a rule, matching the grammar file syntax.
std::string rule_text(const Grammar& g, const Rule& r);

/// Ring-closure numeral bookkeeping: which cycle ids have emitted their
/// first numeral, and which numerals are currently open.  A numeral can be
/// reused once its cycle closes.
struct NumeralCache {
  std::unordered_map<std::int32_t, std::string> open;  // cycle id -> numeral text
  std::set<std::string> in_use;
};

/// Precomputed attribute machinery for one grammar: cycle-id propagation,
/// numeral forcing, ring-size legality, and terminal distances over the
/// extended (token x ring size) space that the step budget needs.
///
/// Immutable after construction; safe for concurrent use by any number of
/// derivations.
class AttributeEngine {
 public:
  AttributeEngine(const Grammar& g, const RingTable& table, MaskConfig cfg = {});

  const Grammar& grammar() const { return *grammar_; }
  const MaskConfig& config() const { return cfg_; }

  bool receives_cycle(TokenId t) const { return receives_[static_cast<std::size_t>(t)]; }
  bool opens_ring(TokenId t) const { return opens_ring_[static_cast<std::size_t>(t)]; }
  bool is_numeral_token(TokenId t) const { return numeral_token_[static_cast<std::size_t>(t)]; }

  CycleClass cycle_class(int rule_id) const { return cycle_class_[static_cast<std::size_t>(rule_id)]; }
  int inherit_increment(int rule_id) const { return inherit_[static_cast<std::size_t>(rule_id)]; }

  /// Terminal distance of a token at a given ring size (-1 = unsized).
  int extended_td(TokenId t, int ring_size) const;

  /// Change in sequence terminal distance caused by applying `rule_id` to a
  /// left-hand side at `lhs_ring_size`; kTdUnreachable when the cycle-size
  /// filter forbids the instance.
  int extended_delta_td(int rule_id, int lhs_ring_size) const;

  /// Cycle-size legality of one rule instance.
  bool cycle_allows(int rule_id, int lhs_ring_size) const;

  /// Expands `parent` with `rule_id`, attaching cycle ids and ring sizes to
  /// the right-hand side.  Fresh cycle ids are drawn from `next_group`.
  std::vector<ExtendedToken> propagate(int rule_id, const ExtendedToken& parent,
                                       std::int32_t& next_group) const;

  /// Masks indexed like grammar().rules_for(tok.token).
  std::vector<char> cycle_size_mask(const ExtendedToken& tok) const;
  std::vector<char> budget_mask(int seq_td, int steps_left, const ExtendedToken& tok) const;
  std::vector<char> numeral_mask(const ExtendedToken& tok, const NumeralCache& cache) const;

  /// The single numeral rule the cache admits for `tok`.
  int forced_numeral_rule(const ExtendedToken& tok, const NumeralCache& cache) const;

  /// Numeral texts in allocation order (lowest first).
  const std::vector<std::string>& numeral_order(TokenId numeral_token) const;

 private:
  struct ChildAttr {
    std::int16_t ring_size = -1;  // -1 = unsized
    std::int8_t fresh_group = -1; // 0 = num group, 1 = num1 group, -1 = inherited/none
    bool receives = false;
  };

  std::vector<ChildAttr> child_attrs(int rule_id, int lhs_ring_size) const;
  int rs_index(int ring_size) const { return ring_size + 1; }
  void build_flags(const RingTable& table);
  void build_extended_td();
  void check_consistency() const;

  const Grammar* grammar_;
  MaskConfig cfg_;
  int rs_width_ = 0;  // max_ring_size + 2 (index 0 = unsized)

  std::vector<char> receives_;
  std::vector<char> is_num1_;
  std::vector<char> opens_ring_;
  std::vector<char> numeral_token_;
  std::vector<char> cycle_lhs_;

  std::vector<int> inherit_;
  std::vector<int> fresh_num_;
  std::vector<int> fresh_num1_;
  std::vector<CycleClass> cycle_class_;
  std::vector<std::vector<int>> receiver_positions_;  // per rule

  std::vector<std::vector<int>> td_ext_;     // [token][rs_index]
  std::vector<std::vector<int>> delta_ext_;  // [rule][rs_index]

  std::unordered_map<TokenId, std::vector<std::string>> numeral_order_;
};

}  // namespace molgen
