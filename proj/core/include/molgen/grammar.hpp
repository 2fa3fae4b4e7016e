// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace molgen {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Structural problems in a grammar file or a grammar that cannot support
/// generation (unproductive tokens, malformed rules, ...).
class GrammarError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

using TokenId = std::int32_t;

/// Terminal distances use a saturating "infinity"; any value at or above
/// kTdUnreachable means the token cannot be expanded to terminals.
inline constexpr int kTdUnreachable = std::numeric_limits<int>::max() / 4;

struct Token {
  std::string text;  // verbatim symbol; for terminals the emitted fragment
  bool is_terminal = false;
};

struct Rule {
  int id = -1;
  TokenId lhs = -1;
  std::vector<TokenId> rhs;  // never empty
  int delta_td = 0;          // sum TD(rhs) - TD(lhs), filled by the fixpoint
};

struct LoadReport {
  std::vector<std::string> warnings;  // e.g. deduplicated rules
};

/// An attributed context-free grammar over SMILES fragments.
///
/// The grammar is immutable once loaded and safe to share across threads.
/// Rule order equals file order and is the canonical ordering used for
/// policy logits and parser tie-breaking.
class Grammar {
 public:
  static Grammar load_file(const std::string& path, LoadReport* report = nullptr);
  static Grammar load_text(std::string_view text, LoadReport* report = nullptr);

  std::size_t token_count() const { return tokens_.size(); }
  std::size_t rule_count() const { return rules_.size(); }

  const Token& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<Token>& tokens() const { return tokens_; }
  std::optional<TokenId> find_token(std::string_view text) const;

  /// Root token: the left-hand side of the first rule.
  TokenId root() const { return root_; }

  const std::vector<Rule>& rules() const { return rules_; }
  const Rule& rule(int id) const { return rules_.at(static_cast<std::size_t>(id)); }

  /// Rule ids with the given left-hand side, in file order.  Throws for
  /// terminals and out-of-range ids.
  const std::vector<int>& rules_for(TokenId t) const;

  bool reachable(TokenId t) const { return reachable_.at(static_cast<std::size_t>(t)); }

  /// Minimum number of rule applications that expand `t` to all-terminals.
  int terminal_distance(TokenId t) const { return td_.at(static_cast<std::size_t>(t)); }
  const std::vector<int>& td_table() const { return td_; }

  /// Terminal distance of a token sequence: the sum over its tokens.
  int sequence_td(std::span<const TokenId> seq) const;

  /// Re-runs the fixpoint from scratch; the result must match the stored
  /// tables (idempotence).  Returns the number of sweeps used.
  int recompute_terminal_distances();

  /// Canonical text form: one `lhs -> rhs` line per rule, terminals quoted.
  /// Reloading the result yields an identical grammar.
  std::string to_text() const;

  /// FNV-1a hash of the canonical text; used to pair checkpoints with the
  /// grammar they were trained against.
  std::uint64_t fingerprint() const { return fingerprint_; }

 private:
  Grammar() = default;
  void finalize(LoadReport* report);
  int run_td_fixpoint(std::vector<int>& td, std::vector<int>& delta) const;

  std::vector<Token> tokens_;
  std::unordered_map<std::string, TokenId> by_text_;
  std::vector<Rule> rules_;
  std::vector<std::vector<int>> rules_by_lhs_;
  std::vector<char> reachable_;
  std::vector<int> td_;
  TokenId root_ = -1;
  std::uint64_t fingerprint_ = 0;
};

std::uint64_t fnv1a64(std::string_view data);

}  // namespace molgen
