// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "molgen/derivation.hpp"
#include "molgen/grammar.hpp"

namespace molgen {

class TokenizeError : public Error {
 public:
  TokenizeError(std::string message, std::size_t position)
      : Error(std::move(message)), position(position) {}
  std::size_t position;
};

/// Greedy longest-match tokenization against the grammar's terminal set.
/// Throws TokenizeError at the first unmatchable character.
std::vector<TokenId> tokenize(const Grammar& g, std::string_view smiles);

enum class ParseStatus { parsed, tokenize_failed, not_representable };

struct ParseResult {
  ParseStatus status = ParseStatus::not_representable;
  Derivation derivation;
  std::size_t error_pos = 0;
  std::string message;

  bool ok() const { return status == ParseStatus::parsed; }
};

/// Parses a SMILES string into its canonical leftmost derivation: at every
/// choice point the lowest rule id wins, and within a rule each child takes
/// the shortest viable span, left to right.  Unparseable strings are a
/// normal outcome (the grammar covers only part of SMILES space).
ParseResult parse(const Grammar& g, std::string_view smiles);

/// True when the token sequence is derivable from the root (recognition
/// only, no derivation extraction).
bool recognizes(const Grammar& g, std::span<const TokenId> tokens);

/// Replays a derivation structurally (no masking) and concatenates the
/// terminal texts.  Throws GrammarError if the rules do not form a complete
/// leftmost derivation.
std::string render(const Grammar& g, const Derivation& d);

/// Heavy (non-hydrogen) atom count, from the token stream: one per atom
/// symbol, one per bracket group.
int atom_count_from_tokens(const Grammar& g, std::span<const TokenId> tokens);

struct IngestStats {
  std::size_t lines = 0;
  std::size_t parsed = 0;
  std::size_t tokenize_failed = 0;
  std::size_t not_representable = 0;
  long long total_rules = 0;
  long long total_atoms = 0;

  double rules_per_molecule() const {
    return parsed == 0 ? 0.0 : static_cast<double>(total_rules) / static_cast<double>(parsed);
  }
  double rules_per_atom() const {
    return total_atoms == 0 ? 0.0 : static_cast<double>(total_rules) / static_cast<double>(total_atoms);
  }
  std::string to_json() const;
};

/// Parses one SMILES per line (text after the first whitespace is ignored),
/// feeding parsed derivations to `sink`.  Per-line failures are counted,
/// not fatal.
IngestStats ingest_corpus(const Grammar& g, std::istream& in,
                          const std::function<void(Derivation&&)>& sink);
IngestStats ingest_corpus_file(const Grammar& g, const std::string& path,
                               const std::function<void(Derivation&&)>& sink);

}  // namespace molgen
