// SPDX-License-Identifier: Apache-2.0

#include "molgen/parser.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace molgen {
namespace {

constexpr std::array<std::string_view, 12> kAtomSymbols = {
    "C", "N", "O", "S", "F", "Cl", "Br", "I", "c", "n", "o", "s"};

bool is_atom_symbol(std::string_view text) {
  return std::find(kAtomSymbols.begin(), kAtomSymbols.end(), text) != kAtomSymbols.end();
}

struct Tokenizer {
  explicit Tokenizer(const Grammar& g) {
    for (std::size_t t = 0; t < g.token_count(); ++t) {
      const Token& tok = g.token(static_cast<TokenId>(t));
      if (!tok.is_terminal) continue;
      by_text.emplace(tok.text, static_cast<TokenId>(t));
      max_len = std::max(max_len, tok.text.size());
    }
  }
  std::unordered_map<std::string, TokenId> by_text;
  std::size_t max_len = 0;
};

// Earley item: `dot` positions consumed of rule `rule`, starting at `origin`.
struct Item {
  int rule;
  int dot;
  int origin;
};

std::uint64_t item_key(const Item& it) {
  return (static_cast<std::uint64_t>(it.rule) << 44) |
         (static_cast<std::uint64_t>(it.dot) << 28) | static_cast<std::uint64_t>(it.origin);
}

std::uint64_t span_key(TokenId sym, int start, int end) {
  return (static_cast<std::uint64_t>(sym) << 40) | (static_cast<std::uint64_t>(start) << 20) |
         static_cast<std::uint64_t>(end);
}

// Earley recognizer; records every completed (symbol, start, end) span for
// the extraction pass.
class Chart {
 public:
  Chart(const Grammar& g, std::span<const TokenId> tokens) : g_(g), tokens_(tokens) {
    const std::size_t n = tokens.size();
    items_.resize(n + 1);
    seen_.resize(n + 1);
    waiting_.resize(n + 1);
    predicted_.resize(n + 1);

    for (int rid : g.rules_for(g.root())) add(0, {rid, 0, 0});
    for (std::size_t i = 0; i <= n; ++i) process(static_cast<int>(i));
  }

  bool has_span(TokenId sym, int start, int end) const {
    return spans_.count(span_key(sym, start, end)) != 0;
  }

  /// End positions of completed spans of `sym` starting at `start`, ascending.
  const std::vector<int>& ends(TokenId sym, int start) const {
    static const std::vector<int> empty;
    auto it = ends_.find(span_key(sym, start, 0));
    return it == ends_.end() ? empty : it->second;
  }

 private:
  void add(int pos, Item item) {
    if (!seen_[static_cast<std::size_t>(pos)].insert(item_key(item)).second) return;
    items_[static_cast<std::size_t>(pos)].push_back(item);
  }

  void process(int pos) {
    auto& queue = items_[static_cast<std::size_t>(pos)];
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      Item item = queue[qi];
      const Rule& r = g_.rule(item.rule);
      if (static_cast<std::size_t>(item.dot) == r.rhs.size()) {
        complete(pos, item, r);
        continue;
      }
      TokenId next = r.rhs[static_cast<std::size_t>(item.dot)];
      if (g_.token(next).is_terminal) {
        if (static_cast<std::size_t>(pos) < tokens_.size() && tokens_[static_cast<std::size_t>(pos)] == next) {
          add(pos + 1, {item.rule, item.dot + 1, item.origin});
        }
      } else {
        waiting_[static_cast<std::size_t>(pos)][next].push_back(item);
        if (predicted_[static_cast<std::size_t>(pos)].insert(next).second) {
          for (int rid : g_.rules_for(next)) add(pos, {rid, 0, pos});
        }
      }
    }
  }

  void complete(int pos, const Item& item, const Rule& r) {
    auto key = span_key(r.lhs, item.origin, pos);
    if (spans_.insert(key).second) {
      ends_[span_key(r.lhs, item.origin, 0)].push_back(pos);
    }
    auto& wait_map = waiting_[static_cast<std::size_t>(item.origin)];
    auto it = wait_map.find(r.lhs);
    if (it == wait_map.end()) return;
    for (const Item& w : it->second) add(pos, {w.rule, w.dot + 1, w.origin});
  }

  const Grammar& g_;
  std::span<const TokenId> tokens_;
  std::vector<std::vector<Item>> items_;
  std::vector<std::unordered_set<std::uint64_t>> seen_;
  std::vector<std::unordered_map<TokenId, std::vector<Item>>> waiting_;
  std::vector<std::unordered_set<TokenId>> predicted_;
  std::unordered_set<std::uint64_t> spans_;
  std::unordered_map<std::uint64_t, std::vector<int>> ends_;
};

// Deterministic derivation extraction over a recognized chart: lowest rule
// id first; within a rule, each child takes the shortest viable span, left
// to right.
class Extractor {
 public:
  Extractor(const Grammar& g, std::span<const TokenId> tokens, const Chart& chart)
      : g_(g), tokens_(tokens), chart_(chart) {}

  bool extract(TokenId sym, int start, int end, std::vector<int>& out) {
    auto key = span_key(sym, start, end);
    if (in_progress_.count(key)) return false;  // guards unit-rule cycles
    auto memo = memo_.find(key);
    if (memo != memo_.end() && memo->second.rule < 0) return false;

    int rule = -1;
    std::vector<int> bounds;
    if (memo != memo_.end()) {
      rule = memo->second.rule;
      bounds = memo->second.bounds;
    } else {
      in_progress_.insert(key);
      for (int rid : g_.rules_for(sym)) {
        bounds.clear();
        if (chart_.has_span(sym, start, end) && split(g_.rule(rid), 0, start, end, bounds)) {
          rule = rid;
          break;
        }
      }
      in_progress_.erase(key);
      memo_.emplace(key, Choice{rule, bounds});
      if (rule < 0) return false;
    }

    out.push_back(rule);
    const Rule& r = g_.rule(rule);
    int pos = start;
    for (std::size_t k = 0; k < r.rhs.size(); ++k) {
      int child_end = bounds[k];
      if (!g_.token(r.rhs[k]).is_terminal) {
        if (!extract(r.rhs[k], pos, child_end, out)) return false;
      }
      pos = child_end;
    }
    return true;
  }

 private:
  struct Choice {
    int rule;
    std::vector<int> bounds;  // end position of each child
  };

  bool split(const Rule& r, std::size_t k, int pos, int end, std::vector<int>& bounds) {
    if (k == r.rhs.size()) return pos == end;
    const int remaining = static_cast<int>(r.rhs.size() - k - 1);
    TokenId child = r.rhs[k];
    if (g_.token(child).is_terminal) {
      if (pos < end && tokens_[static_cast<std::size_t>(pos)] == child &&
          end - (pos + 1) >= remaining) {
        bounds.push_back(pos + 1);
        if (split(r, k + 1, pos + 1, end, bounds)) return true;
        bounds.pop_back();
      }
      return false;
    }
    std::uint64_t fail_key = (static_cast<std::uint64_t>(r.id) << 48) |
                             (static_cast<std::uint64_t>(k) << 42) |
                             (static_cast<std::uint64_t>(pos) << 21) |
                             static_cast<std::uint64_t>(end);
    if (split_fail_.count(fail_key)) return false;
    for (int e : chart_.ends(child, pos)) {
      if (e > end - remaining) break;
      // A recorded span can still be unextractable when its only derivations
      // run through a unit cycle; verify before committing.
      std::vector<int> probe;
      if (!extractable(child, pos, e)) continue;
      bounds.push_back(e);
      if (split(r, k + 1, e, end, bounds)) return true;
      bounds.pop_back();
    }
    split_fail_.insert(fail_key);
    return false;
  }

  bool extractable(TokenId sym, int start, int end) {
    std::vector<int> scratch;
    return extract(sym, start, end, scratch);
  }

  const Grammar& g_;
  std::span<const TokenId> tokens_;
  const Chart& chart_;
  std::unordered_map<std::uint64_t, Choice> memo_;
  std::unordered_set<std::uint64_t> in_progress_;
  std::unordered_set<std::uint64_t> split_fail_;
};

}  // namespace

std::vector<TokenId> tokenize(const Grammar& g, std::string_view smiles) {
  static thread_local const Grammar* cached_grammar = nullptr;
  static thread_local std::unique_ptr<Tokenizer> cached;
  if (cached_grammar != &g) {
    cached = std::make_unique<Tokenizer>(g);
    cached_grammar = &g;
  }
  const Tokenizer& tk = *cached;

  std::vector<TokenId> out;
  std::size_t i = 0;
  std::string probe;
  while (i < smiles.size()) {
    std::size_t longest = std::min(tk.max_len, smiles.size() - i);
    TokenId matched = -1;
    std::size_t matched_len = 0;
    for (std::size_t len = longest; len >= 1; --len) {
      probe.assign(smiles.substr(i, len));
      auto it = tk.by_text.find(probe);
      if (it != tk.by_text.end()) {
        matched = it->second;
        matched_len = len;
        break;
      }
    }
    if (matched < 0) {
      throw TokenizeError("no terminal matches at position " + std::to_string(i) + " in '" +
                              std::string(smiles) + "'",
                          i);
    }
    out.push_back(matched);
    i += matched_len;
  }
  return out;
}

bool recognizes(const Grammar& g, std::span<const TokenId> tokens) {
  if (tokens.empty()) return false;
  Chart chart(g, tokens);
  return chart.has_span(g.root(), 0, static_cast<int>(tokens.size()));
}

ParseResult parse(const Grammar& g, std::string_view smiles) {
  ParseResult result;
  std::vector<TokenId> tokens;
  try {
    tokens = tokenize(g, smiles);
  } catch (const TokenizeError& e) {
    result.status = ParseStatus::tokenize_failed;
    result.error_pos = e.position;
    result.message = e.what();
    return result;
  }
  if (tokens.empty()) {
    result.status = ParseStatus::tokenize_failed;
    result.message = "empty input";
    return result;
  }

  Chart chart(g, tokens);
  const int n = static_cast<int>(tokens.size());
  if (!chart.has_span(g.root(), 0, n)) {
    result.status = ParseStatus::not_representable;
    result.message = "not representable in the grammar";
    return result;
  }
  Extractor ex(g, tokens, chart);
  std::vector<int> rules;
  if (!ex.extract(g.root(), 0, n, rules)) {
    result.status = ParseStatus::not_representable;
    result.message = "recognized but not extractable";
    return result;
  }
  result.status = ParseStatus::parsed;
  result.derivation.rule_ids = std::move(rules);
  result.derivation.source = std::string(smiles);
  return result;
}

std::string render(const Grammar& g, const Derivation& d) {
  if (d.rule_ids.empty()) throw GrammarError("render: empty derivation");
  std::vector<TokenId> stack{g.root()};
  std::string out;
  auto drain = [&] {
    while (!stack.empty() && g.token(stack.back()).is_terminal) {
      out += g.token(stack.back()).text;
      stack.pop_back();
    }
  };
  drain();
  for (int rid : d.rule_ids) {
    if (stack.empty()) throw GrammarError("render: rules left after completion");
    const Rule& r = g.rule(rid);
    if (r.lhs != stack.back()) {
      throw GrammarError("render: rule " + std::to_string(rid) + " does not expand " +
                         g.token(stack.back()).text);
    }
    stack.pop_back();
    for (auto it = r.rhs.rbegin(); it != r.rhs.rend(); ++it) stack.push_back(*it);
    drain();
  }
  if (!stack.empty()) throw GrammarError("render: incomplete derivation");
  return out;
}

int atom_count_from_tokens(const Grammar& g, std::span<const TokenId> tokens) {
  int atoms = 0;
  bool in_bracket = false;
  for (TokenId t : tokens) {
    const std::string& text = g.token(t).text;
    if (in_bracket) {
      if (text == "]") in_bracket = false;
      continue;
    }
    if (text == "[") {
      in_bracket = true;
      ++atoms;
    } else if (is_atom_symbol(text)) {
      ++atoms;
    }
  }
  return atoms;
}

std::string IngestStats::to_json() const {
  std::ostringstream os;
  os << "{\"lines\":" << lines << ",\"parsed\":" << parsed
     << ",\"tokenize_failed\":" << tokenize_failed
     << ",\"not_representable\":" << not_representable << ",\"total_rules\":" << total_rules
     << ",\"total_atoms\":" << total_atoms << ",\"rules_per_molecule\":" << rules_per_molecule()
     << ",\"rules_per_atom\":" << rules_per_atom() << "}";
  return os.str();
}

IngestStats ingest_corpus(const Grammar& g, std::istream& in,
                          const std::function<void(Derivation&&)>& sink) {
  IngestStats stats;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string smiles;
    fields >> smiles;
    if (smiles.empty()) continue;
    ++stats.lines;
    ParseResult pr = parse(g, smiles);
    switch (pr.status) {
      case ParseStatus::parsed: {
        ++stats.parsed;
        stats.total_rules += static_cast<long long>(pr.derivation.rule_ids.size());
        auto tokens = tokenize(g, smiles);
        stats.total_atoms += atom_count_from_tokens(g, tokens);
        if (sink) sink(std::move(pr.derivation));
        break;
      }
      case ParseStatus::tokenize_failed:
        ++stats.tokenize_failed;
        break;
      case ParseStatus::not_representable:
        ++stats.not_representable;
        break;
    }
  }
  return stats;
}

IngestStats ingest_corpus_file(const Grammar& g, const std::string& path,
                               const std::function<void(Derivation&&)>& sink) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus: " + path);
  return ingest_corpus(g, in, sink);
}

}  // namespace molgen
