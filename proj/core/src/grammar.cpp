// SPDX-License-Identifier: Apache-2.0

#include "molgen/grammar.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace molgen {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

struct RawSymbol {
  std::string text;
  bool quoted = false;
};

// Splits the right-hand side of a rule into whitespace-separated symbols.
// A quoted symbol runs from one single quote to the next; quotes cannot be
// escaped (no terminal in this domain contains one).
std::vector<RawSymbol> split_symbols(std::string_view s, int line_no) {
  std::vector<RawSymbol> out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == ' ' || s[i] == '\t') {
      ++i;
      continue;
    }
    if (s[i] == '\'') {
      std::size_t close = s.find('\'', i + 1);
      if (close == std::string_view::npos) {
        throw GrammarError("line " + std::to_string(line_no) + ": unterminated quote");
      }
      if (close == i + 1) {
        throw GrammarError("line " + std::to_string(line_no) + ": empty terminal");
      }
      out.push_back({std::string(s.substr(i + 1, close - i - 1)), true});
      i = close + 1;
    } else {
      std::size_t end = i;
      while (end < s.size() && s[end] != ' ' && s[end] != '\t' && s[end] != '\'') ++end;
      out.push_back({std::string(s.substr(i, end - i)), false});
      i = end;
    }
  }
  return out;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::optional<TokenId> Grammar::find_token(std::string_view text) const {
  auto it = by_text_.find(std::string(text));
  if (it == by_text_.end()) return std::nullopt;
  return it->second;
}

Grammar Grammar::load_file(const std::string& path, LoadReport* report) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open grammar file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return load_text(ss.str(), report);
}

Grammar Grammar::load_text(std::string_view text, LoadReport* report) {
  Grammar g;
  struct PendingRule {
    std::string lhs;
    std::vector<RawSymbol> rhs;
    int line_no;
  };
  std::vector<PendingRule> pending;
  std::set<std::string> quoted_texts, unquoted_texts;

  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    std::string_view line = text.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos);
    pos = (eol == std::string_view::npos) ? text.size() + 1 : eol + 1;
    ++line_no;

    line = trim(line);
    if (line.empty() || line.front() == '#') continue;

    std::size_t arrow = line.find("->");
    if (arrow == std::string_view::npos) {
      throw GrammarError("line " + std::to_string(line_no) + ": missing '->': " + std::string(line));
    }
    auto lhs_syms = split_symbols(line.substr(0, arrow), line_no);
    auto rhs_syms = split_symbols(line.substr(arrow + 2), line_no);
    if (lhs_syms.size() != 1 || lhs_syms[0].quoted) {
      throw GrammarError("line " + std::to_string(line_no) +
                         ": left-hand side must be a single unquoted token");
    }
    if (rhs_syms.empty()) {
      throw GrammarError("line " + std::to_string(line_no) + ": empty right-hand side");
    }
    for (const auto& s : rhs_syms) {
      (s.quoted ? quoted_texts : unquoted_texts).insert(s.text);
    }
    unquoted_texts.insert(lhs_syms[0].text);
    pending.push_back({std::move(lhs_syms[0].text), std::move(rhs_syms), line_no});
  }

  if (pending.empty()) throw GrammarError("empty grammar: no root token");

  for (const auto& t : quoted_texts) {
    if (unquoted_texts.count(t)) {
      throw GrammarError("symbol '" + t + "' appears both quoted and unquoted");
    }
  }

  std::set<std::string> lhs_texts;
  for (const auto& r : pending) lhs_texts.insert(r.lhs);

  // An unquoted symbol that never appears as a left-hand side has no rules;
  // it is almost certainly a terminal missing its quotes.
  for (const auto& t : unquoted_texts) {
    if (!lhs_texts.count(t)) {
      throw GrammarError("suspicious terminal: unquoted symbol '" + t +
                         "' never appears on a left-hand side");
    }
  }

  auto intern = [&g](const std::string& text, bool terminal) -> TokenId {
    auto it = g.by_text_.find(text);
    if (it != g.by_text_.end()) return it->second;
    TokenId id = static_cast<TokenId>(g.tokens_.size());
    g.tokens_.push_back({text, terminal});
    g.by_text_.emplace(text, id);
    return id;
  };

  std::set<std::pair<std::string, std::vector<std::pair<std::string, bool>>>> seen;
  for (auto& pr : pending) {
    std::vector<std::pair<std::string, bool>> key_rhs;
    for (const auto& s : pr.rhs) key_rhs.emplace_back(s.text, s.quoted);
    if (!seen.emplace(pr.lhs, key_rhs).second) {
      if (report) {
        report->warnings.push_back("line " + std::to_string(pr.line_no) +
                                   ": duplicate rule dropped: " + pr.lhs + " -> ...");
      }
      continue;
    }
    Rule r;
    r.id = static_cast<int>(g.rules_.size());
    r.lhs = intern(pr.lhs, false);
    for (const auto& s : pr.rhs) r.rhs.push_back(intern(s.text, s.quoted));
    g.rules_.push_back(std::move(r));
  }

  g.root_ = g.rules_.front().lhs;
  g.finalize(report);
  return g;
}

void Grammar::finalize(LoadReport* /*report*/) {
  rules_by_lhs_.assign(tokens_.size(), {});
  for (const Rule& r : rules_) rules_by_lhs_[static_cast<std::size_t>(r.lhs)].push_back(r.id);

  // Reachability from the root.
  reachable_.assign(tokens_.size(), 0);
  std::vector<TokenId> stack{root_};
  reachable_[static_cast<std::size_t>(root_)] = 1;
  while (!stack.empty()) {
    TokenId t = stack.back();
    stack.pop_back();
    for (int rid : rules_by_lhs_[static_cast<std::size_t>(t)]) {
      for (TokenId c : rules_[static_cast<std::size_t>(rid)].rhs) {
        if (!reachable_[static_cast<std::size_t>(c)]) {
          reachable_[static_cast<std::size_t>(c)] = 1;
          stack.push_back(c);
        }
      }
    }
  }

  td_.clear();
  std::vector<int> delta;
  run_td_fixpoint(td_, delta);
  for (std::size_t i = 0; i < rules_.size(); ++i) rules_[i].delta_td = delta[i];

  std::vector<std::string> dead;
  for (std::size_t t = 0; t < tokens_.size(); ++t) {
    if (reachable_[t] && td_[t] >= kTdUnreachable) dead.push_back(tokens_[t].text);
  }
  if (!dead.empty()) {
    std::string msg = "unproductive tokens reachable from root:";
    for (const auto& t : dead) msg += " " + t;
    throw GrammarError(msg);
  }

  fingerprint_ = fnv1a64(to_text());
}

int Grammar::run_td_fixpoint(std::vector<int>& td, std::vector<int>& delta) const {
  td.assign(tokens_.size(), kTdUnreachable);
  for (std::size_t t = 0; t < tokens_.size(); ++t) {
    if (tokens_[t].is_terminal) td[t] = 0;
  }
  int sweeps = 0;
  bool changed = true;
  while (changed) {
    changed = false;
    ++sweeps;
    for (const Rule& r : rules_) {
      long long sum = 1;
      for (TokenId c : r.rhs) sum += td[static_cast<std::size_t>(c)];
      int candidate = sum >= kTdUnreachable ? kTdUnreachable : static_cast<int>(sum);
      int& cur = td[static_cast<std::size_t>(r.lhs)];
      if (candidate < cur) {
        cur = candidate;
        changed = true;
      }
    }
  }
  delta.assign(rules_.size(), 0);
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    long long sum = 0;
    for (TokenId c : rules_[i].rhs) sum += td[static_cast<std::size_t>(c)];
    long long d = sum - td[static_cast<std::size_t>(rules_[i].lhs)];
    delta[i] = d >= kTdUnreachable ? kTdUnreachable
                                   : (d <= -kTdUnreachable ? -kTdUnreachable : static_cast<int>(d));
  }
  return sweeps;
}

int Grammar::recompute_terminal_distances() {
  std::vector<int> td;
  std::vector<int> delta;
  int sweeps = run_td_fixpoint(td, delta);
  if (td != td_) throw GrammarError("terminal-distance fixpoint is not idempotent");
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    if (delta[i] != rules_[i].delta_td) {
      throw GrammarError("delta_td changed on recompute for rule " + std::to_string(i));
    }
  }
  return sweeps;
}

const std::vector<int>& Grammar::rules_for(TokenId t) const {
  if (t < 0 || static_cast<std::size_t>(t) >= tokens_.size()) {
    throw GrammarError("rules_for: unknown token id " + std::to_string(t));
  }
  if (tokens_[static_cast<std::size_t>(t)].is_terminal) {
    throw GrammarError("rules_for: '" + tokens_[static_cast<std::size_t>(t)].text +
                       "' is a terminal");
  }
  return rules_by_lhs_[static_cast<std::size_t>(t)];
}

int Grammar::sequence_td(std::span<const TokenId> seq) const {
  long long sum = 0;
  for (TokenId t : seq) {
    if (t < 0 || static_cast<std::size_t>(t) >= tokens_.size()) {
      throw GrammarError("sequence_td: unknown token id " + std::to_string(t));
    }
    sum += td_[static_cast<std::size_t>(t)];
  }
  return sum >= kTdUnreachable ? kTdUnreachable : static_cast<int>(sum);
}

std::string Grammar::to_text() const {
  std::string out;
  for (const Rule& r : rules_) {
    out += tokens_[static_cast<std::size_t>(r.lhs)].text;
    out += " ->";
    for (TokenId c : r.rhs) {
      const Token& t = tokens_[static_cast<std::size_t>(c)];
      out += ' ';
      if (t.is_terminal) {
        out += '\'';
        out += t.text;
        out += '\'';
      } else {
        out += t.text;
      }
    }
    out += '\n';
  }
  return out;
}

}  // namespace molgen
