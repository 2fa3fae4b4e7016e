// SPDX-License-Identifier: Apache-2.0

#include "molgen/attributes.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace molgen {
namespace {

bool contains(std::string_view text, std::string_view needle) {
  return text.find(needle) != std::string_view::npos;
}

}  // namespace

void MaskConfig::validate() const {
  if (min_ring_size < 3) throw AttributeError("min_ring_size must be >= 3");
  if (max_ring_size < min_ring_size) throw AttributeError("max_ring_size must be >= min_ring_size");
  if (max_steps < 1) throw AttributeError("max_steps must be positive");
}

std::string rule_text(const Grammar& g, const Rule& r) {
  std::string out = g.token(r.lhs).text + " ->";
  for (TokenId c : r.rhs) {
    const Token& t = g.token(c);
    out += ' ';
    if (t.is_terminal) {
      out += '\'';
      out += t.text;
      out += '\'';
    } else {
      out += t.text;
    }
  }
  return out;
}

RingTable RingTable::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ring table: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return load_text(ss.str());
}

RingTable RingTable::load_text(std::string_view text) {
  RingTable table;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    std::string line(text.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos));
    pos = (eol == std::string_view::npos) ? text.size() + 1 : eol + 1;
    ++line_no;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    std::size_t first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    if (line[first] == '#') continue;

    std::size_t sep = line.find("::");
    if (sep == std::string::npos) {
      throw AttributeError("ring table line " + std::to_string(line_no) + ": missing '::'");
    }
    std::string key = line.substr(first, sep - first);
    while (!key.empty() && key.back() == ' ') key.pop_back();

    RingTableEntry entry;
    std::istringstream kv(line.substr(sep + 2));
    std::string item;
    while (kv >> item) {
      std::size_t eq = item.find('=');
      if (eq == std::string::npos) {
        throw AttributeError("ring table line " + std::to_string(line_no) + ": bad item '" + item + "'");
      }
      std::string name = item.substr(0, eq);
      int value = std::stoi(item.substr(eq + 1));
      if (name == "inherit") {
        entry.inherit = value;
      } else if (name == "fresh_num") {
        entry.fresh_num = value;
      } else if (name == "fresh_num1") {
        entry.fresh_num1 = value;
      } else {
        throw AttributeError("ring table line " + std::to_string(line_no) + ": unknown key '" + name + "'");
      }
    }
    if (!table.entries_.emplace(key, entry).second) {
      throw AttributeError("ring table line " + std::to_string(line_no) + ": duplicate rule entry");
    }
  }
  return table;
}

const RingTableEntry* RingTable::find(const std::string& text) const {
  auto it = entries_.find(text);
  return it == entries_.end() ? nullptr : &it->second;
}

AttributeEngine::AttributeEngine(const Grammar& g, const RingTable& table, MaskConfig cfg)
    : grammar_(&g), cfg_(cfg) {
  cfg_.validate();
  rs_width_ = cfg_.max_ring_size + 2;
  build_flags(table);
  check_consistency();
  build_extended_td();
}

void AttributeEngine::build_flags(const RingTable& table) {
  const Grammar& g = *grammar_;
  const std::size_t n_tokens = g.token_count();

  receives_.assign(n_tokens, 0);
  is_num1_.assign(n_tokens, 0);
  opens_ring_.assign(n_tokens, 0);
  numeral_token_.assign(n_tokens, 0);
  cycle_lhs_.assign(n_tokens, 0);
  for (std::size_t t = 0; t < n_tokens; ++t) {
    const Token& tok = g.token(static_cast<TokenId>(t));
    if (tok.is_terminal) continue;
    const bool has_num = contains(tok.text, "num");
    const bool has_cycle = contains(tok.text, "cycle");
    receives_[t] = has_num || has_cycle;
    is_num1_[t] = contains(tok.text, "num1");
    opens_ring_[t] = contains(tok.text, "ring");
    cycle_lhs_[t] = has_cycle;
  }

  // Numeral tokens: cycle receivers all of whose rules emit one terminal.
  for (std::size_t t = 0; t < n_tokens; ++t) {
    if (!receives_[t]) continue;
    const auto& rules = g.rules_for(static_cast<TokenId>(t));
    if (rules.empty()) continue;
    bool all_single_terminal = true;
    for (int rid : rules) {
      const Rule& r = g.rule(rid);
      if (r.rhs.size() != 1 || !g.token(r.rhs[0]).is_terminal) {
        all_single_terminal = false;
        break;
      }
    }
    numeral_token_[t] = all_single_terminal;
    if (all_single_terminal) {
      std::vector<std::string> order;
      for (int rid : rules) order.push_back(g.token(g.rule(rid).rhs[0]).text);
      numeral_order_.emplace(static_cast<TokenId>(t), std::move(order));
    }
  }

  const std::size_t n_rules = g.rule_count();
  inherit_.assign(n_rules, 0);
  fresh_num_.assign(n_rules, -1);
  fresh_num1_.assign(n_rules, -1);
  cycle_class_.assign(n_rules, CycleClass::none);
  receiver_positions_.assign(n_rules, {});

  std::set<std::string> used_entries;
  for (const Rule& r : g.rules()) {
    const std::string text = rule_text(g, r);
    if (const RingTableEntry* e = table.find(text)) {
      inherit_[static_cast<std::size_t>(r.id)] = e->inherit;
      fresh_num_[static_cast<std::size_t>(r.id)] = e->fresh_num;
      fresh_num1_[static_cast<std::size_t>(r.id)] = e->fresh_num1;
      used_entries.insert(text);
    }
    auto& recv = receiver_positions_[static_cast<std::size_t>(r.id)];
    bool has_cycle_receiver = false;
    bool has_num_receiver = false;
    for (std::size_t p = 0; p < r.rhs.size(); ++p) {
      TokenId c = r.rhs[p];
      if (g.token(c).is_terminal) continue;
      if (!receives_[static_cast<std::size_t>(c)]) continue;
      recv.push_back(static_cast<int>(p));
      if (cycle_lhs_[static_cast<std::size_t>(c)]) has_cycle_receiver = true;
      else has_num_receiver = true;
    }
    if (cycle_lhs_[static_cast<std::size_t>(r.lhs)]) {
      cycle_class_[static_cast<std::size_t>(r.id)] =
          has_cycle_receiver ? CycleClass::extends
                             : (has_num_receiver ? CycleClass::closes : CycleClass::none);
    }
  }

  for (const auto& [text, entry] : table.entries()) {
    (void)entry;
    if (!used_entries.count(text)) {
      throw AttributeError("ring table entry matches no grammar rule: " + text);
    }
  }
}

void AttributeEngine::check_consistency() const {
  const Grammar& g = *grammar_;
  for (const Rule& r : g.rules()) {
    const std::size_t id = static_cast<std::size_t>(r.id);
    const auto& recv = receiver_positions_[id];
    const bool lhs_ring = opens_ring_[static_cast<std::size_t>(r.lhs)];
    const bool lhs_recv = receives_[static_cast<std::size_t>(r.lhs)];

    if (lhs_ring) {
      int n_num = 0, n_num1 = 0;
      for (int p : recv) {
        TokenId c = r.rhs[static_cast<std::size_t>(p)];
        (is_num1_[static_cast<std::size_t>(c)] ? n_num1 : n_num)++;
      }
      if (n_num > 0 && fresh_num_[id] < 0) {
        throw AttributeError("ring table misses fresh_num for: " + rule_text(g, r));
      }
      if (n_num1 > 0 && fresh_num1_[id] < 0) {
        throw AttributeError("ring table misses fresh_num1 for: " + rule_text(g, r));
      }
      // Every cycle id must tag exactly two tokens.
      if ((n_num != 0 && n_num != 2) || (n_num1 != 0 && n_num1 != 2)) {
        throw AttributeError("ring-opening rule does not create receiver pairs: " + rule_text(g, r));
      }
      if (n_num + n_num1 == 0) {
        throw AttributeError("ring-opening rule has no cycle receivers: " + rule_text(g, r));
      }
    } else if (lhs_recv) {
      if (numeral_token_[static_cast<std::size_t>(r.lhs)]) continue;  // id consumed at emission
      if (recv.size() != 1) {
        throw AttributeError("cycle id would be lost or duplicated by: " + rule_text(g, r));
      }
    } else if (!recv.empty()) {
      throw AttributeError("cycle receivers under an unattributed parent in: " + rule_text(g, r));
    }
  }
}

std::vector<AttributeEngine::ChildAttr> AttributeEngine::child_attrs(int rule_id,
                                                                     int lhs_ring_size) const {
  const Rule& r = grammar_->rule(rule_id);
  const std::size_t id = static_cast<std::size_t>(rule_id);
  std::vector<ChildAttr> out(r.rhs.size());
  const bool lhs_ring = opens_ring_[static_cast<std::size_t>(r.lhs)];
  for (int p : receiver_positions_[id]) {
    TokenId c = r.rhs[static_cast<std::size_t>(p)];
    ChildAttr& a = out[static_cast<std::size_t>(p)];
    a.receives = true;
    if (lhs_ring) {
      if (is_num1_[static_cast<std::size_t>(c)]) {
        a.fresh_group = 1;
        a.ring_size = static_cast<std::int16_t>(fresh_num1_[id]);
      } else {
        a.fresh_group = 0;
        a.ring_size = static_cast<std::int16_t>(fresh_num_[id]);
      }
    } else {
      a.ring_size = lhs_ring_size < 0
                        ? std::int16_t{-1}
                        : static_cast<std::int16_t>(lhs_ring_size + inherit_[id]);
    }
  }
  return out;
}

bool AttributeEngine::cycle_allows(int rule_id, int lhs_ring_size) const {
  switch (cycle_class_[static_cast<std::size_t>(rule_id)]) {
    case CycleClass::none:
      return true;
    case CycleClass::closes:
      return lhs_ring_size >= cfg_.min_ring_size && lhs_ring_size <= cfg_.max_ring_size;
    case CycleClass::extends:
      return lhs_ring_size >= 0 &&
             lhs_ring_size + inherit_[static_cast<std::size_t>(rule_id)] <= cfg_.max_ring_size;
  }
  return false;
}

void AttributeEngine::build_extended_td() {
  const Grammar& g = *grammar_;
  const std::size_t n_tokens = g.token_count();

  td_ext_.assign(n_tokens, std::vector<int>(static_cast<std::size_t>(rs_width_), kTdUnreachable));
  for (std::size_t t = 0; t < n_tokens; ++t) {
    if (g.token(static_cast<TokenId>(t)).is_terminal) {
      std::fill(td_ext_[t].begin(), td_ext_[t].end(), 0);
    }
  }

  bool changed = true;
  while (changed) {
    changed = false;
    for (const Rule& r : g.rules()) {
      for (int rs = -1; rs <= cfg_.max_ring_size; ++rs) {
        if (!cycle_allows(r.id, rs)) continue;
        auto attrs = child_attrs(r.id, rs);
        bool overflow = false;
        long long sum = 1;
        for (std::size_t p = 0; p < r.rhs.size(); ++p) {
          int crs = attrs[p].ring_size;
          if (crs > cfg_.max_ring_size) {
            overflow = true;
            break;
          }
          sum += td_ext_[static_cast<std::size_t>(r.rhs[p])][static_cast<std::size_t>(rs_index(crs))];
        }
        if (overflow) continue;
        int candidate = sum >= kTdUnreachable ? kTdUnreachable : static_cast<int>(sum);
        int& cur = td_ext_[static_cast<std::size_t>(r.lhs)][static_cast<std::size_t>(rs_index(rs))];
        if (candidate < cur) {
          cur = candidate;
          changed = true;
        }
      }
    }
  }

  delta_ext_.assign(g.rule_count(), std::vector<int>(static_cast<std::size_t>(rs_width_), kTdUnreachable));
  for (const Rule& r : g.rules()) {
    for (int rs = -1; rs <= cfg_.max_ring_size; ++rs) {
      if (!cycle_allows(r.id, rs)) continue;
      auto attrs = child_attrs(r.id, rs);
      bool overflow = false;
      long long sum = 0;
      for (std::size_t p = 0; p < r.rhs.size(); ++p) {
        int crs = attrs[p].ring_size;
        if (crs > cfg_.max_ring_size) {
          overflow = true;
          break;
        }
        sum += td_ext_[static_cast<std::size_t>(r.rhs[p])][static_cast<std::size_t>(rs_index(crs))];
      }
      if (overflow || sum >= kTdUnreachable) continue;
      int lhs_td = td_ext_[static_cast<std::size_t>(r.lhs)][static_cast<std::size_t>(rs_index(rs))];
      if (lhs_td >= kTdUnreachable) continue;
      delta_ext_[static_cast<std::size_t>(r.id)][static_cast<std::size_t>(rs_index(rs))] =
          static_cast<int>(sum - lhs_td);
    }
  }

  // Reachable extended nonterminals must be productive and must offer a
  // distance-reducing rule; this is the termination-guarantee precondition.
  std::vector<std::vector<char>> seen(n_tokens, std::vector<char>(static_cast<std::size_t>(rs_width_), 0));
  std::vector<std::pair<TokenId, int>> stack;
  seen[static_cast<std::size_t>(g.root())][static_cast<std::size_t>(rs_index(-1))] = 1;
  stack.emplace_back(g.root(), -1);
  while (!stack.empty()) {
    auto [t, rs] = stack.back();
    stack.pop_back();
    if (g.token(t).is_terminal) continue;
    if (extended_td(t, rs) >= kTdUnreachable) {
      throw AttributeError("extended token unproductive: " + g.token(t).text +
                           " at ring size " + std::to_string(rs));
    }
    bool has_minus_one = false;
    for (int rid : g.rules_for(t)) {
      int d = extended_delta_td(rid, rs);
      if (d == -1) has_minus_one = true;
      if (!cycle_allows(rid, rs)) continue;
      auto attrs = child_attrs(rid, rs);
      const Rule& r = g.rule(rid);
      for (std::size_t p = 0; p < r.rhs.size(); ++p) {
        int crs = attrs[p].ring_size;
        if (crs > cfg_.max_ring_size) continue;
        auto& flag = seen[static_cast<std::size_t>(r.rhs[p])][static_cast<std::size_t>(rs_index(crs))];
        if (!flag) {
          flag = 1;
          stack.emplace_back(r.rhs[p], crs);
        }
      }
    }
    if (!has_minus_one) {
      throw AttributeError("no distance-reducing rule for " + g.token(t).text +
                           " at ring size " + std::to_string(rs));
    }
  }
}

int AttributeEngine::extended_td(TokenId t, int ring_size) const {
  if (ring_size < -1 || ring_size > cfg_.max_ring_size) return kTdUnreachable;
  return td_ext_[static_cast<std::size_t>(t)][static_cast<std::size_t>(rs_index(ring_size))];
}

int AttributeEngine::extended_delta_td(int rule_id, int lhs_ring_size) const {
  if (lhs_ring_size < -1 || lhs_ring_size > cfg_.max_ring_size) return kTdUnreachable;
  return delta_ext_[static_cast<std::size_t>(rule_id)][static_cast<std::size_t>(rs_index(lhs_ring_size))];
}

std::vector<ExtendedToken> AttributeEngine::propagate(int rule_id, const ExtendedToken& parent,
                                                      std::int32_t& next_group) const {
  const Grammar& g = *grammar_;
  const Rule& r = g.rule(rule_id);
  if (r.lhs != parent.token) {
    throw AttributeError("propagate: rule lhs does not match parent token");
  }
  auto attrs = child_attrs(rule_id, parent.ring_size);
  std::vector<ExtendedToken> out(r.rhs.size());

  std::int32_t group_of_fresh[2] = {-1, -1};
  bool receiver_seen = false;
  for (std::size_t p = 0; p < r.rhs.size(); ++p) {
    out[p].token = r.rhs[p];
    if (!attrs[p].receives) continue;
    receiver_seen = true;
    out[p].ring_size = attrs[p].ring_size;
    if (attrs[p].fresh_group >= 0) {
      std::int32_t& slot = group_of_fresh[attrs[p].fresh_group];
      if (slot < 0) slot = next_group++;
      out[p].group = slot;
    } else {
      out[p].group = parent.group;
    }
  }

  if (parent.group >= 0 && !receiver_seen &&
      !numeral_token_[static_cast<std::size_t>(parent.token)]) {
    throw AttributeError("cycle id " + std::to_string(parent.group) +
                         " lost while expanding " + rule_text(g, r));
  }
  return out;
}

std::vector<char> AttributeEngine::cycle_size_mask(const ExtendedToken& tok) const {
  const auto& rules = grammar_->rules_for(tok.token);
  std::vector<char> mask(rules.size(), 0);
  bool any = false;
  for (std::size_t i = 0; i < rules.size(); ++i) {
    mask[i] = cycle_allows(rules[i], tok.ring_size);
    any = any || mask[i];
  }
  if (!any) {
    throw MaskViolation("cycle_size_mask is all-false for " + grammar_->token(tok.token).text +
                        " at ring size " + std::to_string(tok.ring_size));
  }
  return mask;
}

std::vector<char> AttributeEngine::budget_mask(int seq_td, int steps_left,
                                               const ExtendedToken& tok) const {
  const auto& rules = grammar_->rules_for(tok.token);
  std::vector<char> mask(rules.size(), 0);
  for (std::size_t i = 0; i < rules.size(); ++i) {
    int d = extended_delta_td(rules[i], tok.ring_size);
    mask[i] = d < kTdUnreachable && seq_td + d <= steps_left - 1;
  }
  return mask;
}

int AttributeEngine::forced_numeral_rule(const ExtendedToken& tok, const NumeralCache& cache) const {
  const Grammar& g = *grammar_;
  if (!numeral_token_[static_cast<std::size_t>(tok.token)]) {
    throw AttributeError("forced_numeral_rule: not a numeral token: " + g.token(tok.token).text);
  }
  if (tok.group < 0) {
    throw MaskViolation("numeral token without a cycle id: " + g.token(tok.token).text);
  }
  const auto& rules = g.rules_for(tok.token);
  auto it = cache.open.find(tok.group);
  if (it != cache.open.end()) {
    for (int rid : rules) {
      if (g.token(g.rule(rid).rhs[0]).text == it->second) return rid;
    }
    throw MaskViolation("cached numeral '" + it->second + "' has no rule under " +
                        g.token(tok.token).text);
  }
  for (int rid : rules) {
    if (!cache.in_use.count(g.token(g.rule(rid).rhs[0]).text)) return rid;
  }
  throw NumeralExhaustion("all ring-closure numerals are open");
}

std::vector<char> AttributeEngine::numeral_mask(const ExtendedToken& tok,
                                                const NumeralCache& cache) const {
  const auto& rules = grammar_->rules_for(tok.token);
  std::vector<char> mask(rules.size(), 0);
  int forced = forced_numeral_rule(tok, cache);
  for (std::size_t i = 0; i < rules.size(); ++i) mask[i] = rules[i] == forced;
  return mask;
}

const std::vector<std::string>& AttributeEngine::numeral_order(TokenId numeral_token) const {
  auto it = numeral_order_.find(numeral_token);
  if (it == numeral_order_.end()) {
    throw AttributeError("not a numeral token: " + grammar_->token(numeral_token).text);
  }
  return it->second;
}

}  // namespace molgen
