// SPDX-License-Identifier: Apache-2.0

#include "molgen/derivation.hpp"

#include <sstream>

namespace molgen {

DerivationState::DerivationState(const AttributeEngine& engine) : engine_(&engine) {
  const Grammar& g = engine.grammar();
  ExtendedToken root;
  root.token = g.root();
  pending_.push_back(root);
  seq_td_ = engine.extended_td(root.token, -1);
  if (seq_td_ > engine.config().max_steps) {
    throw MaskViolation("max_steps is below the root terminal distance");
  }
}

const ExtendedToken& DerivationState::cursor() const {
  if (pending_.empty()) throw MaskViolation("cursor on a completed derivation");
  return pending_.back();
}

void DerivationState::combined_mask(std::vector<char>& out) const {
  const Grammar& g = engine_->grammar();
  out.assign(g.rule_count(), 0);
  const ExtendedToken& cur = cursor();
  const auto& rules = g.rules_for(cur.token);

  int forced = -1;
  if (engine_->is_numeral_token(cur.token)) {
    forced = engine_->forced_numeral_rule(cur, cache_);
  }

  bool any = false;
  const int budget = steps_left() - 1;
  for (int rid : rules) {
    if (forced >= 0 && rid != forced) continue;
    int d = engine_->extended_delta_td(rid, cur.ring_size);
    if (d >= kTdUnreachable) continue;           // cycle-size filter or unproductive
    if (seq_td_ + d > budget) continue;          // step-budget filter
    out[static_cast<std::size_t>(rid)] = 1;
    any = true;
  }
  if (!any) {
    throw MaskViolation("combined mask is all-false\n" + dump());
  }
}

std::vector<char> DerivationState::combined_mask() const {
  std::vector<char> out;
  combined_mask(out);
  return out;
}

void DerivationState::apply(int rule_id) {
  const Grammar& g = engine_->grammar();
  const ExtendedToken cur = cursor();
  const Rule& r = g.rule(rule_id);

  if (r.lhs != cur.token) {
    throw MaskViolation("rule " + std::to_string(rule_id) + " does not apply to " +
                        g.token(cur.token).text + "\n" + dump());
  }
  const int delta = engine_->extended_delta_td(rule_id, cur.ring_size);
  if (delta >= kTdUnreachable) {
    throw MaskViolation("rule forbidden by cycle-size mask: " + rule_text(g, r) + "\n" + dump());
  }
  if (seq_td_ + delta > steps_left() - 1) {
    throw MaskViolation("rule forbidden by step budget: " + rule_text(g, r) + "\n" + dump());
  }
  if (engine_->is_numeral_token(cur.token)) {
    int forced = engine_->forced_numeral_rule(cur, cache_);
    if (forced != rule_id) {
      throw MaskViolation("rule forbidden by numeral mask: " + rule_text(g, r) + "\n" + dump());
    }
    const std::string& text = g.token(r.rhs[0]).text;
    auto it = cache_.open.find(cur.group);
    if (it != cache_.open.end()) {
      cache_.in_use.erase(it->second);
      cache_.open.erase(it);
    } else {
      cache_.open.emplace(cur.group, text);
      cache_.in_use.insert(text);
    }
  }

  pending_.pop_back();
  if (cur.group >= 0) {
    auto it = live_.find(cur.group);
    if (it != live_.end() && --it->second == 0) {
      if (cache_.open.count(cur.group)) {
        throw MaskViolation("cycle id " + std::to_string(cur.group) +
                            " died with its numeral still open\n" + dump());
      }
      live_.erase(it);
    }
  }

  auto children = engine_->propagate(rule_id, cur, next_group_);
  for (auto it = children.rbegin(); it != children.rend(); ++it) {
    pending_.push_back(*it);
    if (it->group >= 0) {
      int share = ++live_[it->group];
      if (share > max_group_share_) max_group_share_ = share;
      if (share > 2) {
        throw MaskViolation("more than two live tokens share cycle id " +
                            std::to_string(it->group) + "\n" + dump());
      }
    }
  }

  ++steps_used_;
  seq_td_ += delta;
  history_.push_back(rule_id);
  drain_terminals();
  check_invariant();
}

void DerivationState::drain_terminals() {
  const Grammar& g = engine_->grammar();
  while (!pending_.empty() && g.token(pending_.back().token).is_terminal) {
    emitted_ += g.token(pending_.back().token).text;
    pending_.pop_back();
  }
}

void DerivationState::check_invariant() const {
  if (seq_td_ > steps_left()) {
    throw MaskViolation("terminal distance exceeds remaining steps\n" + dump());
  }
  if (pending_.empty() && seq_td_ != 0) {
    throw MaskViolation("completed derivation with nonzero terminal distance\n" + dump());
  }
}

std::string DerivationState::dump() const {
  const Grammar& g = engine_->grammar();
  std::ostringstream os;
  os << "steps_used=" << steps_used_ << " steps_left=" << steps_left()
     << " sequence_td=" << seq_td_ << '\n';
  os << "emitted: " << emitted_ << '\n';
  os << "pending (leftmost first):";
  for (auto it = pending_.rbegin(); it != pending_.rend(); ++it) {
    os << ' ' << g.token(it->token).text;
    if (it->group >= 0) os << "#" << it->group;
    if (it->ring_size >= 0) os << "@" << it->ring_size;
  }
  os << '\n' << "open numerals:";
  for (const auto& [group, text] : cache_.open) os << ' ' << group << "->" << text;
  os << '\n' << "rule history:";
  for (int rid : history_) os << ' ' << rid;
  os << '\n';
  return os.str();
}

ReplayResult replay(const AttributeEngine& engine, std::span<const int> rule_ids,
                    bool collect_masks) {
  ReplayResult result;
  DerivationState state(engine);
  std::vector<char> mask;
  for (std::size_t i = 0; i < rule_ids.size(); ++i) {
    if (state.complete()) {
      result.failed_step = i;
      result.message = "derivation already complete";
      return result;
    }
    try {
      state.combined_mask(mask);
      if (!mask[static_cast<std::size_t>(rule_ids[i])]) {
        result.failed_step = i;
        result.message = "rule " + std::to_string(rule_ids[i]) + " masked out at step " +
                         std::to_string(i);
        return result;
      }
      if (collect_masks) result.masks.push_back(mask);
      state.apply(rule_ids[i]);
    } catch (const Error& e) {
      result.failed_step = i;
      result.message = e.what();
      return result;
    }
  }
  if (!state.complete()) {
    result.failed_step = rule_ids.size();
    result.message = "rules exhausted with nonterminals pending";
    return result;
  }
  result.ok = true;
  result.smiles = state.emitted();
  return result;
}

}  // namespace molgen
