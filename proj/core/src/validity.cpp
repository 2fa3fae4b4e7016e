// SPDX-License-Identifier: Apache-2.0

#include "molgen/validity.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <optional>

namespace molgen::oracle {
namespace {

struct Atom {
  char element = '?';      // C N O S F L(Cl) B(Br) I
  bool aromatic = false;
  int budget = 0;          // maximum explicit bond-order sum
  bool plain_sulfur = false;
  std::size_t position = 0;
};

struct Bond {
  int a = -1;
  int b = -1;
  int order = 1;
  bool ring_closure = false;
};

struct MolGraph {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;
  std::vector<std::vector<std::pair<int, int>>> adj;  // atom -> (neighbor, bond idx)

  void add_bond(int a, int b, int order, bool closure) {
    int idx = static_cast<int>(bonds.size());
    bonds.push_back({a, b, order, closure});
    adj[static_cast<std::size_t>(a)].emplace_back(b, idx);
    adj[static_cast<std::size_t>(b)].emplace_back(a, idx);
  }
};

struct BracketSpec {
  char element;
  bool aromatic;
  int budget;
};

// The closed bracket-atom vocabulary this SMILES dialect uses, with the
// explicit-bond budget of each form.
const std::map<std::string, BracketSpec, std::less<>>& bracket_table() {
  static const std::map<std::string, BracketSpec, std::less<>> table = {
      {"C@H", {'C', false, 3}},  {"C@@H", {'C', false, 3}}, {"C@", {'C', false, 4}},
      {"C@@", {'C', false, 4}},  {"N+", {'N', false, 4}},   {"NH+", {'N', false, 3}},
      {"NH3+", {'N', false, 1}}, {"O-", {'O', false, 1}},   {"nH", {'N', true, 2}},
  };
  return table;
}

int plain_budget(char c, bool aromatic) {
  if (aromatic) {
    switch (c) {
      case 'c': return 3;  // two ring bonds plus one substituent; pi is implicit
      case 'n': return 3;  // pyridine (2), pyrrole-type or bridgehead (3)
      case 'o':
      case 's': return 2;  // ring bonds only
    }
    return 0;
  }
  switch (c) {
    case 'C': return 4;
    case 'N': return 3;
    case 'O': return 2;
    case 'S': return 2;  // 6 allowed only in the sulfonyl environment
    case 'F':
    case 'I': return 1;
    default: return 0;
  }
}

// Shortest cycle through a ring-closure bond: 1 + shortest path between its
// endpoints that avoids the closure bond itself.  Returns the member atoms.
std::optional<std::vector<int>> closure_ring(const MolGraph& g, int bond_idx) {
  const Bond& closure = g.bonds[static_cast<std::size_t>(bond_idx)];
  std::vector<int> prev(g.atoms.size(), -2);
  std::deque<int> queue;
  queue.push_back(closure.a);
  prev[static_cast<std::size_t>(closure.a)] = -1;
  while (!queue.empty()) {
    int at = queue.front();
    queue.pop_front();
    if (at == closure.b) break;
    for (auto [nb, bidx] : g.adj[static_cast<std::size_t>(at)]) {
      if (bidx == bond_idx) continue;
      if (prev[static_cast<std::size_t>(nb)] != -2) continue;
      prev[static_cast<std::size_t>(nb)] = at;
      queue.push_back(nb);
    }
  }
  if (prev[static_cast<std::size_t>(closure.b)] == -2) return std::nullopt;
  std::vector<int> members;
  for (int at = closure.b; at != -1; at = prev[static_cast<std::size_t>(at)]) members.push_back(at);
  return members;
}

struct Scanner {
  std::string_view s;
  const OracleLimits& limits;
  ValidityReport& report;
  MolGraph graph;

  int last_atom = -1;
  int pending_order = 0;  // 0 = default single
  std::vector<int> branch_stack;
  std::map<std::string, std::pair<int, int>> open_numerals;  // text -> (atom, order)

  void fail(std::size_t pos, std::string kind, std::string message) {
    report.violations.push_back({std::move(kind), pos, std::move(message)});
  }

  int add_atom(char element, bool aromatic, int budget, std::size_t pos, bool plain_s = false) {
    Atom a;
    a.element = element;
    a.aromatic = aromatic;
    a.budget = budget;
    a.plain_sulfur = plain_s;
    a.position = pos;
    graph.atoms.push_back(a);
    graph.adj.emplace_back();
    int idx = static_cast<int>(graph.atoms.size()) - 1;
    if (last_atom >= 0) {
      graph.add_bond(last_atom, idx, pending_order == 0 ? 1 : pending_order, false);
    } else if (pending_order != 0) {
      fail(pos, "dangling-bond", "bond symbol with no preceding atom");
    }
    pending_order = 0;
    last_atom = idx;
    return idx;
  }

  void close_numeral(const std::string& text, std::size_t pos) {
    if (last_atom < 0) {
      fail(pos, "stray-numeral", "ring-closure numeral before any atom");
      pending_order = 0;
      return;
    }
    int order = pending_order == 0 ? 1 : pending_order;
    pending_order = 0;
    auto it = open_numerals.find(text);
    if (it == open_numerals.end()) {
      open_numerals.emplace(text, std::make_pair(last_atom, order));
      return;
    }
    auto [other, open_order] = it->second;
    open_numerals.erase(it);
    if (other == last_atom) {
      fail(pos, "self-ring", "numeral '" + text + "' opens and closes on the same atom");
      return;
    }
    graph.add_bond(other, last_atom, std::max(order, open_order), true);
  }

  void scan() {
    std::size_t i = 0;
    const std::size_t n = s.size();
    while (i < n) {
      const char c = s[i];
      switch (c) {
        case '=': pending_order = 2; ++i; continue;
        case '#': pending_order = 3; ++i; continue;
        case '/':
        case '\\': pending_order = 1; ++i; continue;  // stereo bonds: single
        case '-': pending_order = 1; ++i; continue;
        case '(':
          if (last_atom < 0) {
            fail(i, "stray-branch", "branch before any atom");
          } else {
            branch_stack.push_back(last_atom);
          }
          ++i;
          continue;
        case ')':
          if (pending_order != 0) {
            fail(i, "dangling-bond", "bond symbol before ')'");
            pending_order = 0;
          }
          if (branch_stack.empty()) {
            fail(i, "unbalanced-branch", "')' without matching '('");
          } else {
            last_atom = branch_stack.back();
            branch_stack.pop_back();
          }
          ++i;
          continue;
        case '[': {
          std::size_t close = s.find(']', i + 1);
          if (close == std::string_view::npos) {
            fail(i, "unterminated-bracket", "missing ']'");
            i = n;
            continue;
          }
          std::string content(s.substr(i + 1, close - i - 1));
          auto it = bracket_table().find(content);
          if (it == bracket_table().end()) {
            fail(i, "unknown-bracket", "bracket atom [" + content + "] not in vocabulary");
            add_atom('?', false, 8, i);  // keep scanning
          } else {
            add_atom(it->second.element, it->second.aromatic, it->second.budget, i);
          }
          i = close + 1;
          continue;
        }
        case '%': {
          if (i + 2 < n && std::isdigit(static_cast<unsigned char>(s[i + 1])) &&
              std::isdigit(static_cast<unsigned char>(s[i + 2]))) {
            close_numeral(std::string(s.substr(i, 3)), i);
            i += 3;
          } else {
            fail(i, "bad-numeral", "'%' without two digits");
            ++i;
          }
          continue;
        }
        default: break;
      }
      if (c >= '1' && c <= '9') {
        close_numeral(std::string(1, c), i);
        ++i;
        continue;
      }
      if (c == 'C' && i + 1 < n && s[i + 1] == 'l') {
        add_atom('L', false, 1, i);
        i += 2;
        continue;
      }
      if (c == 'B' && i + 1 < n && s[i + 1] == 'r') {
        add_atom('B', false, 1, i);
        i += 2;
        continue;
      }
      if (c == 'C' || c == 'N' || c == 'O' || c == 'F' || c == 'I') {
        add_atom(c, false, plain_budget(c, false), i);
        ++i;
        continue;
      }
      if (c == 'S') {
        add_atom('S', false, plain_budget('S', false), i, true);
        ++i;
        continue;
      }
      if (c == 'c' || c == 'n' || c == 'o' || c == 's') {
        add_atom(static_cast<char>(std::toupper(static_cast<unsigned char>(c))), true,
                 plain_budget(c, true), i);
        ++i;
        continue;
      }
      fail(i, "unexpected-character", std::string("cannot read '") + c + "'");
      ++i;
    }

    if (pending_order != 0) fail(n, "dangling-bond", "trailing bond symbol");
    if (!branch_stack.empty()) fail(n, "unbalanced-branch", "unclosed '('");
    for (const auto& [text, open] : open_numerals) {
      fail(graph.atoms[static_cast<std::size_t>(open.first)].position, "unclosed-ring",
           "numeral '" + text + "' never closed");
    }
  }

  void analyze() {
    report.atom_count = static_cast<int>(graph.atoms.size());
    if (graph.atoms.empty() && report.violations.empty()) {
      fail(0, "empty", "no atoms");
    }

    // Valence: explicit bond orders must fit each atom's budget.
    for (std::size_t a = 0; a < graph.atoms.size(); ++a) {
      const Atom& atom = graph.atoms[a];
      int sum = 0;
      for (auto [nb, bidx] : graph.adj[a]) {
        (void)nb;
        sum += graph.bonds[static_cast<std::size_t>(bidx)].order;
      }
      if (sum <= atom.budget) continue;
      if (atom.plain_sulfur && sum == 6) {
        int double_o = 0;
        for (auto [nb, bidx] : graph.adj[a]) {
          if (graph.bonds[static_cast<std::size_t>(bidx)].order == 2 &&
              graph.atoms[static_cast<std::size_t>(nb)].element == 'O' &&
              !graph.atoms[static_cast<std::size_t>(nb)].aromatic) {
            ++double_o;
          }
        }
        if (double_o >= 2) continue;  // sulfonyl S(=O)(=O)
      }
      fail(atom.position, "valence",
           std::string("atom '") + atom.element + "' uses " + std::to_string(sum) +
               " bonds, budget " + std::to_string(atom.budget));
    }

    // Rings, one per closure bond.
    std::vector<char> in_aromatic_ring(graph.atoms.size(), 0);
    for (std::size_t b = 0; b < graph.bonds.size(); ++b) {
      if (!graph.bonds[b].ring_closure) continue;
      auto members = closure_ring(graph, static_cast<int>(b));
      if (!members) continue;  // disconnected closure; pairing errors already flagged
      int size = static_cast<int>(members->size());
      report.ring_sizes.push_back(size);
      std::size_t pos = graph.atoms[static_cast<std::size_t>(graph.bonds[b].b)].position;
      if (size < limits.min_ring_size) {
        fail(pos, "ring-too-small", "ring of " + std::to_string(size) + " atoms");
      } else if (size > limits.max_ring_size) {
        fail(pos, "ring-too-large", "ring of " + std::to_string(size) + " atoms");
      }
      bool all_aromatic = std::all_of(members->begin(), members->end(), [&](int at) {
        return graph.atoms[static_cast<std::size_t>(at)].aromatic;
      });
      if (all_aromatic) {
        ++report.aromatic_ring_count;
        if (size != 5 && size != 6) {
          fail(pos, "aromatic-ring-size", "aromatic ring of " + std::to_string(size) + " atoms");
        }
        bool has_os = false;
        for (int at : *members) {
          char e = graph.atoms[static_cast<std::size_t>(at)].element;
          if (e == 'O' || e == 'S') has_os = true;
        }
        if (has_os && size != 5) {
          fail(pos, "aromatic-os-placement", "aromatic O/S outside a 5-ring");
        }
        for (int at : *members) in_aromatic_ring[static_cast<std::size_t>(at)] = 1;
      }
    }

    for (std::size_t a = 0; a < graph.atoms.size(); ++a) {
      if (graph.atoms[a].aromatic && !in_aromatic_ring[a]) {
        fail(graph.atoms[a].position, "aromatic-outside-ring",
             "lowercase atom not part of a closed aromatic cycle");
      }
    }
  }
};

}  // namespace

ValidityReport check(std::string_view smiles, const OracleLimits& limits) {
  ValidityReport report;
  Scanner scanner{smiles, limits, report, {}};
  scanner.scan();
  scanner.analyze();
  report.valid = report.violations.empty();
  return report;
}

int count_aromatic_rings(std::string_view smiles) {
  return check(smiles).aromatic_ring_count;
}

}  // namespace molgen::oracle
