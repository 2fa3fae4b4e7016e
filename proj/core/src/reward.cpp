// SPDX-License-Identifier: Apache-2.0

#include "molgen/reward.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "molgen/validity.hpp"

namespace molgen {
namespace {

using json = nlohmann::json;

// Per-atom logP contributions for the surrogate scorer.
const std::map<std::string, double, std::less<>>& logp_table() {
  static const std::map<std::string, double, std::less<>> table = {
      {"C", 0.14},      {"c", 0.30},     {"N", -0.60},    {"n", -0.40},   {"O", -0.45},
      {"o", -0.25},     {"S", 0.10},     {"s", 0.25},     {"F", 0.20},    {"Cl", 0.65},
      {"Br", 0.90},     {"I", 1.10},     {"[C@H]", 0.14}, {"[C@@H]", 0.14},
      {"[C@]", 0.14},   {"[C@@]", 0.14}, {"[N+]", -0.85}, {"[NH+]", -0.80},
      {"[NH3+]", -1.05}, {"[O-]", -0.80}, {"[nH]", -0.55},
  };
  return table;
}

struct SurrogateScan {
  bool ok = true;
  double logp = 0.0;
  int atoms = 0;
  int ring_pairs = 0;
  std::set<std::string> bracket_kinds;
};

SurrogateScan scan_for_surrogate(std::string_view s) {
  SurrogateScan out;
  std::set<std::string> open_numerals;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (c == '[') {
      std::size_t close = s.find(']', i);
      if (close == std::string_view::npos) {
        out.ok = false;
        return out;
      }
      std::string atom(s.substr(i, close - i + 1));
      auto it = logp_table().find(atom);
      if (it == logp_table().end()) {
        out.ok = false;
        return out;
      }
      out.logp += it->second;
      out.atoms += 1;
      out.bracket_kinds.insert(atom);
      i = close + 1;
      continue;
    }
    if (c == '%') {
      if (i + 2 >= s.size()) {
        out.ok = false;
        return out;
      }
      std::string numeral(s.substr(i, 3));
      if (open_numerals.erase(numeral) == 0) {
        open_numerals.insert(numeral);
      } else {
        out.ring_pairs += 1;
      }
      i += 3;
      continue;
    }
    if (c >= '1' && c <= '9') {
      std::string numeral(1, c);
      if (open_numerals.erase(numeral) == 0) {
        open_numerals.insert(numeral);
      } else {
        out.ring_pairs += 1;
      }
      ++i;
      continue;
    }
    if (c == '(' || c == ')' || c == '=' || c == '#' || c == '/' || c == '\\' || c == '-') {
      ++i;
      continue;
    }
    std::string atom;
    if ((c == 'C' && i + 1 < s.size() && s[i + 1] == 'l') ||
        (c == 'B' && i + 1 < s.size() && s[i + 1] == 'r')) {
      atom = std::string(s.substr(i, 2));
      i += 2;
    } else {
      atom = std::string(1, c);
      ++i;
    }
    auto it = logp_table().find(atom);
    if (it == logp_table().end()) {
      out.ok = false;
      return out;
    }
    out.logp += it->second;
    out.atoms += 1;
  }
  if (!open_numerals.empty()) out.ok = false;
  return out;
}

}  // namespace

void RewardConfig::validate() const {
  if (w_sa < 0.0 || w_ac < 0.0) throw RewardError("penalty weights must be non-negative");
  if (logp.stddev <= 0.0 || sa.stddev <= 0.0 || cycle.stddev <= 0.0) {
    throw RewardError("normalization std must be positive");
  }
}

std::optional<std::pair<double, double>> ScorerPlugin::evaluate(std::string_view smiles) const {
  auto rows = evaluate_batch({std::string(smiles)});
  return rows.empty() ? std::nullopt : rows.front();
}

std::vector<std::optional<std::pair<double, double>>> SurrogateScorer::evaluate_batch(
    const std::vector<std::string>& smiles) const {
  std::vector<std::optional<std::pair<double, double>>> out;
  out.reserve(smiles.size());
  for (const std::string& s : smiles) {
    SurrogateScan scan = scan_for_surrogate(s);
    if (!scan.ok) {
      out.push_back(std::nullopt);
      continue;
    }
    const double sa = -(0.5 * scan.ring_pairs + 0.1 * scan.atoms +
                        1.0 * static_cast<double>(scan.bracket_kinds.size()));
    out.emplace_back(std::make_pair(scan.logp, sa));
  }
  return out;
}

std::vector<std::optional<std::pair<double, double>>> ExternalScorer::evaluate_batch(
    const std::vector<std::string>& smiles) const {
  namespace fs = std::filesystem;
  std::vector<std::optional<std::pair<double, double>>> out(smiles.size());

  static std::mt19937_64 rng(std::random_device{}());
  const fs::path dir = fs::temp_directory_path();
  const std::string tag = "molgen_score_" + std::to_string(rng());
  const fs::path in_path = dir / (tag + ".in");
  const fs::path out_path = dir / (tag + ".out");

  {
    std::ofstream in(in_path);
    if (!in) throw IoError("cannot write scorer input: " + in_path.string());
    for (const std::string& s : smiles) in << s << '\n';
  }

  const std::string cmd = command_ + " " + in_path.string() + " " + out_path.string();
  const int rc = std::system(cmd.c_str());

  std::vector<std::string> lines;
  {
    std::ifstream result(out_path);
    std::string line;
    while (std::getline(result, line)) lines.push_back(line);
  }
  std::error_code ec;
  fs::remove(in_path, ec);
  fs::remove(out_path, ec);

  if (rc != 0 || lines.size() != smiles.size()) {
    return out;  // whole batch marked failed
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::istringstream row(lines[i]);
    std::string logp_s, sa_s;
    if (!std::getline(row, logp_s, '\t') || !std::getline(row, sa_s)) continue;
    try {
      out[i] = std::make_pair(std::stod(logp_s), std::stod(sa_s));
    } catch (const std::exception&) {
      // NA or malformed: leave the failure sentinel
    }
  }
  return out;
}

std::unique_ptr<ScorerPlugin> make_scorer(const std::string& spec) {
  if (spec.empty() || spec == "surrogate") return std::make_unique<SurrogateScorer>();
  constexpr std::string_view prefix = "external:";
  if (spec.rfind(prefix, 0) == 0) {
    return std::make_unique<ExternalScorer>(spec.substr(prefix.size()));
  }
  throw RewardError("unknown scorer: " + spec);
}

double cycle_penalty(std::string_view smiles) {
  auto report = oracle::check(smiles, {3, 1 << 20});  // size limits are not this function's job
  int largest = 0;
  for (int size : report.ring_sizes) largest = std::max(largest, size);
  return -std::max(0, largest - 6);
}

double normalize(double raw, double mean, double stddev) {
  if (stddev <= 0.0) throw RewardError("normalization std must be positive");
  return (raw - mean) / stddev;
}

ScoreBreakdown score(std::string_view smiles, const RewardConfig& cfg, const ScorerPlugin& scorer) {
  cfg.validate();
  ScoreBreakdown b;

  auto report = oracle::check(smiles);
  if (!report.valid) {
    b.error = "invalid molecule";
    return b;
  }
  auto raw = scorer.evaluate(smiles);
  if (!raw) {
    b.error = "scorer failure";
    return b;
  }
  b.logp_raw = raw->first;
  b.sa_raw = raw->second;
  int largest = 0;
  for (int size : report.ring_sizes) largest = std::max(largest, size);
  b.cycle_raw = -std::max(0, largest - 6);
  b.aromatic_cycles = report.aromatic_ring_count;

  b.logp_norm = normalize(b.logp_raw, cfg.logp.mean, cfg.logp.stddev);
  b.sa_norm = normalize(b.sa_raw, cfg.sa.mean, cfg.sa.stddev);
  b.cycle_norm = normalize(b.cycle_raw, cfg.cycle.mean, cfg.cycle.stddev);
  b.total = b.logp_norm + b.sa_norm + b.cycle_norm + cfg.w_sa * std::min(b.sa_norm, 0.0) -
            cfg.w_ac * std::max(b.aromatic_cycles - 5, 0);
  b.ok = true;
  return b;
}

ComponentStats corpus_normalization(std::span<const std::string> smiles,
                                    const ScorerPlugin& scorer) {
  std::vector<double> logp, sa, cycle;
  ComponentStats stats;
  std::vector<std::string> batch(smiles.begin(), smiles.end());
  auto rows = scorer.evaluate_batch(batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto report = oracle::check(batch[i]);
    if (!report.valid || !rows[i]) {
      ++stats.skipped;
      continue;
    }
    logp.push_back(rows[i]->first);
    sa.push_back(rows[i]->second);
    int largest = 0;
    for (int size : report.ring_sizes) largest = std::max(largest, size);
    cycle.push_back(-std::max(0, largest - 6));
  }
  stats.scored = logp.size();
  if (stats.scored < 2) throw RewardError("normalization needs at least two scoreable molecules");

  auto fit = [](const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    const double stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    if (stddev <= 0.0) throw RewardError("constant reward component; std would be zero");
    return Normalization{mean, stddev};
  };
  stats.logp = fit(logp);
  stats.sa = fit(sa);
  stats.cycle = fit(cycle);
  return stats;
}

std::string normalization_to_json(const ComponentStats& stats) {
  json j = {{"logp", {{"mean", stats.logp.mean}, {"std", stats.logp.stddev}}},
            {"sa", {{"mean", stats.sa.mean}, {"std", stats.sa.stddev}}},
            {"cycle", {{"mean", stats.cycle.mean}, {"std", stats.cycle.stddev}}}};
  return j.dump(2);
}

void load_normalization_json(const std::string& text, RewardConfig& cfg) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw RewardError(std::string("bad normalization JSON: ") + e.what());
  }
  auto read = [&](const char* key, Normalization& n) {
    if (!j.contains(key)) throw RewardError(std::string("normalization JSON misses ") + key);
    n.mean = j.at(key).at("mean").get<double>();
    n.stddev = j.at(key).at("std").get<double>();
  };
  read("logp", cfg.logp);
  read("sa", cfg.sa);
  read("cycle", cfg.cycle);
  cfg.validate();
}

}  // namespace molgen
