// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "molgen/grammar.hpp"

namespace molgen {

class RewardError : public Error {
 public:
  using Error::Error;
};

struct Normalization {
  double mean = 0.0;
  double stddev = 1.0;
};

struct RewardConfig {
  double w_sa = 0.0;  // weight on min(SA_norm, 0)
  double w_ac = 0.0;  // weight on max(aromatic_cycles - 5, 0)
  Normalization logp, sa, cycle;

  void validate() const;
};

struct ScoreBreakdown {
  bool ok = false;  // false: invalid molecule or scorer failure; excluded from best-of-batch
  std::string error;
  double logp_raw = 0.0, sa_raw = 0.0, cycle_raw = 0.0;
  double logp_norm = 0.0, sa_norm = 0.0, cycle_norm = 0.0;
  int aromatic_cycles = 0;
  double total = 0.0;
};

/// logP/SA scorer interface.  Implementations must be deterministic per
/// input; a nullopt entry marks a scoring failure for that molecule.
class ScorerPlugin {
 public:
  virtual ~ScorerPlugin() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::optional<std::pair<double, double>>> evaluate_batch(
      const std::vector<std::string>& smiles) const = 0;

  std::optional<std::pair<double, double>> evaluate(std::string_view smiles) const;
};

/// Dependency-free deterministic scorer: logP as a sum of per-atom
/// contributions from a fixed table (aromatic carbon and halogens positive,
/// N/O negative), SA as -(0.5*rings + 0.1*atoms + 1.0*bracket kinds).
/// Preserves the optimization-pressure structure of the real metrics; the
/// values are not comparable to chemistry-toolkit numbers.
class SurrogateScorer : public ScorerPlugin {
 public:
  std::string name() const override { return "surrogate"; }
  std::vector<std::optional<std::pair<double, double>>> evaluate_batch(
      const std::vector<std::string>& smiles) const override;
};

/// Scores through an external command:
///   command <input-file> <output-file>
/// input: one SMILES per line (UTF-8, '\n' line ends); output: one
/// tab-separated "logP<TAB>SA" row per input line, "NA" fields marking
/// failures.
class ExternalScorer : public ScorerPlugin {
 public:
  explicit ExternalScorer(std::string command) : command_(std::move(command)) {}
  std::string name() const override { return "external:" + command_; }
  std::vector<std::optional<std::pair<double, double>>> evaluate_batch(
      const std::vector<std::string>& smiles) const override;

 private:
  std::string command_;
};

std::unique_ptr<ScorerPlugin> make_scorer(const std::string& spec);

/// -max(0, largest ring - 6); 0 for acyclic molecules.
double cycle_penalty(std::string_view smiles);

/// (raw - mean) / std; std must be positive.
double normalize(double raw, double mean, double stddev);

/// Full reward:
///   total = logp_n + sa_n + cycle_n + w_sa*min(sa_n, 0)
///           - w_ac*max(aromatic_cycles - 5, 0)
ScoreBreakdown score(std::string_view smiles, const RewardConfig& cfg, const ScorerPlugin& scorer);

struct ComponentStats {
  Normalization logp, sa, cycle;
  std::size_t scored = 0;
  std::size_t skipped = 0;
};

/// Sample mean and standard deviation of each reward component over a
/// molecule set; requires at least two scoreable molecules and positive
/// spread in every component.
ComponentStats corpus_normalization(std::span<const std::string> smiles,
                                    const ScorerPlugin& scorer);

std::string normalization_to_json(const ComponentStats& stats);
void load_normalization_json(const std::string& text, RewardConfig& cfg);

}  // namespace molgen
