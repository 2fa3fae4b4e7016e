// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "molgen/derivation.hpp"
#include "molgen/optim.hpp"
#include "molgen/policy.hpp"
#include "molgen/reward.hpp"
#include "molgen/sampler.hpp"

namespace molgen {

class TrainError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  int batch_size = 40;
  double lr = 1e-4;
  double w_a = 0.0;
  RewardConfig reward;
  int epochs = 1;       // pretrain
  int iterations = 0;   // optimize
  std::uint64_t seed = 0;
  MaskMode mask_mode = MaskMode::exclude;
  int invalid_streak_limit = 25;
  int checkpoint_every = 0;  // 0 = only final

  void validate() const;
};

/// One training-loop log line; unused fields stay at their defaults.
struct IterationDiagnostics {
  std::int64_t iteration = 0;
  double loss = 0.0;
  double eval_loss = 0.0;       // pretrain: on-policy evaluation batch
  double mean_reward = 0.0;
  double max_reward = 0.0;
  std::string best_smiles;
  double validity_fraction = 0.0;
  double anchor_distance = 0.0;
  bool skipped = false;

  std::string to_json() const;
};

/// Append-only training run directory: config snapshot, JSONL diagnostics,
/// periodic checkpoints, final best-molecule list.
class RunWriter {
 public:
  explicit RunWriter(std::string dir);
  const std::string& dir() const { return dir_; }
  void write_config(const std::string& json_text) const;
  void append_diagnostics(const IterationDiagnostics& d) const;
  std::string checkpoint_path(std::int64_t iteration) const;
  void write_best(std::vector<std::pair<double, std::string>> scored) const;  // sorted desc

 private:
  std::string dir_;
};

struct PretrainResult {
  std::vector<IterationDiagnostics> log;
  std::size_t skipped_derivations = 0;  // mask-inconsistent corpus entries
};

/// Off-policy phase: Adam on the mean batch pretrain loss over corpus
/// derivations; after each update one non-updating on-policy evaluation
/// batch is logged.
PretrainResult pretrain(TransformerPolicy& policy, const AttributeEngine& engine,
                        std::span<const Derivation> corpus, const TrainConfig& cfg, Adam& adam,
                        const RunWriter* run = nullptr);

/// Index of the best-scoring valid molecule; ties break to the lowest
/// index; -1 when nothing in the batch is scoreable.
int select_best(std::span<const ScoreBreakdown> scores);

struct OptimizeResult {
  std::vector<IterationDiagnostics> log;
  std::vector<std::pair<double, std::string>> best_molecules;  // (score, smiles), desc
  bool aborted = false;
  std::int64_t next_iteration = 0;
};

/// On-policy phase: best-of-batch policy gradient with base-model
/// anchoring.  The reward picks the batch argmax only; its value never
/// enters the loss.  Iterations with no scoreable molecule change no
/// parameters; `invalid_streak_limit` consecutive ones abort the run.
OptimizeResult optimize(TransformerPolicy& policy, const AttributeEngine& engine,
                        std::span<const double> p_base, const TrainConfig& cfg,
                        const ScorerPlugin& scorer, Adam& adam, const RunWriter* run = nullptr,
                        std::int64_t start_iteration = 0);

struct Histogram {
  double lo = 0.0;
  double width = 1.0;
  std::vector<std::int64_t> counts;
  void add(double x);
};

struct ConvergenceReport {
  double logp_mean_model = 0.0, logp_mean_corpus = 0.0;
  double sa_mean_model = 0.0, sa_mean_corpus = 0.0;
  double aromatic_mean_model = 0.0, aromatic_mean_corpus = 0.0;
  double mean_abs_distance = 0.0;  // mean over components of |model - corpus|
  Histogram logp_model, logp_corpus, sa_model, sa_corpus, aromatic_model, aromatic_corpus;

  std::string to_json() const;
};

/// Distribution comparison between model samples and a corpus sample over
/// the raw reward components.
ConvergenceReport convergence_report(std::span<const std::string> model_smiles,
                                     std::span<const std::string> corpus_smiles,
                                     const ScorerPlugin& scorer);

}  // namespace molgen
