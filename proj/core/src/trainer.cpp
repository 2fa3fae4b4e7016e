// SPDX-License-Identifier: Apache-2.0

#include "molgen/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "molgen/validity.hpp"

namespace molgen {
namespace {

using json = nlohmann::json;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return child_seed(a, b ^ 0xa5a5a5a5ull); }

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw TrainError("batch_size must be >= 1");
  if (lr < 0.0) throw TrainError("lr must be non-negative");
  if (w_a < 0.0) throw TrainError("w_a must be non-negative");
  if (epochs < 0 || iterations < 0) throw TrainError("epochs/iterations must be non-negative");
  if (invalid_streak_limit < 1) throw TrainError("invalid_streak_limit must be >= 1");
  reward.validate();
}

std::string IterationDiagnostics::to_json() const {
  json j = {{"iteration", iteration},
            {"loss", loss},
            {"eval_loss", eval_loss},
            {"mean_reward", mean_reward},
            {"max_reward", max_reward},
            {"best_smiles", best_smiles},
            {"validity_fraction", validity_fraction},
            {"anchor_distance", anchor_distance},
            {"skipped", skipped}};
  return j.dump();
}

RunWriter::RunWriter(std::string dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
  std::filesystem::create_directories(dir_ + "/checkpoints");
}

void RunWriter::write_config(const std::string& json_text) const {
  std::ofstream f(dir_ + "/config.json", std::ios::trunc);
  if (!f) throw IoError("cannot write run config in " + dir_);
  f << json_text << '\n';
}

void RunWriter::append_diagnostics(const IterationDiagnostics& d) const {
  std::ofstream f(dir_ + "/diagnostics.jsonl", std::ios::app);
  if (!f) throw IoError("cannot append diagnostics in " + dir_);
  f << d.to_json() << '\n';
}

std::string RunWriter::checkpoint_path(std::int64_t iteration) const {
  return dir_ + "/checkpoints/ckpt_" + std::to_string(iteration) + ".bin";
}

void RunWriter::write_best(std::vector<std::pair<double, std::string>> scored) const {
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::ofstream f(dir_ + "/best.jsonl", std::ios::trunc);
  if (!f) throw IoError("cannot write best molecules in " + dir_);
  for (const auto& [total, smiles] : scored) {
    f << json({{"score", total}, {"smiles", smiles}}).dump() << '\n';
  }
}

namespace {

// Mean pretrain loss and gradient over a batch of mask-consistent
// derivations; gradient scaled by 1/batch.
double batch_pretrain_loss(const TransformerPolicy& policy, const AttributeEngine& engine,
                           std::span<const Derivation* const> batch, MaskMode mode,
                           std::vector<double>* grad) {
  double total = 0.0;
  for (const Derivation* d : batch) {
    ReplayResult rr = replay(engine, d->rule_ids, /*collect_masks=*/true);
    if (!rr.ok) throw TrainError("mask-inconsistent derivation in batch: " + rr.message);
    total += pretrain_loss(policy, d->rule_ids, rr.masks, mode, grad);
  }
  const double scale = 1.0 / static_cast<double>(batch.size());
  if (grad) {
    for (double& g : *grad) g *= scale;
  }
  return total * scale;
}

double on_policy_eval_loss(const TransformerPolicy& policy, const AttributeEngine& engine,
                           const TrainConfig& cfg, std::uint64_t seed) {
  RolloutOptions opts;
  opts.mask_mode = cfg.mask_mode;
  opts.keep_records = false;
  auto batch = rollout_batch(engine, policy, seed, cfg.batch_size, opts);
  double loss = 0.0;
  for (const RolloutResult& r : batch) {
    loss -= std::accumulate(r.log_probs.begin(), r.log_probs.end(), 0.0);
  }
  return loss / static_cast<double>(batch.size());
}

}  // namespace

PretrainResult pretrain(TransformerPolicy& policy, const AttributeEngine& engine,
                        std::span<const Derivation> corpus, const TrainConfig& cfg, Adam& adam,
                        const RunWriter* run) {
  cfg.validate();
  if (corpus.empty()) throw TrainError("pretrain: empty corpus");

  PretrainResult result;

  // Replay every derivation once up front; inconsistent ones are skipped
  // and counted, not fatal.
  std::vector<const Derivation*> usable;
  for (const Derivation& d : corpus) {
    if (replay(engine, d.rule_ids).ok) {
      usable.push_back(&d);
    } else {
      ++result.skipped_derivations;
    }
  }
  if (usable.empty()) throw TrainError("pretrain: no mask-consistent derivations");

  const std::vector<double> initial = policy.parameters();
  std::vector<double> grad;
  std::int64_t iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<const Derivation*> order = usable;
    std::shuffle(order.begin(), order.end(), Rng(mix(cfg.seed, static_cast<std::uint64_t>(epoch))));
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const Derivation* const> batch(order.data() + start, end - start);

      grad.assign(policy.parameters().size(), 0.0);
      IterationDiagnostics diag;
      diag.iteration = iteration;
      diag.loss = batch_pretrain_loss(policy, engine, batch, cfg.mask_mode, &grad);
      adam.step(policy.parameters(), grad);

      diag.eval_loss = on_policy_eval_loss(policy, engine, cfg,
                                           mix(cfg.seed, 0x9000u + static_cast<std::uint64_t>(iteration)));
      diag.anchor_distance = squared_distance(policy.parameters(), initial);
      if (run) run->append_diagnostics(diag);
      result.log.push_back(std::move(diag));
      ++iteration;
    }
  }
  return result;
}

int select_best(std::span<const ScoreBreakdown> scores) {
  int best = -1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!scores[i].ok) continue;
    if (best < 0 || scores[i].total > scores[static_cast<std::size_t>(best)].total) {
      best = static_cast<int>(i);
    }
  }
  return best;
}

OptimizeResult optimize(TransformerPolicy& policy, const AttributeEngine& engine,
                        std::span<const double> p_base, const TrainConfig& cfg,
                        const ScorerPlugin& scorer, Adam& adam, const RunWriter* run,
                        std::int64_t start_iteration) {
  cfg.validate();
  if (p_base.size() != policy.parameters().size()) {
    throw TrainError("p_base does not match policy parameters");
  }

  OptimizeResult result;
  RolloutOptions opts;
  opts.mask_mode = cfg.mask_mode;
  opts.keep_records = false;

  int invalid_streak = 0;
  std::vector<double> grad;
  for (std::int64_t it = start_iteration; it < start_iteration + cfg.iterations; ++it) {
    auto batch = rollout_batch(engine, policy, mix(cfg.seed, static_cast<std::uint64_t>(it)),
                               cfg.batch_size, opts);

    std::vector<std::string> smiles;
    smiles.reserve(batch.size());
    for (const auto& r : batch) smiles.push_back(r.smiles);
    std::vector<ScoreBreakdown> scores;
    scores.reserve(batch.size());
    for (const std::string& s : smiles) scores.push_back(score(s, cfg.reward, scorer));

    IterationDiagnostics diag;
    diag.iteration = it;
    int n_ok = 0;
    double sum = 0.0;
    for (const auto& b : scores) {
      if (!b.ok) continue;
      ++n_ok;
      sum += b.total;
    }
    diag.validity_fraction = static_cast<double>(n_ok) / static_cast<double>(batch.size());
    const int best = select_best(scores);
    if (best < 0) {
      diag.skipped = true;
      ++invalid_streak;
      if (run) run->append_diagnostics(diag);
      result.log.push_back(std::move(diag));
      if (invalid_streak > cfg.invalid_streak_limit) {
        result.aborted = true;
        result.next_iteration = it + 1;
        return result;
      }
      continue;
    }
    invalid_streak = 0;
    diag.mean_reward = sum / static_cast<double>(n_ok);
    diag.max_reward = scores[static_cast<std::size_t>(best)].total;
    diag.best_smiles = smiles[static_cast<std::size_t>(best)];
    result.best_molecules.emplace_back(diag.max_reward, diag.best_smiles);

    const auto& best_rules = batch[static_cast<std::size_t>(best)].derivation.rule_ids;
    ReplayResult rr = replay(engine, best_rules, /*collect_masks=*/true);
    if (!rr.ok) throw TrainError("sampled derivation failed mask replay: " + rr.message);

    grad.assign(policy.parameters().size(), 0.0);
    diag.loss = anchored_best_loss(policy, best_rules, rr.masks, p_base, cfg.w_a, cfg.mask_mode,
                                   &grad);
    adam.step(policy.parameters(), grad);
    diag.anchor_distance = squared_distance(policy.parameters(), p_base);

    if (run) {
      run->append_diagnostics(diag);
      if (cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0) {
        save_checkpoint(policy, run->checkpoint_path(it + 1), static_cast<std::uint64_t>(it + 1),
                        &adam);
      }
    }
    result.log.push_back(std::move(diag));
  }

  std::sort(result.best_molecules.begin(), result.best_molecules.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  result.next_iteration = start_iteration + cfg.iterations;
  return result;
}

void Histogram::add(double x) {
  if (counts.empty()) return;
  auto bin = static_cast<std::int64_t>(std::floor((x - lo) / width));
  bin = std::clamp<std::int64_t>(bin, 0, static_cast<std::int64_t>(counts.size()) - 1);
  ++counts[static_cast<std::size_t>(bin)];
}

namespace {

json histogram_json(const Histogram& h) {
  return json{{"lo", h.lo}, {"width", h.width}, {"counts", h.counts}};
}

Histogram make_histogram(double lo, double width, std::size_t bins) {
  Histogram h;
  h.lo = lo;
  h.width = width;
  h.counts.assign(bins, 0);
  return h;
}

struct ComponentSample {
  std::vector<double> logp, sa, aromatic;
};

ComponentSample component_sample(std::span<const std::string> smiles, const ScorerPlugin& scorer) {
  ComponentSample out;
  std::vector<std::string> batch(smiles.begin(), smiles.end());
  auto rows = scorer.evaluate_batch(batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!rows[i]) continue;
    auto report = oracle::check(batch[i]);
    out.logp.push_back(rows[i]->first);
    out.sa.push_back(rows[i]->second);
    out.aromatic.push_back(report.aromatic_ring_count);
  }
  return out;
}

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

}  // namespace

std::string ConvergenceReport::to_json() const {
  json j = {{"logp_mean_model", logp_mean_model},
            {"logp_mean_corpus", logp_mean_corpus},
            {"sa_mean_model", sa_mean_model},
            {"sa_mean_corpus", sa_mean_corpus},
            {"aromatic_mean_model", aromatic_mean_model},
            {"aromatic_mean_corpus", aromatic_mean_corpus},
            {"mean_abs_distance", mean_abs_distance},
            {"histograms",
             {{"logp_model", histogram_json(logp_model)},
              {"logp_corpus", histogram_json(logp_corpus)},
              {"sa_model", histogram_json(sa_model)},
              {"sa_corpus", histogram_json(sa_corpus)},
              {"aromatic_model", histogram_json(aromatic_model)},
              {"aromatic_corpus", histogram_json(aromatic_corpus)}}}};
  return j.dump(2);
}

ConvergenceReport convergence_report(std::span<const std::string> model_smiles,
                                     std::span<const std::string> corpus_smiles,
                                     const ScorerPlugin& scorer) {
  ConvergenceReport report;
  ComponentSample model = component_sample(model_smiles, scorer);
  ComponentSample corpus = component_sample(corpus_smiles, scorer);

  report.logp_mean_model = mean_of(model.logp);
  report.logp_mean_corpus = mean_of(corpus.logp);
  report.sa_mean_model = mean_of(model.sa);
  report.sa_mean_corpus = mean_of(corpus.sa);
  report.aromatic_mean_model = mean_of(model.aromatic);
  report.aromatic_mean_corpus = mean_of(corpus.aromatic);
  report.mean_abs_distance = (std::abs(report.logp_mean_model - report.logp_mean_corpus) +
                              std::abs(report.sa_mean_model - report.sa_mean_corpus) +
                              std::abs(report.aromatic_mean_model - report.aromatic_mean_corpus)) /
                             3.0;

  report.logp_model = make_histogram(-4.0, 0.5, 28);
  report.logp_corpus = make_histogram(-4.0, 0.5, 28);
  report.sa_model = make_histogram(-10.0, 0.5, 24);
  report.sa_corpus = make_histogram(-10.0, 0.5, 24);
  report.aromatic_model = make_histogram(0.0, 1.0, 12);
  report.aromatic_corpus = make_histogram(0.0, 1.0, 12);
  for (double x : model.logp) report.logp_model.add(x);
  for (double x : corpus.logp) report.logp_corpus.add(x);
  for (double x : model.sa) report.sa_model.add(x);
  for (double x : corpus.sa) report.sa_corpus.add(x);
  for (double x : model.aromatic) report.aromatic_model.add(x);
  for (double x : corpus.aromatic) report.aromatic_corpus.add(x);
  return report;
}

}  // namespace molgen
