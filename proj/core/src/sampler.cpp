// SPDX-License-Identifier: Apache-2.0

#include "molgen/sampler.hpp"

#include <cmath>

namespace molgen {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t child_seed(std::uint64_t batch_seed, std::uint64_t index) {
  return splitmix64(batch_seed ^ splitmix64(index + 1));
}

StepRecord sample_step(DerivationState& state, PolicySession& session, Rng& rng,
                       const RolloutOptions& opts) {
  const Grammar& g = state.engine().grammar();
  const std::size_t vocab = g.rule_count();

  StepRecord rec;
  std::vector<double> logits(vocab);
  session.next_logits(logits);
  std::vector<char> mask;
  state.combined_mask(mask);

  std::vector<double> probs(vocab);
  masked_softmax(logits, mask, opts.mask_mode, probs);

  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  int chosen = -1;
  double acc = 0.0;
  for (std::size_t j = 0; j < vocab; ++j) {
    acc += probs[j];
    if (u < acc) {
      chosen = static_cast<int>(j);
      break;
    }
  }
  if (chosen < 0) {  // numerical tail: take the last allowed rule
    for (std::size_t j = vocab; j-- > 0;) {
      if (mask[j]) {
        chosen = static_cast<int>(j);
        break;
      }
    }
  }
  if (chosen < 0 || !mask[static_cast<std::size_t>(chosen)]) {
    throw MaskViolation("sampled a masked rule\n" + state.dump());
  }

  rec.chosen = chosen;
  rec.log_prob = masked_log_prob(logits, mask, chosen, opts.mask_mode);
  if (opts.keep_logits) {
    rec.logits = std::move(logits);
    rec.mask = std::move(mask);
  }
  state.apply(chosen);
  session.advance(chosen);
  return rec;
}

RolloutResult rollout(const AttributeEngine& engine, const Policy& policy, Rng& rng,
                      const RolloutOptions& opts) {
  if (policy.vocab() != static_cast<int>(engine.grammar().rule_count())) {
    throw PolicyError("policy vocab does not match grammar rule count");
  }
  RolloutResult result;
  DerivationState state(engine);
  auto session = policy.session();
  while (!state.complete()) {
    if (state.steps_used() >= engine.config().max_steps) {
      throw MaskViolation("rollout exceeded max_steps\n" + state.dump());
    }
    StepRecord rec = sample_step(state, *session, rng, opts);
    result.log_probs.push_back(rec.log_prob);
    if (opts.keep_records) result.steps.push_back(std::move(rec));
  }
  result.derivation.rule_ids = state.rule_history();
  result.smiles = state.emitted();
  result.steps_used = state.steps_used();
  return result;
}

std::vector<RolloutResult> rollout_batch(const AttributeEngine& engine, const Policy& policy,
                                         std::uint64_t batch_seed, int batch_size,
                                         const RolloutOptions& opts) {
  if (batch_size < 1) throw Error("batch_size must be >= 1");
  std::vector<RolloutResult> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    Rng rng(child_seed(batch_seed, static_cast<std::uint64_t>(i)));
    out.push_back(rollout(engine, policy, rng, opts));
  }
  return out;
}

}  // namespace molgen
