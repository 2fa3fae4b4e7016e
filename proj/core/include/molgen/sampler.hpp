// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "molgen/derivation.hpp"
#include "molgen/policy.hpp"

namespace molgen {

using Rng = std::mt19937_64;

/// Deterministic per-rollout seed derived from a batch seed.
std::uint64_t child_seed(std::uint64_t batch_seed, std::uint64_t index);

struct StepRecord {
  std::vector<double> logits;  // raw policy logits (kept when requested)
  std::vector<char> mask;
  int chosen = -1;
  double log_prob = 0.0;
};

struct RolloutOptions {
  MaskMode mask_mode = MaskMode::exclude;
  bool keep_logits = false;  // retain per-step logits/masks in the records
  bool keep_records = true;
};

struct RolloutResult {
  Derivation derivation;
  std::string smiles;
  std::vector<StepRecord> steps;
  std::vector<double> log_probs;  // per step, always kept
  int steps_used = 0;
};

/// Samples one rule for the current cursor of `state`; returns the record.
StepRecord sample_step(DerivationState& state, PolicySession& session, Rng& rng,
                       const RolloutOptions& opts);

/// Rolls a derivation out to completion.  Terminates within
/// engine.config().max_steps for any policy; the budget mask guarantees it.
RolloutResult rollout(const AttributeEngine& engine, const Policy& policy, Rng& rng,
                      const RolloutOptions& opts = {});

/// `batch_size` independent rollouts; rollout i uses a generator seeded with
/// child_seed(batch_seed, i), so batches are reproducible and order-stable.
std::vector<RolloutResult> rollout_batch(const AttributeEngine& engine, const Policy& policy,
                                         std::uint64_t batch_seed, int batch_size,
                                         const RolloutOptions& opts = {});

}  // namespace molgen
