// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "molgen/grammar.hpp"
#include "molgen/optim.hpp"

namespace molgen {

class PolicyError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// How forbidden rules are removed from the sampling distribution.
/// `exclude` drops them before the softmax; `subtract_1e6` keeps the full
/// logit vector and subtracts 1e6 at forbidden indices (compatibility mode,
/// numerically indistinguishable in sampling behavior).
enum class MaskMode { exclude, subtract_1e6 };

/// Log-probability of `chosen` under the masked, renormalized softmax.
/// Throws PolicyError when `chosen` is masked out.
double masked_log_prob(std::span<const double> logits, std::span<const char> mask, int chosen,
                       MaskMode mode);

/// Masked softmax probabilities over the full vocabulary (forbidden entries
/// get probability 0 under `exclude`).
void masked_softmax(std::span<const double> logits, std::span<const char> mask, MaskMode mode,
                    std::span<double> probs);

/// Incremental next-rule-logits evaluation over one growing prefix.
class PolicySession {
 public:
  virtual ~PolicySession() = default;
  /// Logits for the rule at the current position.
  virtual void next_logits(std::span<double> out) = 0;
  /// Consumes the chosen rule and moves to the next position.
  virtual void advance(int rule_id) = 0;
};

/// A policy maps a rule-id prefix to logits over the global rule list.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual int vocab() const = 0;
  virtual std::unique_ptr<PolicySession> session() const = 0;

  /// Logits after consuming `prefix` (replays a fresh session).
  std::vector<double> logits(std::span<const int> prefix) const;
};

/// All-zero logits: the uniform baseline policy.
class UniformPolicy : public Policy {
 public:
  explicit UniformPolicy(int vocab) : vocab_(vocab) {}
  int vocab() const override { return vocab_; }
  std::unique_ptr<PolicySession> session() const override;

 private:
  int vocab_;
};

/// Prefix-independent fixed logits; used for biased sampling and for
/// adversarial termination fuzz.
class ConstantLogitsPolicy : public Policy {
 public:
  explicit ConstantLogitsPolicy(std::vector<double> logits) : logits_(std::move(logits)) {}
  int vocab() const override { return static_cast<int>(logits_.size()); }
  std::unique_ptr<PolicySession> session() const override;

 private:
  std::vector<double> logits_;
};

/// Deterministic pseudo-random logits that change every step; the "random
/// logits" adversary for termination fuzz.
class HashNoisePolicy : public Policy {
 public:
  HashNoisePolicy(int vocab, std::uint64_t seed, double scale)
      : vocab_(vocab), seed_(seed), scale_(scale) {}
  int vocab() const override { return vocab_; }
  std::unique_ptr<PolicySession> session() const override;

 private:
  int vocab_;
  std::uint64_t seed_;
  double scale_;
};

struct PolicyConfig {
  int layers = 6;
  int heads = 6;
  int d_k = 16;
  int d_v = 16;
  int d_model = 128;
  int d_inner = 256;
  int vocab = 0;
  int max_len = 277;

  void validate() const;
  bool operator==(const PolicyConfig&) const = default;
};

struct ParameterBlock {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Decoder-only attention stack with learned rule embeddings, sinusoidal
/// position encoding, post-layer-norm residual blocks, and exact analytic
/// gradients for the sequence losses.
class TransformerPolicy : public Policy {
 public:
  TransformerPolicy(PolicyConfig cfg, std::uint64_t grammar_fingerprint, std::uint64_t init_seed);

  const PolicyConfig& config() const { return cfg_; }
  std::uint64_t grammar_fingerprint() const { return grammar_fingerprint_; }
  std::uint64_t init_seed() const { return init_seed_; }

  int vocab() const override { return cfg_.vocab; }
  std::unique_ptr<PolicySession> session() const override;

  std::vector<double>& parameters() { return params_; }
  const std::vector<double>& parameters() const { return params_; }
  const std::vector<ParameterBlock>& manifest() const { return blocks_; }
  const ParameterBlock& block(const std::string& name) const;

  /// Teacher-forced negative log-likelihood of `rule_ids` under the masked
  /// distributions, plus (when `grad` is non-null) the exact gradient,
  /// accumulated into `grad` (which must be zero-sized or n_params).
  double sequence_loss(std::span<const int> rule_ids,
                       const std::vector<std::vector<char>>& masks, MaskMode mode,
                       std::vector<double>* grad) const;

  /// Logits for every position of a teacher-forced pass (row t = logits for
  /// rule t given rules 0..t-1).  Exposed for the causality interface test.
  std::vector<std::vector<double>> forward_all(std::span<const int> rule_ids) const;

 private:
  friend class TransformerSession;
  void init_parameters();

  PolicyConfig cfg_;
  std::uint64_t grammar_fingerprint_ = 0;
  std::uint64_t init_seed_ = 0;
  std::vector<ParameterBlock> blocks_;
  std::vector<double> params_;
};

/// Off-policy loss: -sum_s log pi_s(r_s) with masked, renormalized
/// distributions.  Gradient accumulates into `grad` when non-null.
double pretrain_loss(const TransformerPolicy& policy, std::span<const int> rule_ids,
                     const std::vector<std::vector<char>>& masks, MaskMode mode,
                     std::vector<double>* grad);

/// Best-of-batch loss with base-model anchoring:
/// pretrain_loss(best) + w_a * |p - p_base|^2.
double anchored_best_loss(const TransformerPolicy& policy, std::span<const int> best_rule_ids,
                          const std::vector<std::vector<char>>& masks,
                          std::span<const double> p_base, double w_a, MaskMode mode,
                          std::vector<double>* grad);

double squared_distance(std::span<const double> a, std::span<const double> b);

// --- Checkpoint container -------------------------------------------------
//
// Versioned binary: magic, format version, grammar fingerprint, iteration
// counter, JSON config, then named parameter blocks as little-endian
// 64-bit floats.  Loading verifies the fingerprint so a checkpoint cannot
// be paired with a different grammar.

struct Checkpoint {
  TransformerPolicy policy;
  std::uint64_t iteration = 0;
  std::optional<Adam> adam;
};

void save_checkpoint(const TransformerPolicy& policy, const std::string& path,
                     std::uint64_t iteration, const Adam* adam = nullptr);
Checkpoint load_checkpoint(const std::string& path, std::uint64_t expected_grammar_fingerprint);

}  // namespace molgen
