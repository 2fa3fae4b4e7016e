// SPDX-License-Identifier: Apache-2.0

#include "molgen/policy.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

namespace molgen {
namespace {

using Mat = Eigen::MatrixXd;
using json = nlohmann::json;

constexpr double kMaskPenalty = 1e6;
constexpr double kLnEps = 1e-5;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

Eigen::Map<const Mat> cview(const std::vector<double>& p, const ParameterBlock& b) {
  return Eigen::Map<const Mat>(p.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<Mat> mview(std::vector<double>& p, const ParameterBlock& b) {
  return Eigen::Map<Mat>(p.data() + b.offset, b.rows, b.cols);
}

double sinusoid(int pos, int dim, int d_model) {
  const double exponent = static_cast<double>(2 * (dim / 2)) / static_cast<double>(d_model);
  const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
  return (dim % 2 == 0) ? std::sin(angle) : std::cos(angle);
}

// Row-wise layer norm; stores x_hat and rstd for the backward pass.
void layer_norm(const Mat& x, const Eigen::Map<const Mat>& gamma,
                const Eigen::Map<const Mat>& beta, Mat& y, Mat& x_hat, Eigen::VectorXd& rstd) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  y.resize(rows, cols);
  x_hat.resize(rows, cols);
  rstd.resize(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double r = 1.0 / std::sqrt(var + kLnEps);
    rstd(i) = r;
    x_hat.row(i) = (x.row(i).array() - mu) * r;
    y.row(i) = x_hat.row(i).cwiseProduct(gamma.row(0)) + beta.row(0);
  }
}

void layer_norm_backward(const Mat& x_hat, const Eigen::VectorXd& rstd,
                         const Eigen::Map<const Mat>& gamma, const Mat& dy, Mat& dx,
                         Eigen::Map<Mat> dgamma, Eigen::Map<Mat> dbeta) {
  const auto rows = dy.rows();
  const auto cols = dy.cols();
  dx.resize(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    dbeta.row(0) += dy.row(i);
    dgamma.row(0) += dy.row(i).cwiseProduct(x_hat.row(i));
    Eigen::RowVectorXd dxh = dy.row(i).cwiseProduct(gamma.row(0));
    const double m1 = dxh.mean();
    const double m2 = dxh.cwiseProduct(x_hat.row(i)).mean();
    dx.row(i) =
        (dxh.array() - m1 - x_hat.row(i).array() * m2).matrix() * rstd(i);
  }
  (void)cols;
}

class UniformSession : public PolicySession {
 public:
  explicit UniformSession(int vocab) : vocab_(vocab) {}
  void next_logits(std::span<double> out) override {
    std::fill(out.begin(), out.end(), 0.0);
    (void)vocab_;
  }
  void advance(int) override {}

 private:
  int vocab_;
};

class ConstantSession : public PolicySession {
 public:
  explicit ConstantSession(const std::vector<double>& logits) : logits_(&logits) {}
  void next_logits(std::span<double> out) override {
    std::copy(logits_->begin(), logits_->end(), out.begin());
  }
  void advance(int) override {}

 private:
  const std::vector<double>* logits_;
};

class HashNoiseSession : public PolicySession {
 public:
  HashNoiseSession(int vocab, std::uint64_t seed, double scale)
      : vocab_(vocab), seed_(seed), scale_(scale) {}
  void next_logits(std::span<double> out) override {
    for (int j = 0; j < vocab_; ++j) {
      const std::uint64_t h = splitmix64(seed_ ^ (static_cast<std::uint64_t>(step_) << 32) ^
                                         static_cast<std::uint64_t>(j));
      const double unit = static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);  // [0,1)
      out[static_cast<std::size_t>(j)] = scale_ * (2.0 * unit - 1.0);
    }
  }
  void advance(int) override { ++step_; }

 private:
  int vocab_;
  std::uint64_t seed_;
  double scale_;
  int step_ = 0;
};

}  // namespace

void masked_softmax(std::span<const double> logits, std::span<const char> mask, MaskMode mode,
                    std::span<double> probs) {
  const std::size_t n = logits.size();
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    const double l = mode == MaskMode::exclude
                         ? (mask[j] ? logits[j] : -std::numeric_limits<double>::infinity())
                         : logits[j] - (mask[j] ? 0.0 : kMaskPenalty);
    probs[j] = l;
    max_logit = std::max(max_logit, l);
  }
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    probs[j] = std::exp(probs[j] - max_logit);
    z += probs[j];
  }
  for (std::size_t j = 0; j < n; ++j) probs[j] /= z;
}

double masked_log_prob(std::span<const double> logits, std::span<const char> mask, int chosen,
                       MaskMode mode) {
  if (chosen < 0 || static_cast<std::size_t>(chosen) >= logits.size() ||
      !mask[static_cast<std::size_t>(chosen)]) {
    throw PolicyError("realized rule " + std::to_string(chosen) + " is masked out");
  }
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double l = mode == MaskMode::exclude
                         ? (mask[j] ? logits[j] : -std::numeric_limits<double>::infinity())
                         : logits[j] - (mask[j] ? 0.0 : kMaskPenalty);
    max_logit = std::max(max_logit, l);
  }
  double z = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double l = mode == MaskMode::exclude
                         ? (mask[j] ? logits[j] : -std::numeric_limits<double>::infinity())
                         : logits[j] - (mask[j] ? 0.0 : kMaskPenalty);
    if (l > -std::numeric_limits<double>::infinity()) z += std::exp(l - max_logit);
  }
  return logits[static_cast<std::size_t>(chosen)] -
         (mode == MaskMode::subtract_1e6 && !mask[static_cast<std::size_t>(chosen)] ? kMaskPenalty
                                                                                    : 0.0) -
         (max_logit + std::log(z));
}

std::vector<double> Policy::logits(std::span<const int> prefix) const {
  auto sess = session();
  std::vector<double> out(static_cast<std::size_t>(vocab()));
  for (int r : prefix) {
    sess->next_logits(out);
    sess->advance(r);
  }
  sess->next_logits(out);
  return out;
}

std::unique_ptr<PolicySession> UniformPolicy::session() const {
  return std::make_unique<UniformSession>(vocab_);
}

std::unique_ptr<PolicySession> ConstantLogitsPolicy::session() const {
  return std::make_unique<ConstantSession>(logits_);
}

std::unique_ptr<PolicySession> HashNoisePolicy::session() const {
  return std::make_unique<HashNoiseSession>(vocab_, seed_, scale_);
}

void PolicyConfig::validate() const {
  if (layers < 1 || heads < 1 || d_k < 1 || d_v < 1 || d_model < 1 || d_inner < 1) {
    throw PolicyError("policy dimensions must be positive");
  }
  if (vocab < 1) throw PolicyError("policy vocab must be positive");
  if (max_len < 1) throw PolicyError("policy max_len must be positive");
}

TransformerPolicy::TransformerPolicy(PolicyConfig cfg, std::uint64_t grammar_fingerprint,
                                     std::uint64_t init_seed)
    : cfg_(cfg), grammar_fingerprint_(grammar_fingerprint), init_seed_(init_seed) {
  cfg_.validate();
  const int hdk = cfg_.heads * cfg_.d_k;
  const int hdv = cfg_.heads * cfg_.d_v;

  std::size_t offset = 0;
  auto add = [&](std::string name, int rows, int cols) {
    blocks_.push_back({std::move(name), offset, rows, cols});
    offset += blocks_.back().size();
  };
  add("embed", cfg_.vocab + 1, cfg_.d_model);  // row 0 = begin-of-sequence
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    add(p + "wq", cfg_.d_model, hdk);
    add(p + "bq", 1, hdk);
    add(p + "wk", cfg_.d_model, hdk);
    add(p + "bk", 1, hdk);
    add(p + "wv", cfg_.d_model, hdv);
    add(p + "bv", 1, hdv);
    add(p + "wo", hdv, cfg_.d_model);
    add(p + "bo", 1, cfg_.d_model);
    add(p + "ln1.g", 1, cfg_.d_model);
    add(p + "ln1.b", 1, cfg_.d_model);
    add(p + "ffn.w1", cfg_.d_model, cfg_.d_inner);
    add(p + "ffn.b1", 1, cfg_.d_inner);
    add(p + "ffn.w2", cfg_.d_inner, cfg_.d_model);
    add(p + "ffn.b2", 1, cfg_.d_model);
    add(p + "ln2.g", 1, cfg_.d_model);
    add(p + "ln2.b", 1, cfg_.d_model);
  }
  add("out.w", cfg_.d_model, cfg_.vocab);
  add("out.b", 1, cfg_.vocab);

  params_.assign(offset, 0.0);
  init_parameters();
}

void TransformerPolicy::init_parameters() {
  std::mt19937_64 rng(init_seed_);
  for (const ParameterBlock& b : blocks_) {
    if (b.name.size() >= 2 && b.name.compare(b.name.size() - 2, 2, ".g") == 0) {
      std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size(), 1.0);
      continue;
    }
    if (b.rows == 1) continue;  // biases and layer-norm shifts start at zero
    const double limit = std::sqrt(6.0 / static_cast<double>(b.rows + b.cols));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (std::size_t i = 0; i < b.size(); ++i) params_[b.offset + i] = dist(rng);
  }
}

const ParameterBlock& TransformerPolicy::block(const std::string& name) const {
  for (const ParameterBlock& b : blocks_) {
    if (b.name == name) return b;
  }
  throw PolicyError("unknown parameter block: " + name);
}

namespace {

// Caches of one teacher-forced forward pass, for the analytic backward.
struct LayerCache {
  Mat x_in, q, k, v, att_out, a, r1, x1_hat, x1, h_pre, h_relu, f, r2, x2_hat;
  Eigen::VectorXd rstd1, rstd2;
  std::vector<Mat> probs;  // per head, T x T (rows are causal softmaxes)
};

struct ForwardCache {
  std::vector<int> ids;
  Mat x0;
  std::vector<LayerCache> layers;
  Mat x_final;
  Mat logits;
};

}  // namespace

// Shared teacher-forced forward pass over input ids (BOS + shifted rules).
static void transformer_forward(const TransformerPolicy& policy, std::span<const int> rule_ids,
                                ForwardCache& fc) {
  const PolicyConfig& cfg = policy.config();
  const auto& p = policy.parameters();
  const int T = static_cast<int>(rule_ids.size()) + 1;
  if (T > cfg.max_len + 1) throw PolicyError("prefix exceeds max_len");

  fc.ids.resize(static_cast<std::size_t>(T));
  fc.ids[0] = 0;
  for (int t = 1; t < T; ++t) {
    const int r = rule_ids[static_cast<std::size_t>(t - 1)];
    if (r < 0 || r >= cfg.vocab) throw PolicyError("rule id out of range");
    fc.ids[static_cast<std::size_t>(t)] = r + 1;
  }

  auto embed = cview(p, policy.block("embed"));
  const double scale = std::sqrt(static_cast<double>(cfg.d_model));
  fc.x0.resize(T, cfg.d_model);
  for (int t = 0; t < T; ++t) {
    for (int d = 0; d < cfg.d_model; ++d) {
      fc.x0(t, d) = embed(fc.ids[static_cast<std::size_t>(t)], d) * scale + sinusoid(t, d, cfg.d_model);
    }
  }

  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.d_k));
  fc.layers.assign(static_cast<std::size_t>(cfg.layers), {});
  Mat x = fc.x0;
  for (int l = 0; l < cfg.layers; ++l) {
    LayerCache& lc = fc.layers[static_cast<std::size_t>(l)];
    const std::string pre = "l" + std::to_string(l) + ".";
    lc.x_in = x;
    lc.q = (x * cview(p, policy.block(pre + "wq"))).rowwise() +
           cview(p, policy.block(pre + "bq")).row(0);
    lc.k = (x * cview(p, policy.block(pre + "wk"))).rowwise() +
           cview(p, policy.block(pre + "bk")).row(0);
    lc.v = (x * cview(p, policy.block(pre + "wv"))).rowwise() +
           cview(p, policy.block(pre + "bv")).row(0);

    lc.att_out.setZero(T, cfg.heads * cfg.d_v);
    lc.probs.assign(static_cast<std::size_t>(cfg.heads), Mat::Zero(T, T));
    for (int h = 0; h < cfg.heads; ++h) {
      auto qh = lc.q.middleCols(h * cfg.d_k, cfg.d_k);
      auto kh = lc.k.middleCols(h * cfg.d_k, cfg.d_k);
      auto vh = lc.v.middleCols(h * cfg.d_v, cfg.d_v);
      Mat& ph = lc.probs[static_cast<std::size_t>(h)];
      for (int i = 0; i < T; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= i; ++j) {
          const double s = qh.row(i).dot(kh.row(j)) * inv_sqrt_dk;
          ph(i, j) = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
          ph(i, j) = std::exp(ph(i, j) - mx);
          z += ph(i, j);
        }
        for (int j = 0; j <= i; ++j) {
          ph(i, j) /= z;
          lc.att_out.row(i).segment(h * cfg.d_v, cfg.d_v) += ph(i, j) * vh.row(j);
        }
      }
    }

    lc.a = (lc.att_out * cview(p, policy.block(pre + "wo"))).rowwise() +
           cview(p, policy.block(pre + "bo")).row(0);
    lc.r1 = lc.x_in + lc.a;
    auto g1 = cview(p, policy.block(pre + "ln1.g"));
    auto b1 = cview(p, policy.block(pre + "ln1.b"));
    layer_norm(lc.r1, g1, b1, lc.x1, lc.x1_hat, lc.rstd1);

    lc.h_pre = (lc.x1 * cview(p, policy.block(pre + "ffn.w1"))).rowwise() +
               cview(p, policy.block(pre + "ffn.b1")).row(0);
    lc.h_relu = lc.h_pre.cwiseMax(0.0);
    lc.f = (lc.h_relu * cview(p, policy.block(pre + "ffn.w2"))).rowwise() +
           cview(p, policy.block(pre + "ffn.b2")).row(0);
    lc.r2 = lc.x1 + lc.f;
    auto g2 = cview(p, policy.block(pre + "ln2.g"));
    auto b2 = cview(p, policy.block(pre + "ln2.b"));
    Mat x_next;
    layer_norm(lc.r2, g2, b2, x_next, lc.x2_hat, lc.rstd2);
    x = std::move(x_next);
  }
  fc.x_final = x;
  fc.logits = (x * cview(p, policy.block("out.w"))).rowwise() +
              cview(p, policy.block("out.b")).row(0);
}

static void transformer_backward(const TransformerPolicy& policy, const ForwardCache& fc,
                                 const Mat& dlogits, std::vector<double>& grad) {
  const PolicyConfig& cfg = policy.config();
  const auto& p = policy.parameters();
  const int T = static_cast<int>(fc.ids.size());
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.d_k));

  if (grad.empty()) grad.assign(p.size(), 0.0);
  if (grad.size() != p.size()) throw PolicyError("gradient buffer size mismatch");

  mview(grad, policy.block("out.w")) += fc.x_final.transpose() * dlogits;
  mview(grad, policy.block("out.b")).row(0) += dlogits.colwise().sum();
  Mat dx = dlogits * cview(p, policy.block("out.w")).transpose();

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerCache& lc = fc.layers[static_cast<std::size_t>(l)];
    const std::string pre = "l" + std::to_string(l) + ".";

    Mat dr2;
    layer_norm_backward(lc.x2_hat, lc.rstd2, cview(p, policy.block(pre + "ln2.g")), dx, dr2,
                        mview(grad, policy.block(pre + "ln2.g")),
                        mview(grad, policy.block(pre + "ln2.b")));

    Mat dx1 = dr2;
    const Mat& df = dr2;
    mview(grad, policy.block(pre + "ffn.w2")) += lc.h_relu.transpose() * df;
    mview(grad, policy.block(pre + "ffn.b2")).row(0) += df.colwise().sum();
    Mat dh = df * cview(p, policy.block(pre + "ffn.w2")).transpose();
    dh = dh.cwiseProduct((lc.h_pre.array() > 0.0).cast<double>().matrix());
    mview(grad, policy.block(pre + "ffn.w1")) += lc.x1.transpose() * dh;
    mview(grad, policy.block(pre + "ffn.b1")).row(0) += dh.colwise().sum();
    dx1 += dh * cview(p, policy.block(pre + "ffn.w1")).transpose();

    Mat dr1;
    layer_norm_backward(lc.x1_hat, lc.rstd1, cview(p, policy.block(pre + "ln1.g")), dx1, dr1,
                        mview(grad, policy.block(pre + "ln1.g")),
                        mview(grad, policy.block(pre + "ln1.b")));

    Mat dx_in = dr1;
    const Mat& da = dr1;
    mview(grad, policy.block(pre + "wo")) += lc.att_out.transpose() * da;
    mview(grad, policy.block(pre + "bo")).row(0) += da.colwise().sum();
    Mat datt = da * cview(p, policy.block(pre + "wo")).transpose();

    Mat dq = Mat::Zero(T, cfg.heads * cfg.d_k);
    Mat dk = Mat::Zero(T, cfg.heads * cfg.d_k);
    Mat dv = Mat::Zero(T, cfg.heads * cfg.d_v);
    for (int h = 0; h < cfg.heads; ++h) {
      auto qh = lc.q.middleCols(h * cfg.d_k, cfg.d_k);
      auto kh = lc.k.middleCols(h * cfg.d_k, cfg.d_k);
      auto vh = lc.v.middleCols(h * cfg.d_v, cfg.d_v);
      auto doh = datt.middleCols(h * cfg.d_v, cfg.d_v);
      const Mat& ph = lc.probs[static_cast<std::size_t>(h)];
      for (int i = 0; i < T; ++i) {
        double inner = 0.0;
        Eigen::RowVectorXd dp(i + 1);
        for (int j = 0; j <= i; ++j) {
          dp(j) = doh.row(i).dot(vh.row(j));
          dv.row(j).segment(h * cfg.d_v, cfg.d_v) += ph(i, j) * doh.row(i);
          inner += dp(j) * ph(i, j);
        }
        for (int j = 0; j <= i; ++j) {
          const double ds = ph(i, j) * (dp(j) - inner) * inv_sqrt_dk;
          dq.row(i).segment(h * cfg.d_k, cfg.d_k) += ds * kh.row(j);
          dk.row(j).segment(h * cfg.d_k, cfg.d_k) += ds * qh.row(i);
        }
      }
    }

    mview(grad, policy.block(pre + "wq")) += lc.x_in.transpose() * dq;
    mview(grad, policy.block(pre + "bq")).row(0) += dq.colwise().sum();
    mview(grad, policy.block(pre + "wk")) += lc.x_in.transpose() * dk;
    mview(grad, policy.block(pre + "bk")).row(0) += dk.colwise().sum();
    mview(grad, policy.block(pre + "wv")) += lc.x_in.transpose() * dv;
    mview(grad, policy.block(pre + "bv")).row(0) += dv.colwise().sum();
    dx_in += dq * cview(p, policy.block(pre + "wq")).transpose();
    dx_in += dk * cview(p, policy.block(pre + "wk")).transpose();
    dx_in += dv * cview(p, policy.block(pre + "wv")).transpose();
    dx = std::move(dx_in);
  }

  auto dembed = mview(grad, policy.block("embed"));
  const double scale = std::sqrt(static_cast<double>(cfg.d_model));
  for (int t = 0; t < T; ++t) {
    dembed.row(fc.ids[static_cast<std::size_t>(t)]) += dx.row(t) * scale;
  }
}

double TransformerPolicy::sequence_loss(std::span<const int> rule_ids,
                                        const std::vector<std::vector<char>>& masks, MaskMode mode,
                                        std::vector<double>* grad) const {
  if (rule_ids.empty()) throw PolicyError("sequence_loss: empty derivation");
  if (masks.size() != rule_ids.size()) throw PolicyError("sequence_loss: mask count mismatch");

  // Teacher forcing: position t sees rules 0..t-1, so the last rule is
  // never an input.
  ForwardCache fc;
  transformer_forward(*this, rule_ids.subspan(0, rule_ids.size() - 1), fc);

  const int T = static_cast<int>(rule_ids.size());
  double loss = 0.0;
  Mat dlogits = Mat::Zero(T, cfg_.vocab);
  std::vector<double> row(static_cast<std::size_t>(cfg_.vocab));
  std::vector<double> probs(static_cast<std::size_t>(cfg_.vocab));
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < cfg_.vocab; ++j) row[static_cast<std::size_t>(j)] = fc.logits(t, j);
    const auto& mask = masks[static_cast<std::size_t>(t)];
    if (mask.size() != static_cast<std::size_t>(cfg_.vocab)) {
      throw PolicyError("sequence_loss: mask width mismatch");
    }
    const int r = rule_ids[static_cast<std::size_t>(t)];
    loss -= masked_log_prob(row, mask, r, mode);
    if (grad) {
      masked_softmax(row, mask, mode, probs);
      for (int j = 0; j < cfg_.vocab; ++j) dlogits(t, j) = probs[static_cast<std::size_t>(j)];
      dlogits(t, r) -= 1.0;
    }
  }
  if (grad) transformer_backward(*this, fc, dlogits, *grad);
  return loss;
}

std::vector<std::vector<double>> TransformerPolicy::forward_all(std::span<const int> rule_ids) const {
  ForwardCache fc;
  transformer_forward(*this, rule_ids, fc);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(fc.logits.rows()));
  for (Eigen::Index t = 0; t < fc.logits.rows(); ++t) {
    out[static_cast<std::size_t>(t)].resize(static_cast<std::size_t>(cfg_.vocab));
    for (int j = 0; j < cfg_.vocab; ++j) {
      out[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] = fc.logits(t, j);
    }
  }
  return out;
}

namespace {

// Incremental decoding with per-layer key/value caches.
class TransformerSession : public PolicySession {
 public:
  explicit TransformerSession(const TransformerPolicy& policy) : policy_(&policy) {
    const PolicyConfig& cfg = policy.config();
    k_cache_.assign(static_cast<std::size_t>(cfg.layers), Mat(0, cfg.heads * cfg.d_k));
    v_cache_.assign(static_cast<std::size_t>(cfg.layers), Mat(0, cfg.heads * cfg.d_v));
    pending_ = 0;  // begin-of-sequence
  }

  void next_logits(std::span<double> out) override {
    const PolicyConfig& cfg = policy_->config();
    const auto& p = policy_->parameters();
    if (t_ > cfg.max_len) throw PolicyError("prefix exceeds max_len");

    auto embed = cview(p, policy_->block("embed"));
    const double scale = std::sqrt(static_cast<double>(cfg.d_model));
    Eigen::RowVectorXd x(cfg.d_model);
    for (int d = 0; d < cfg.d_model; ++d) {
      x(d) = embed(pending_, d) * scale + sinusoid(t_, d, cfg.d_model);
    }

    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.d_k));
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string pre = "l" + std::to_string(l) + ".";
      Eigen::RowVectorXd q = x * cview(p, policy_->block(pre + "wq")) +
                             cview(p, policy_->block(pre + "bq")).row(0);
      Eigen::RowVectorXd k = x * cview(p, policy_->block(pre + "wk")) +
                             cview(p, policy_->block(pre + "bk")).row(0);
      Eigen::RowVectorXd v = x * cview(p, policy_->block(pre + "wv")) +
                             cview(p, policy_->block(pre + "bv")).row(0);
      Mat& kc = k_cache_[static_cast<std::size_t>(l)];
      Mat& vc = v_cache_[static_cast<std::size_t>(l)];
      kc.conservativeResize(t_ + 1, Eigen::NoChange);
      vc.conservativeResize(t_ + 1, Eigen::NoChange);
      kc.row(t_) = k;
      vc.row(t_) = v;

      Eigen::RowVectorXd att(cfg.heads * cfg.d_v);
      for (int h = 0; h < cfg.heads; ++h) {
        Eigen::VectorXd scores(t_ + 1);
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= t_; ++j) {
          scores(j) = q.segment(h * cfg.d_k, cfg.d_k).dot(kc.row(j).segment(h * cfg.d_k, cfg.d_k)) *
                      inv_sqrt_dk;
          mx = std::max(mx, scores(j));
        }
        double z = 0.0;
        for (int j = 0; j <= t_; ++j) {
          scores(j) = std::exp(scores(j) - mx);
          z += scores(j);
        }
        Eigen::RowVectorXd oh = Eigen::RowVectorXd::Zero(cfg.d_v);
        for (int j = 0; j <= t_; ++j) {
          oh += (scores(j) / z) * vc.row(j).segment(h * cfg.d_v, cfg.d_v);
        }
        att.segment(h * cfg.d_v, cfg.d_v) = oh;
      }

      Eigen::RowVectorXd a = att * cview(p, policy_->block(pre + "wo")) +
                             cview(p, policy_->block(pre + "bo")).row(0);
      Eigen::RowVectorXd r1 = x + a;
      x = norm_row(r1, p, pre + "ln1");
      Eigen::RowVectorXd h1 = x * cview(p, policy_->block(pre + "ffn.w1")) +
                              cview(p, policy_->block(pre + "ffn.b1")).row(0);
      h1 = h1.cwiseMax(0.0);
      Eigen::RowVectorXd f = h1 * cview(p, policy_->block(pre + "ffn.w2")) +
                             cview(p, policy_->block(pre + "ffn.b2")).row(0);
      Eigen::RowVectorXd r2 = x + f;
      x = norm_row(r2, p, pre + "ln2");
    }

    Eigen::RowVectorXd logits = x * cview(p, policy_->block("out.w")) +
                                cview(p, policy_->block("out.b")).row(0);
    for (int j = 0; j < cfg.vocab; ++j) out[static_cast<std::size_t>(j)] = logits(j);
  }

  void advance(int rule_id) override {
    const PolicyConfig& cfg = policy_->config();
    if (rule_id < 0 || rule_id >= cfg.vocab) throw PolicyError("rule id out of range");
    pending_ = rule_id + 1;
    ++t_;
  }

 private:
  Eigen::RowVectorXd norm_row(const Eigen::RowVectorXd& r, const std::vector<double>& p,
                              const std::string& name) const {
    auto g = cview(p, policy_->block(name + ".g"));
    auto b = cview(p, policy_->block(name + ".b"));
    const double mu = r.mean();
    const double var = (r.array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    return (((r.array() - mu) * rstd).matrix().cwiseProduct(g.row(0)) + b.row(0));
  }

  const TransformerPolicy* policy_;
  std::vector<Mat> k_cache_;
  std::vector<Mat> v_cache_;
  int pending_ = 0;
  int t_ = 0;
};

}  // namespace

std::unique_ptr<PolicySession> TransformerPolicy::session() const {
  return std::make_unique<TransformerSession>(*this);
}

double pretrain_loss(const TransformerPolicy& policy, std::span<const int> rule_ids,
                     const std::vector<std::vector<char>>& masks, MaskMode mode,
                     std::vector<double>* grad) {
  return policy.sequence_loss(rule_ids, masks, mode, grad);
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw PolicyError("parameter shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double anchored_best_loss(const TransformerPolicy& policy, std::span<const int> best_rule_ids,
                          const std::vector<std::vector<char>>& masks,
                          std::span<const double> p_base, double w_a, MaskMode mode,
                          std::vector<double>* grad) {
  const auto& p = policy.parameters();
  if (p_base.size() != p.size()) throw PolicyError("anchor parameter shape mismatch");
  double loss = policy.sequence_loss(best_rule_ids, masks, mode, grad);
  loss += w_a * squared_distance(p, p_base);
  if (grad) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      (*grad)[i] += 2.0 * w_a * (p[i] - p_base[i]);
    }
  }
  return loss;
}

// --- Checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'G', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::string& data;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > data.size()) throw CheckpointError("truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos + static_cast<std::size_t>(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + static_cast<std::size_t>(i)])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data.substr(pos, n);
    pos += n;
    return s;
  }
};

void put_doubles(std::string& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  for (double d : v) put_f64(out, d);
}

std::vector<double> get_doubles(Reader& r) {
  const std::uint64_t n = r.u64();
  std::vector<double> v(n);
  for (std::uint64_t i = 0; i < n; ++i) v[i] = r.f64();
  return v;
}

}  // namespace

void save_checkpoint(const TransformerPolicy& policy, const std::string& path,
                     std::uint64_t iteration, const Adam* adam) {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, kVersion);
  put_u64(out, policy.grammar_fingerprint());
  put_u64(out, policy.init_seed());
  put_u64(out, iteration);

  const PolicyConfig& c = policy.config();
  json cfg = {{"layers", c.layers},   {"heads", c.heads},   {"d_k", c.d_k},
              {"d_v", c.d_v},         {"d_model", c.d_model}, {"d_inner", c.d_inner},
              {"vocab", c.vocab},     {"max_len", c.max_len}};
  const std::string cfg_str = cfg.dump();
  put_u32(out, static_cast<std::uint32_t>(cfg_str.size()));
  out += cfg_str;

  out.push_back(adam ? 1 : 0);
  if (adam) {
    json acfg = {{"lr", adam->config().lr},
                 {"beta1", adam->config().beta1},
                 {"beta2", adam->config().beta2},
                 {"eps", adam->config().eps},
                 {"t", adam->steps()}};
    const std::string acfg_str = acfg.dump();
    put_u32(out, static_cast<std::uint32_t>(acfg_str.size()));
    out += acfg_str;
    put_doubles(out, adam->m());
    put_doubles(out, adam->v());
  }

  const auto& params = policy.parameters();
  put_u32(out, static_cast<std::uint32_t>(policy.manifest().size()));
  for (const ParameterBlock& b : policy.manifest()) {
    put_u32(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    put_u32(out, static_cast<std::uint32_t>(b.rows));
    put_u32(out, static_cast<std::uint32_t>(b.cols));
    for (std::size_t i = 0; i < b.size(); ++i) put_f64(out, params[b.offset + i]);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path, std::uint64_t expected_grammar_fingerprint) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{data};
  if (r.bytes(8) != std::string(kMagic, 8)) throw CheckpointError("bad checkpoint magic");
  if (r.u32() != kVersion) throw CheckpointError("unsupported checkpoint version");
  const std::uint64_t fingerprint = r.u64();
  if (fingerprint != expected_grammar_fingerprint) {
    throw CheckpointError("checkpoint was trained against a different grammar");
  }
  const std::uint64_t init_seed = r.u64();
  const std::uint64_t iteration = r.u64();

  json cfg;
  try {
    cfg = json::parse(r.bytes(r.u32()));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint config: ") + e.what());
  }
  PolicyConfig pc;
  pc.layers = cfg.at("layers").get<int>();
  pc.heads = cfg.at("heads").get<int>();
  pc.d_k = cfg.at("d_k").get<int>();
  pc.d_v = cfg.at("d_v").get<int>();
  pc.d_model = cfg.at("d_model").get<int>();
  pc.d_inner = cfg.at("d_inner").get<int>();
  pc.vocab = cfg.at("vocab").get<int>();
  pc.max_len = cfg.at("max_len").get<int>();

  Checkpoint result{TransformerPolicy(pc, fingerprint, init_seed), iteration, std::nullopt};

  r.need(1);
  const bool has_adam = data[r.pos++] != 0;
  if (has_adam) {
    json acfg;
    try {
      acfg = json::parse(r.bytes(r.u32()));
    } catch (const json::exception& e) {
      throw CheckpointError(std::string("corrupt optimizer config: ") + e.what());
    }
    AdamConfig ac;
    ac.lr = acfg.at("lr").get<double>();
    ac.beta1 = acfg.at("beta1").get<double>();
    ac.beta2 = acfg.at("beta2").get<double>();
    ac.eps = acfg.at("eps").get<double>();
    Adam adam(ac);
    auto m = get_doubles(r);
    auto v = get_doubles(r);
    adam.restore(std::move(m), std::move(v), acfg.at("t").get<std::int64_t>());
    result.adam = std::move(adam);
  }

  const std::uint32_t n_blocks = r.u32();
  if (n_blocks != result.policy.manifest().size()) {
    throw CheckpointError("checkpoint block count does not match config");
  }
  auto& params = result.policy.parameters();
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    const std::string name = r.bytes(r.u32());
    const ParameterBlock& b = result.policy.manifest()[i];
    if (name != b.name || static_cast<int>(r.u32()) != b.rows ||
        static_cast<int>(r.u32()) != b.cols) {
      throw CheckpointError("checkpoint block '" + name + "' does not match manifest");
    }
    for (std::size_t j = 0; j < b.size(); ++j) params[b.offset + j] = r.f64();
  }
  if (result.adam && result.adam->m().size() != params.size()) {
    throw CheckpointError("optimizer state size does not match parameters");
  }
  return result;
}

}  // namespace molgen
