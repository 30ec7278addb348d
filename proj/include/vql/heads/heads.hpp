#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "vql/core/box.hpp"
#include "vql/features/proposals.hpp"
#include "vql/heads/autodiff.hpp"

namespace vql::heads {

template <typename Scalar>
using Mat = ad::Mat<Scalar>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class Variant { kSiam, kSelfAttention, kCrossAttention, kCocoConcat, kCocoCond };

std::string to_string(Variant v);
/// Accepts siam, self_attention, cross_attention, coco_concat, coco_cond.
Variant parse_variant(const std::string& name);

struct HeadConfig {
  Variant variant = Variant::kCocoCond;
  int num_heads = 4;
  int num_layers = 2;   // attention blocks
  int c_out = 64;
  bool use_text = false;
  bool use_box_refine = true;
  int ffn_mult = 4;     // feed-forward hidden width = ffn_mult * c_out
  int feature_dim = 64; // C, proposal and query feature width
  int title_dim = 64;   // text embedding width
};

/// Throws ConfigError on non-positive sizes or c_out % num_heads != 0.
void validate(const HeadConfig& cfg);
nlohmann::json to_json(const HeadConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
HeadConfig head_config_from_json(const nlohmann::json& j);

/// (C_out, C_in, C_cond) tensor stored as a (C_out * C_in) x C_cond matrix;
/// entry (o, i, c) lives at row o * C_in + i, column c.
template <typename Scalar>
struct ConditionalGenerator {
  int c_out = 0;
  int c_in = 0;
  int c_cond = 0;
  Mat<Scalar> weight;

  ConditionalGenerator() = default;
  ConditionalGenerator(int out, int in, int cond)
      : c_out(out), c_in(in), c_cond(cond), weight(Mat<Scalar>::Zero(static_cast<Eigen::Index>(out) * in, cond)) {}

  Scalar& at(int o, int i, int c) { return weight(static_cast<Eigen::Index>(o) * c_in + i, c); }
  Scalar at(int o, int i, int c) const { return weight(static_cast<Eigen::Index>(o) * c_in + i, c); }

  /// The per-query map M[o][i] = sum_c W[o][i][c] q[c].
  Mat<Scalar> contract(const Vec<Scalar>& q) const {
    if (q.size() != c_cond) throw NumericError("conditional projection: query has wrong dimension");
    const Vec<Scalar> m = weight * q;
    return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(m.data(), c_out, c_in);
  }
};

/// Applies M(q) to every row of xs (N x C_in), giving N x C_out. No bias.
template <typename Scalar>
Mat<Scalar> conditional_projection(const ConditionalGenerator<Scalar>& gen, const Vec<Scalar>& q, const Mat<Scalar>& xs) {
  if (xs.cols() != gen.c_in) throw NumericError("conditional projection: input has wrong dimension");
  return xs * gen.contract(q).transpose();
}

/// Recorded version: generator is (C_out * C_in) x C_cond, q is 1 x C_cond, xs is N x C_in.
template <typename Scalar>
ad::Var<Scalar> conditional_projection(ad::Var<Scalar> generator, ad::Var<Scalar> q, ad::Var<Scalar> xs, int c_out) {
  const auto c_in = xs.cols();
  if (generator.rows() != c_out * c_in || generator.cols() != q.cols()) {
    throw NumericError("conditional projection: generator shape does not match inputs");
  }
  const auto m = ad::reshape(ad::matmul(generator, ad::transpose(q)), c_out, c_in);
  return ad::matmul(xs, ad::transpose(m));
}

/// Resolves a parameter name to a tape variable (a tracked leaf or a constant).
template <typename Scalar>
using ParamSource = std::function<ad::Var<Scalar>(const std::string&)>;

/// Registers the weights of `layers` pre-norm attention blocks under `prefix`.
/// With `cross` each block also normalizes its key/value input separately.
template <typename Scalar>
void init_attention_params(ad::ParamStore<Scalar>& store, const std::string& prefix, int dim, int ffn_dim, int layers,
                           bool cross, Rng& rng);

/// Residual multi-head attention blocks with feed-forward sublayers. Tokens are
/// rows of x. Without `context` this is self-attention over the set; with it,
/// every row of x attends to the rows of *context.
template <typename Scalar>
ad::Var<Scalar> attention_stack(const ParamSource<Scalar>& p, const std::string& prefix, ad::Var<Scalar> x, int layers,
                                int heads, const std::optional<ad::Var<Scalar>>& context = std::nullopt);

/// Set self-attention with weights taken from `store` (inference only).
template <typename Scalar>
Mat<Scalar> set_attention(const ad::ParamStore<Scalar>& store, const std::string& prefix, const Mat<Scalar>& embeddings,
                          int layers, int heads);

struct HeadOutput {
  Eigen::VectorXd scores;                // one per proposal, in (0, 1)
  std::optional<Eigen::MatrixXd> deltas; // N x 4 (dx, dy, dw, dh) when box refinement is on
  std::vector<Box> boxes;                // refined boxes, or the proposal boxes verbatim
};

/// Center/size offsets: x' = cx + dx w, w' = w exp(dw). dw, dh are clamped to +-4.
Box apply_deltas(const Box& box, const Eigen::Vector4d& d);
/// Inverse of apply_deltas (without clamping).
Eigen::Vector4d encode_deltas(const Box& from, const Box& to);

/// A query-conditioned detection head of one variant with its parameters.
template <typename Scalar>
class HeadModel {
 public:
  HeadModel() = default;
  HeadModel(const HeadConfig& cfg, std::uint64_t seed);

  const HeadConfig& config() const { return cfg_; }
  ad::ParamStore<Scalar>& params() { return params_; }
  const ad::ParamStore<Scalar>& params() const { return params_; }

  /// Per-dimension standardization applied to proposal and query features before
  /// the head (not for siam, whose scores must not depend on feature scale).
  void set_input_normalization(const Vec<Scalar>& mean, const Vec<Scalar>& scale);
  const Vec<Scalar>& input_mean() const { return mean_; }
  const Vec<Scalar>& input_scale() const { return scale_; }

  struct Graph {
    ad::Var<Scalar> probs;                  // N x 1
    std::optional<ad::Var<Scalar>> deltas;  // N x 4
  };

  /// Records the forward pass with tracked parameters. `features` is N x C.
  Graph forward(ad::Tape<Scalar>& tape, const Vec<Scalar>& q, const Vec<Scalar>* title, const Mat<Scalar>& features);

  HeadOutput score(const Vec<Scalar>& q, const Vec<Scalar>* title, const features::ProposalSet& pset) const;

 private:
  Graph build(ad::Tape<Scalar>& tape, const ParamSource<Scalar>& p, const Vec<Scalar>& q, const Vec<Scalar>* title,
              const Mat<Scalar>& features) const;

  HeadConfig cfg_;
  ad::ParamStore<Scalar> params_;
  Vec<Scalar> mean_;
  Vec<Scalar> scale_;
};

/// "a photo of a <title>"
std::string title_prompt(const std::string& title);

/// Deterministic text embedding: hashed character trigrams of the prompt,
/// projected by a fixed Gaussian matrix to `dim` and L2-normalized.
Eigen::VectorXd embed_title(const std::string& title, int dim);

}  // namespace vql::heads
