#include "vql/heads/heads.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "vql/core/dataset.hpp"

namespace vql::heads {
namespace {

template <typename S>
Mat<S> gaussian(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
  Mat<S> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<S>(std * rng.normal());
  }
  return m;
}

template <typename S>
void add_linear(ad::ParamStore<S>& store, const std::string& name, int in, int out, Rng& rng) {
  store.add(name + ".w", gaussian<S>(in, out, std::sqrt(1.0 / in), rng));
  store.add(name + ".b", Mat<S>::Zero(1, out));
}

template <typename S>
void add_norm(ad::ParamStore<S>& store, const std::string& name, int dim) {
  store.add(name + ".g", Mat<S>::Ones(1, dim));
  store.add(name + ".b", Mat<S>::Zero(1, dim));
}

template <typename S>
ad::Var<S> norm(const ParamSource<S>& p, const std::string& name, ad::Var<S> x) {
  return ad::layer_norm_rows(x, p(name + ".g"), p(name + ".b"));
}

template <typename S>
ad::Var<S> linear(const ParamSource<S>& p, const std::string& name, ad::Var<S> x) {
  return ad::affine(x, p(name + ".w"), p(name + ".b"));
}

template <typename S>
ad::Var<S> multi_head(const ParamSource<S>& p, const std::string& prefix, ad::Var<S> queries, ad::Var<S> context,
                      int heads) {
  const auto q = ad::matmul(queries, p(prefix + "wq"));
  const auto k = ad::matmul(context, p(prefix + "wk"));
  const auto v = ad::matmul(context, p(prefix + "wv"));
  const Eigen::Index dim = q.cols();
  const Eigen::Index dh = dim / heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  std::optional<ad::Var<S>> merged;
  for (int h = 0; h < heads; ++h) {
    const auto qh = ad::slice_cols(q, h * dh, dh);
    const auto kh = ad::slice_cols(k, h * dh, dh);
    const auto vh = ad::slice_cols(v, h * dh, dh);
    const auto attn = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
    const auto out = ad::matmul(attn, vh);
    merged = merged ? ad::concat_cols(*merged, out) : out;
  }
  return linear(p, prefix + "out", *merged);
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kSiam: return "siam";
    case Variant::kSelfAttention: return "self_attention";
    case Variant::kCrossAttention: return "cross_attention";
    case Variant::kCocoConcat: return "coco_concat";
    case Variant::kCocoCond: return "coco_cond";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::kSiam, Variant::kSelfAttention, Variant::kCrossAttention, Variant::kCocoConcat,
                    Variant::kCocoCond}) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown head variant '" + name + "'");
}

void validate(const HeadConfig& cfg) {
  if (cfg.num_heads <= 0 || cfg.num_layers < 0 || cfg.c_out <= 0 || cfg.ffn_mult <= 0 || cfg.feature_dim <= 0 ||
      cfg.title_dim <= 0) {
    throw ConfigError("head config: sizes must be positive");
  }
  if (cfg.c_out % cfg.num_heads != 0) throw ConfigError("head config: c_out must be divisible by num_heads");
}

nlohmann::json to_json(const HeadConfig& cfg) {
  return {{"variant", to_string(cfg.variant)}, {"num_heads", cfg.num_heads},
          {"num_attention_layers", cfg.num_layers}, {"c_out", cfg.c_out},
          {"use_text", cfg.use_text}, {"use_box_refine", cfg.use_box_refine},
          {"ffn_mult", cfg.ffn_mult}, {"feature_dim", cfg.feature_dim},
          {"title_dim", cfg.title_dim}};
}

HeadConfig head_config_from_json(const nlohmann::json& j) {
  HeadConfig cfg;
  if (!j.is_object()) throw ConfigError("head config must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "variant") cfg.variant = parse_variant(value.get<std::string>());
      else if (key == "num_heads") cfg.num_heads = value.get<int>();
      else if (key == "num_attention_layers") cfg.num_layers = value.get<int>();
      else if (key == "c_out") cfg.c_out = value.get<int>();
      else if (key == "use_text") cfg.use_text = value.get<bool>();
      else if (key == "use_box_refine") cfg.use_box_refine = value.get<bool>();
      else if (key == "ffn_mult") cfg.ffn_mult = value.get<int>();
      else if (key == "feature_dim") cfg.feature_dim = value.get<int>();
      else if (key == "title_dim") cfg.title_dim = value.get<int>();
      else throw ConfigError("unknown head config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("head config key '" + key + "': " + e.what());
    }
  }
  validate(cfg);
  return cfg;
}

template <typename S>
void init_attention_params(ad::ParamStore<S>& store, const std::string& prefix, int dim, int ffn_dim, int layers,
                           bool cross, Rng& rng) {
  for (int l = 0; l < layers; ++l) {
    const std::string b = prefix + std::to_string(l) + ".";
    add_norm(store, b + "ln1", dim);
    if (cross) add_norm(store, b + "ln_ctx", dim);
    for (const char* w : {"wq", "wk", "wv"}) store.add(b + w, gaussian<S>(dim, dim, std::sqrt(1.0 / dim), rng));
    add_linear(store, b + "out", dim, dim, rng);
    add_norm(store, b + "ln2", dim);
    add_linear(store, b + "ffn1", dim, ffn_dim, rng);
    add_linear(store, b + "ffn2", ffn_dim, dim, rng);
  }
}

template <typename S>
ad::Var<S> attention_stack(const ParamSource<S>& p, const std::string& prefix, ad::Var<S> x, int layers, int heads,
                           const std::optional<ad::Var<S>>& context) {
  for (int l = 0; l < layers; ++l) {
    const std::string b = prefix + std::to_string(l) + ".";
    const auto xn = norm(p, b + "ln1", x);
    const auto ctx = context ? norm(p, b + "ln_ctx", *context) : xn;
    x = x + multi_head(p, b, xn, ctx, heads);
    const auto hidden = ad::relu(linear(p, b + "ffn1", norm(p, b + "ln2", x)));
    x = x + linear(p, b + "ffn2", hidden);
  }
  return x;
}

template <typename S>
Mat<S> set_attention(const ad::ParamStore<S>& store, const std::string& prefix, const Mat<S>& embeddings, int layers,
                     int heads) {
  if (embeddings.rows() == 0) throw NumericError("set_attention: empty set");
  ad::Tape<S> tape;
  const ParamSource<S> p = [&](const std::string& name) { return tape.constant(store.value(name)); };
  return attention_stack<S>(p, prefix, tape.constant(embeddings), layers, heads).value();
}

Box apply_deltas(const Box& box, const Eigen::Vector4d& d) {
  const double dw = std::clamp(d(2), -4.0, 4.0);
  const double dh = std::clamp(d(3), -4.0, 4.0);
  const double cx = box.cx() + d(0) * box.w;
  const double cy = box.cy() + d(1) * box.h;
  const double w = box.w * std::exp(dw);
  const double h = box.h * std::exp(dh);
  return Box{cx - 0.5 * w, cy - 0.5 * h, w, h};
}

Eigen::Vector4d encode_deltas(const Box& from, const Box& to) {
  return {(to.cx() - from.cx()) / from.w, (to.cy() - from.cy()) / from.h, std::log(to.w / from.w),
          std::log(to.h / from.h)};
}

template <typename S>
HeadModel<S>::HeadModel(const HeadConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  Rng rng(seed);
  const int C = cfg_.feature_dim, D = cfg_.c_out;
  mean_ = Vec<S>::Zero(C);
  scale_ = Vec<S>::Ones(C);
  if (cfg_.use_text) add_linear(params_, "text", C + cfg_.title_dim, C, rng);
  switch (cfg_.variant) {
    case Variant::kSiam:
      params_.add("siam.proj", gaussian<S>(C, D, std::sqrt(1.0 / C), rng));
      params_.add("siam.temperature", Mat<S>::Constant(1, 1, S(5)));
      params_.add("siam.bias", Mat<S>::Zero(1, 1));
      break;
    case Variant::kSelfAttention:
    case Variant::kCrossAttention:
      add_linear(params_, "embed", C, D, rng);
      add_linear(params_, "query_token", C, D, rng);
      break;
    case Variant::kCocoConcat:
      add_linear(params_, "concat", 2 * C, D, rng);
      break;
    case Variant::kCocoCond:
      params_.add("generator", gaussian<S>(static_cast<Eigen::Index>(D) * C, C, std::sqrt(1.0 / (C * C)), rng));
      break;
  }
  if (cfg_.variant != Variant::kSiam) {
    init_attention_params(params_, "attn", D, cfg_.ffn_mult * D, cfg_.num_layers,
                          cfg_.variant == Variant::kCrossAttention, rng);
    add_norm(params_, "final_ln", D);
    params_.add("cls.w", gaussian<S>(D, 1, 0.01, rng));
    params_.add("cls.b", Mat<S>::Zero(1, 1));
  }
  if (cfg_.use_box_refine) {
    const int in = cfg_.variant == Variant::kSiam ? C : D;
    params_.add("box.w", Mat<S>::Zero(in, 4));
    params_.add("box.b", Mat<S>::Zero(1, 4));
  }
}

template <typename S>
void HeadModel<S>::set_input_normalization(const Vec<S>& mean, const Vec<S>& scale) {
  if (mean.size() != cfg_.feature_dim || scale.size() != cfg_.feature_dim) {
    throw ConfigError("input normalization has the wrong dimension");
  }
  if (!(scale.array() > S(0)).all() || !mean.allFinite()) throw ConfigError("input normalization must be finite and positive");
  mean_ = mean;
  scale_ = scale;
}

template <typename S>
typename HeadModel<S>::Graph HeadModel<S>::forward(ad::Tape<S>& tape, const Vec<S>& q, const Vec<S>* title,
                                                    const Mat<S>& features) {
  const ParamSource<S> p = [&](const std::string& name) { return tape.param(params_, name); };
  return build(tape, p, q, title, features);
}

template <typename S>
typename HeadModel<S>::Graph HeadModel<S>::build(ad::Tape<S>& tape, const ParamSource<S>& p, const Vec<S>& q,
                                                  const Vec<S>* title, const Mat<S>& features) const {
  const int C = cfg_.feature_dim;
  if (features.rows() == 0) throw DataError("head: empty proposal set");
  if (features.cols() != C || q.size() != C) throw DataError("head: feature dimension does not match the config");
  if (cfg_.use_text && (title == nullptr || title->size() != cfg_.title_dim)) {
    throw DataError("head: text fusion needs a title embedding of the configured width");
  }

  Mat<S> x = features;
  Mat<S> qrow = q.transpose();
  if (cfg_.variant != Variant::kSiam) {
    const Eigen::Array<S, 1, Eigen::Dynamic> inv = scale_.transpose().array().inverse();
    x = ((x.rowwise() - mean_.transpose()).array().rowwise() * inv).matrix();
    qrow = ((qrow - mean_.transpose()).array() * inv).matrix();
  }
  const auto xs = tape.constant(std::move(x));
  auto cond = tape.constant(std::move(qrow));
  if (cfg_.use_text) cond = linear(p, "text", ad::concat_cols(cond, tape.constant(Mat<S>(title->transpose()))));

  const Eigen::Index n = xs.rows();
  Graph g;
  std::optional<ad::Var<S>> tokens;
  switch (cfg_.variant) {
    case Variant::kSiam: {
      const auto zq = ad::l2_normalize_rows(ad::matmul(cond, p("siam.proj")));
      const auto zx = ad::l2_normalize_rows(ad::matmul(xs, p("siam.proj")));
      const auto cosine = ad::matmul(zx, ad::transpose(zq));
      const auto logits = ad::scale_by(cosine, p("siam.temperature")) + ad::repeat_rows(p("siam.bias"), n);
      g.probs = ad::sigmoid(logits);
      if (cfg_.use_box_refine) g.deltas = linear(p, "box", xs);
      return g;
    }
    case Variant::kSelfAttention: {
      const auto qt = linear(p, "query_token", cond);
      const auto all = attention_stack(p, "attn", ad::concat_rows(qt, linear(p, "embed", xs)), cfg_.num_layers,
                                       cfg_.num_heads);
      tokens = ad::slice_rows(all, 1, n);
      break;
    }
    case Variant::kCrossAttention: {
      const auto qt = linear(p, "query_token", cond);
      tokens = attention_stack(p, "attn", linear(p, "embed", xs), cfg_.num_layers, cfg_.num_heads,
                               std::optional<ad::Var<S>>(qt));
      break;
    }
    case Variant::kCocoConcat: {
      const auto joined = ad::concat_cols(xs, ad::repeat_rows(cond, n));
      tokens = attention_stack(p, "attn", linear(p, "concat", joined), cfg_.num_layers, cfg_.num_heads);
      break;
    }
    case Variant::kCocoCond: {
      const auto projected = conditional_projection(p("generator"), cond, xs, cfg_.c_out);
      tokens = attention_stack(p, "attn", projected, cfg_.num_layers, cfg_.num_heads);
      break;
    }
  }
  const auto h = norm(p, "final_ln", *tokens);
  g.probs = ad::sigmoid(linear(p, "cls", h));
  if (cfg_.use_box_refine) g.deltas = linear(p, "box", h);
  return g;
}

template <typename S>
HeadOutput HeadModel<S>::score(const Vec<S>& q, const Vec<S>* title, const features::ProposalSet& pset) const {
  features::validate(pset);
  ad::Tape<S> tape;
  const ParamSource<S> p = [&](const std::string& name) { return tape.constant(params_.value(name)); };
  const Graph g = build(tape, p, q, title, pset.features.template cast<S>());
  HeadOutput out;
  out.scores = g.probs.value().col(0).template cast<double>();
  if (!out.scores.allFinite()) throw NumericError("head produced non-finite scores");
  for (int j = 0; j < pset.size(); ++j) out.boxes.push_back(pset.proposals[j].box);
  if (g.deltas) {
    out.deltas = g.deltas->value().template cast<double>();
    for (int j = 0; j < pset.size(); ++j) {
      const Box refined = apply_deltas(out.boxes[j], out.deltas->row(j).transpose());
      if (auto clipped = clip_to_frame(refined, pset.frame_width, pset.frame_height)) out.boxes[j] = *clipped;
    }
  }
  return out;
}

std::string title_prompt(const std::string& title) { return "a photo of a " + title; }

Eigen::VectorXd embed_title(const std::string& title, int dim) {
  if (title.empty()) throw DataError("embed_title: empty title");
  if (dim <= 0) throw ConfigError("embed_title: dimension must be positive");
  constexpr std::uint64_t kBuckets = 4096;
  constexpr std::uint64_t kProjectionSeed = 0x7e47'e3b0'11d2'a5c1ULL;
  std::string text = " " + title_prompt(title) + " ";
  std::transform(text.begin(), text.end(), text.begin(), [](unsigned char c) { return std::tolower(c); });
  std::map<std::uint64_t, double> counts;
  for (std::size_t i = 0; i + 3 <= text.size(); ++i) counts[fnv1a64(text.substr(i, 3)) % kBuckets] += 1.0;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
  for (const auto& [bucket, count] : counts) {
    Rng rng(derive_seed(kProjectionSeed, bucket));
    for (int d = 0; d < dim; ++d) out(d) += count * rng.normal();
  }
  return out / out.norm();
}

template void init_attention_params<double>(ad::ParamStore<double>&, const std::string&, int, int, int, bool, Rng&);
template ad::Var<double> attention_stack<double>(const ParamSource<double>&, const std::string&, ad::Var<double>, int,
                                                 int, const std::optional<ad::Var<double>>&);
template Mat<double> set_attention<double>(const ad::ParamStore<double>&, const std::string&, const Mat<double>&, int,
                                           int);
template class HeadModel<double>;

}  // namespace vql::heads
