#include "vql/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vql::train {
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kSmoothL1Beta = 1.0;

json backbone_json(const features::BackboneConfig& b) {
  return {{"channels", b.channels}, {"grid", b.grid}, {"samples", b.samples}, {"feature_dim", b.feature_dim}};
}

json proposals_json(const features::ProposalConfig& p) {
  return {{"max_proposals", p.max_proposals}, {"contrast_threshold", p.contrast_threshold},
          {"fit_threshold", p.fit_threshold},   {"min_area", p.min_area},
          {"merge_gap", p.merge_gap},           {"jitter", p.jitter},
          {"num_reserve", p.num_reserve}};
}

template <typename T>
void read_key(const json& v, T& out) {
  out = v.get<T>();
}

/// Applies `fn(key, value)` to every entry, turning JSON type errors into ConfigErrors.
template <typename Fn>
void for_each_key(const json& j, const std::string& section, Fn fn) {
  if (!j.is_object()) throw ConfigError(section + " must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (!fn(key, v)) throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

Eigen::MatrixXd box_targets(const features::ProposalSet& pset, const Box& gt) {
  Eigen::MatrixXd t(pset.size(), 4);
  for (int j = 0; j < pset.size(); ++j) t.row(j) = heads::encode_deltas(pset.proposals[j].box, gt).transpose();
  return t;
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

double Schedule::lr_at(int step) const {
  double lr = initial_lr;
  for (int s : decay_steps) {
    if (step >= s) lr *= decay_factor;
  }
  return lr;
}

void validate(const TrainConfig& cfg) {
  heads::validate(cfg.head);
  sampling::validate(cfg.sampler);
  if (!(cfg.schedule.initial_lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (!(cfg.schedule.decay_factor > 0.0 && cfg.schedule.decay_factor <= 1.0)) {
    throw ConfigError("decay factor must lie in (0, 1]");
  }
  if (cfg.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (cfg.total_steps < 0) throw ConfigError("total steps must be >= 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(cfg.weight_decay >= 0.0) || !(cfg.cls_weight >= 0.0) || !(cfg.box_weight >= 0.0)) {
    throw ConfigError("loss weights and weight decay must be >= 0");
  }
  if (!(cfg.pos_weight_cap >= 1.0)) throw ConfigError("positive weight cap must be >= 1");
  if (!(cfg.clamp_eps > 0.0 && cfg.clamp_eps < 0.5)) throw ConfigError("clamp eps must lie in (0, 0.5)");
  if (cfg.head.feature_dim != cfg.backbone.feature_dim) throw ConfigError("head.feature_dim must equal backbone.feature_dim");
}

json to_json(const TrainConfig& cfg) {
  return {{"head", heads::to_json(cfg.head)},
          {"sampler", sampling::to_json(cfg.sampler)},
          {"schedule",
           {{"initial_lr", cfg.schedule.initial_lr},
            {"decay_steps", cfg.schedule.decay_steps},
            {"decay_factor", cfg.schedule.decay_factor}}},
          {"batch_size", cfg.batch_size},
          {"total_steps", cfg.total_steps},
          {"seed", cfg.seed},
          {"cls_weight", cfg.cls_weight},
          {"box_weight", cfg.box_weight},
          {"momentum", cfg.momentum},
          {"weight_decay", cfg.weight_decay},
          {"pos_weight_cap", cfg.pos_weight_cap},
          {"clamp_eps", cfg.clamp_eps},
          {"checkpoint_every", cfg.checkpoint_every},
          {"backbone_seed", cfg.backbone_seed},
          {"backbone", backbone_json(cfg.backbone)},
          {"proposals", proposals_json(cfg.proposals)}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig cfg;
  for_each_key(j, "", [&](const std::string& key, const json& v) {
    if (key == "head") {
      cfg.head = heads::head_config_from_json(v);
    } else if (key == "sampler") {
      cfg.sampler = sampling::sampler_config_from_json(v);
    } else if (key == "schedule") {
      for_each_key(v, "schedule", [&](const std::string& k, const json& s) {
        if (k == "initial_lr") read_key(s, cfg.schedule.initial_lr);
        else if (k == "decay_steps") read_key(s, cfg.schedule.decay_steps);
        else if (k == "decay_factor") read_key(s, cfg.schedule.decay_factor);
        else return false;
        return true;
      });
    } else if (key == "backbone") {
      for_each_key(v, "backbone", [&](const std::string& k, const json& s) {
        if (k == "channels") read_key(s, cfg.backbone.channels);
        else if (k == "grid") read_key(s, cfg.backbone.grid);
        else if (k == "samples") read_key(s, cfg.backbone.samples);
        else if (k == "feature_dim") read_key(s, cfg.backbone.feature_dim);
        else return false;
        return true;
      });
    } else if (key == "proposals") {
      for_each_key(v, "proposals", [&](const std::string& k, const json& s) {
        if (k == "max_proposals") read_key(s, cfg.proposals.max_proposals);
        else if (k == "contrast_threshold") read_key(s, cfg.proposals.contrast_threshold);
        else if (k == "fit_threshold") read_key(s, cfg.proposals.fit_threshold);
        else if (k == "min_area") read_key(s, cfg.proposals.min_area);
        else if (k == "merge_gap") read_key(s, cfg.proposals.merge_gap);
        else if (k == "jitter") read_key(s, cfg.proposals.jitter);
        else if (k == "num_reserve") read_key(s, cfg.proposals.num_reserve);
        else return false;
        return true;
      });
    } else if (key == "batch_size") read_key(v, cfg.batch_size);
    else if (key == "total_steps") read_key(v, cfg.total_steps);
    else if (key == "seed") read_key(v, cfg.seed);
    else if (key == "cls_weight") read_key(v, cfg.cls_weight);
    else if (key == "box_weight") read_key(v, cfg.box_weight);
    else if (key == "momentum") read_key(v, cfg.momentum);
    else if (key == "weight_decay") read_key(v, cfg.weight_decay);
    else if (key == "pos_weight_cap") read_key(v, cfg.pos_weight_cap);
    else if (key == "clamp_eps") read_key(v, cfg.clamp_eps);
    else if (key == "checkpoint_every") read_key(v, cfg.checkpoint_every);
    else if (key == "backbone_seed") read_key(v, cfg.backbone_seed);
    else return false;
    return true;
  });
  validate(cfg);
  return cfg;
}

Eigen::VectorXd bce_weights(const Eigen::VectorXd& labels, double cap) {
  const double pos = labels.sum();
  const double neg = static_cast<double>(labels.size()) - pos;
  const double wpos = pos > 0.0 && neg > 0.0 ? std::min(neg / pos, cap) : 1.0;
  return labels.unaryExpr([wpos](double y) { return y > 0.5 ? wpos : 1.0; });
}

LossValue loss(const Eigen::VectorXd& scores, const Eigen::MatrixXd& deltas, const Eigen::VectorXd& labels,
               const std::optional<Box>& gt, const features::ProposalSet& pset, const TrainConfig& cfg) {
  if (scores.size() != labels.size() || scores.size() != pset.size()) throw DataError("loss: label count mismatch");
  const Eigen::VectorXd w = bce_weights(labels, cfg.pos_weight_cap);
  LossValue out;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores(i), cfg.clamp_eps, 1.0 - cfg.clamp_eps);
    out.cls -= w(i) * (labels(i) * std::log(p) + (1.0 - labels(i)) * std::log(1.0 - p));
  }
  out.cls /= w.sum();
  const double npos = labels.sum();
  if (deltas.size() != 0 && gt && npos > 0.0) {
    const Eigen::MatrixXd targets = box_targets(pset, *gt);
    for (Eigen::Index i = 0; i < deltas.rows(); ++i) {
      if (labels(i) == 0.0) continue;
      for (Eigen::Index k = 0; k < 4; ++k) {
        const double a = std::abs(deltas(i, k) - targets(i, k));
        out.box += a < kSmoothL1Beta ? 0.5 * a * a / kSmoothL1Beta : a - 0.5 * kSmoothL1Beta;
      }
    }
    out.box /= npos;
  }
  out.total = cfg.cls_weight * out.cls + cfg.box_weight * out.box;
  return out;
}

ad::Var<double> loss(const heads::HeadModel<double>::Graph& g, const Eigen::VectorXd& labels,
                     const std::optional<Box>& gt, const features::ProposalSet& pset, const TrainConfig& cfg) {
  if (g.probs.rows() != labels.size() || labels.size() != pset.size()) throw DataError("loss: label count mismatch");
  const Eigen::MatrixXd y = labels;
  const Eigen::MatrixXd w = bce_weights(labels, cfg.pos_weight_cap);
  auto total = ad::scale(ad::weighted_bce(g.probs, y, w, cfg.clamp_eps), cfg.cls_weight);
  const double npos = labels.sum();
  if (g.deltas && gt && npos > 0.0) {
    const auto box = ad::smooth_l1(*g.deltas, box_targets(pset, *gt), y, kSmoothL1Beta, npos);
    total = total + ad::scale(box, cfg.box_weight);
  }
  return total;
}

features::Featurizer make_featurizer(const TrainConfig& cfg) {
  return features::Featurizer(features::Backbone<double>(cfg.backbone, cfg.backbone_seed), cfg.proposals);
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> feature_statistics(const Dataset& data,
                                                               const std::vector<const AnnotationRecord*>& records,
                                                               features::FeatureCache& cache) {
  const int C = cache.featurizer().feature_dim();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(C), sq = Eigen::VectorXd::Zero(C);
  double n = 0.0;
  for (const AnnotationRecord* rec : records) {
    const VideoClip& clip = find_video(data, rec->video_id).clip;
    const int last = std::min(rec->query.query_frame, clip.size() - 1);
    for (int f = rec->gt_track.start; f <= last; ++f) {
      const auto& x = cache.get(clip.frames[static_cast<std::size_t>(f)]).features;
      sum += x.colwise().sum().transpose();
      sq += x.array().square().colwise().sum().matrix().transpose();
      n += static_cast<double>(x.rows());
    }
  }
  if (n < 2.0) throw DataError("feature statistics: too few proposals");
  const Eigen::VectorXd mean = sum / n;
  const Eigen::VectorXd var = (sq / n - mean.array().square().matrix()).cwiseMax(0.0);
  return {mean, var.cwiseSqrt().cwiseMax(1e-6)};
}

void sgd_step(heads::HeadModel<double>& head, std::map<std::string, Eigen::MatrixXd>& momentum, double lr,
              const TrainConfig& cfg) {
  for (auto& [name, p] : head.params()) {
    Eigen::MatrixXd& v = momentum[name];
    if (v.size() == 0) v = Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols());
    v = cfg.momentum * v + p.grad + cfg.weight_decay * p.value;
    p.value -= lr * v;
  }
}

Checkpoint fit(const Dataset& data, const std::vector<const AnnotationRecord*>& records,
               const std::vector<sampling::TrainingPair>& pufs, features::FeatureCache& cache, const TrainConfig& cfg,
               FitLog* log, const FitHooks& hooks) {
  validate(cfg);
  if (cache.featurizer().feature_dim() != cfg.head.feature_dim) {
    throw ConfigError("feature cache dimension does not match the head");
  }
  if (records.empty()) throw DataError("fit: no training records");
  Checkpoint ck;
  ck.config = cfg;
  ck.head = heads::HeadModel<double>(cfg.head, derive_seed(cfg.seed, 1));
  if (cfg.head.variant != heads::Variant::kSiam) {
    const auto [mean, scale] = feature_statistics(data, records, cache);
    ck.head.set_input_normalization(mean, scale);
  }
  for (const auto& [name, p] : ck.head.params()) ck.momentum[name] = Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols());

  Rng stream(derive_seed(cfg.seed, 2));
  sampling::SamplerConfig sampler = cfg.sampler;
  std::vector<sampling::EpochItem> items;
  std::size_t pos = 0;
  std::uint64_t epoch = 0;
  std::map<std::string, Eigen::VectorXd> titles;

  for (int step = 0; step < cfg.total_steps; ++step) {
    ck.head.params().zero_grad();
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (pos == items.size()) {
        sampler.seed = stream.next();
        items = sampling::build_epoch(data, records, pufs, cache, sampler, epoch++);
        pos = 0;
        if (items.empty()) throw DataError("fit: empty training stream");
      }
      const sampling::EpochItem& item = items[pos++];
      const Eigen::VectorXd& q = cache.embedding(item.pair.query_key(), sampling::pair_crop(data, item.pair));
      const Eigen::VectorXd* title = nullptr;
      if (cfg.head.use_text) {
        const std::string t = item.pair.title.value_or("object");
        auto it = titles.find(t);
        if (it == titles.end()) it = titles.emplace(t, heads::embed_title(t, cfg.head.title_dim)).first;
        title = &it->second;
      }
      ad::Tape<double> tape;
      const auto g = ck.head.forward(tape, q, title, item.proposals.features);
      const auto l = loss(g, item.labels, item.pair.gt_box, item.proposals, cfg);
      tape.backward(ad::scale(l, 1.0 / cfg.batch_size));
      batch_loss += l.value()(0, 0) / cfg.batch_size;
    }
    if (!std::isfinite(batch_loss)) {
      throw NumericError("training diverged at step " + std::to_string(step) + " (non-finite loss)");
    }
    sgd_step(ck.head, ck.momentum, cfg.schedule.lr_at(step), cfg);
    ck.step = step + 1;
    if (log) log->step_loss.push_back(batch_loss);
    if (hooks.on_step) hooks.on_step(step, batch_loss);
    if (cfg.checkpoint_every > 0 && ck.step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) {
      ck.rng_state = stream.state();
      hooks.on_checkpoint(ck);
    }
  }
  ck.rng_state = stream.state();
  if (log) log->epochs = static_cast<int>(epoch);
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  struct Entry {
    std::string name;
    const Eigen::MatrixXd* m;
  };
  std::vector<Entry> arrays;
  Eigen::MatrixXd mean = ckpt.head.input_mean(), scale = ckpt.head.input_scale();
  arrays.push_back({"input/mean", &mean});
  arrays.push_back({"input/scale", &scale});
  for (const auto& [name, p] : ckpt.head.params()) arrays.push_back({"param/" + name, &p.value});
  for (const auto& [name, m] : ckpt.momentum) arrays.push_back({"momentum/" + name, &m});

  std::ostringstream manifest;
  manifest << Checkpoint::kVersion << "\n";
  manifest << "config " << to_json(ckpt.config).dump() << "\n";
  manifest << "step " << ckpt.step << "\n";
  manifest << "rng " << ckpt.rng_state << "\n";
  manifest << "arrays " << arrays.size() << "\n";
  std::uint64_t offset = 0;
  for (const Entry& e : arrays) {
    manifest << e.name << " f64 " << e.m->rows() << " " << e.m->cols() << " " << offset << "\n";
    offset += static_cast<std::uint64_t>(e.m->size()) * 8;
  }
  manifest << "payload " << offset << "\n";

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << manifest.str();
  for (const Entry& e : arrays) {
    // Row-major order on disk.
    for (Eigen::Index r = 0; r < e.m->rows(); ++r) {
      for (Eigen::Index c = 0; c < e.m->cols(); ++c) {
        std::uint64_t bits;
        const double v = (*e.m)(r, c);
        std::memcpy(&bits, &v, 8);
        write_u64(out, bits);
      }
    }
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t cursor = 0;
  auto next_line = [&]() {
    const std::size_t end = bytes.find('\n', cursor);
    if (end == std::string::npos) throw DataError("checkpoint: truncated manifest");
    std::string line = bytes.substr(cursor, end - cursor);
    cursor = end + 1;
    return line;
  };
  auto field = [&](const std::string& key) {
    const std::string line = next_line();
    if (line.rfind(key + " ", 0) != 0) throw DataError("checkpoint: expected '" + key + "'");
    return line.substr(key.size() + 1);
  };

  const std::string version = next_line();
  if (version != Checkpoint::kVersion) {
    throw DataError("checkpoint version mismatch: file has '" + version + "', expected '" + Checkpoint::kVersion + "'");
  }
  Checkpoint ck;
  try {
    ck.config = train_config_from_json(json::parse(field("config")));
    ck.step = std::stoi(field("step"));
    ck.rng_state = field("rng");
    const int count = std::stoi(field("arrays"));
    struct Entry {
      std::string name;
      Eigen::Index rows, cols;
      std::uint64_t offset;
    };
    std::vector<Entry> entries;
    for (int i = 0; i < count; ++i) {
      std::istringstream ls(next_line());
      Entry e;
      std::string dtype;
      ls >> e.name >> dtype >> e.rows >> e.cols >> e.offset;
      if (!ls || dtype != "f64") throw DataError("checkpoint: bad array entry");
      entries.push_back(e);
    }
    const std::uint64_t payload = std::stoull(field("payload"));
    if (bytes.size() - cursor != payload) throw DataError("checkpoint: payload size mismatch");
    const auto* base = reinterpret_cast<const unsigned char*>(bytes.data() + cursor);

    ck.head = heads::HeadModel<double>(ck.config.head, 0);
    Eigen::VectorXd mean, scale;
    for (const Entry& e : entries) {
      if (e.offset + static_cast<std::uint64_t>(e.rows * e.cols) * 8 > payload) throw DataError("checkpoint: array past payload end");
      Eigen::MatrixXd m(e.rows, e.cols);
      for (Eigen::Index r = 0; r < e.rows; ++r) {
        for (Eigen::Index c = 0; c < e.cols; ++c) {
          const std::uint64_t bits = read_u64(base + e.offset + static_cast<std::uint64_t>(r * e.cols + c) * 8);
          std::memcpy(&m(r, c), &bits, 8);
        }
      }
      if (e.name == "input/mean") {
        mean = m.col(0);
      } else if (e.name == "input/scale") {
        scale = m.col(0);
      } else if (e.name.rfind("param/", 0) == 0) {
        Eigen::MatrixXd& dst = ck.head.params().value(e.name.substr(6));
        if (dst.rows() != m.rows() || dst.cols() != m.cols()) throw DataError("checkpoint: shape mismatch for " + e.name);
        dst = m;
      } else if (e.name.rfind("momentum/", 0) == 0) {
        ck.momentum[e.name.substr(9)] = m;
      } else {
        throw DataError("checkpoint: unknown array " + e.name);
      }
    }
    ck.head.set_input_normalization(mean, scale);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw DataError("checkpoint: malformed number in manifest");
  } catch (const std::out_of_range&) {
    throw DataError("checkpoint: number out of range in manifest");
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

}  // namespace vql::train
