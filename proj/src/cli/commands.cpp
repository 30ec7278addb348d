#include "vql/cli/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "vql/cli/plot.hpp"
#include "vql/cli/recipes.hpp"
#include "vql/core/errors.hpp"
#include "vql/synth/scene.hpp"

namespace vql::cli {
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + p.string());
}

json read_config_file(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
}

/// Options shared by the configurable commands.
struct Layered {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd, bool with_seed = true) {
    cmd->add_option("--config", config, "JSON config file layered over the defaults");
    cmd->add_option("--set", sets, "dotted override, e.g. head.variant=siam (repeatable)");
    if (with_seed) cmd->add_option("--seed", seed, "seed of every stochastic step");
  }

  json resolve(json defaults) const {
    if (!config.empty()) defaults.merge_patch(read_config_file(config));
    for (const auto& s : sets) apply_override(defaults, s);
    return defaults;
  }
};

struct Output {
  std::string dir;
  bool overwrite = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--out", dir, "output directory")->required();
    cmd->add_flag("--overwrite", overwrite, "replace existing outputs");
  }

  /// Creates the directory; refuses to clobber `files` without --overwrite.
  fs::path prepare(const std::vector<std::string>& files) const {
    const fs::path root(dir);
    for (const auto& f : files) {
      if (fs::exists(root / f) && !overwrite) {
        throw ConfigError((root / f).string() + " exists (pass --overwrite to replace it)");
      }
    }
    fs::create_directories(root);
    return root;
  }
};

void write_echo(const fs::path& dir, const std::string& command, const json& config, const std::string& hash,
                std::ostream& out) {
  const json echo = {{"command", command}, {"config", config}, {"dataset_hash", hash}};
  write_text(dir / "resolved_config.json", echo.dump(2) + "\n");
  out << "resolved config: " << (dir / "resolved_config.json").string() << "\n";
  out << "dataset hash: " << hash << "\n";
}

std::string file_hash(const fs::path& p) { return hex64(fnv1a64(read_text(p))); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

/// Annotation source of the evaluation commands: a dataset root or a bare annotations file.
struct AnnotationSource {
  std::string data;
  std::string annotations;
  std::string split = "auto";

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", data, "dataset root");
    cmd->add_option("--annotations", annotations, "annotations file (defaults to <data>/annotations.json)");
    cmd->add_option("--split", split, "auto (queries present in the predictions), all, train or test");
  }

  fs::path path() const {
    if (!annotations.empty()) return annotations;
    if (data.empty()) throw ConfigError("pass --data or --annotations");
    return fs::path(data) / "annotations.json";
  }

  std::string hash() const { return data.empty() ? file_hash(path()) : dataset_hash(data); }

  /// Records of the selected split; `present` lists the predicted query ids for "auto".
  std::vector<AnnotationRecord> records(const std::set<std::pair<std::string, int>>& present) const {
    std::vector<AnnotationRecord> all = read_annotations(path());
    if (split == "all") return all;
    std::vector<AnnotationRecord> out;
    if (split == "auto") {
      for (auto& r : all) {
        if (present.count({r.video_id, r.query_index})) out.push_back(std::move(r));
      }
      if (out.empty()) throw DataError("no predicted query matches the annotations");
      return out;
    }
    if (split != "train" && split != "test") throw ConfigError("unknown split '" + split + "'");
    std::vector<std::string> ids;
    if (!data.empty() && fs::is_directory(fs::path(data) / "videos")) {
      for (const auto& e : fs::directory_iterator(fs::path(data) / "videos")) {
        if (e.is_directory()) ids.push_back(e.path().filename().string());
      }
    } else {
      for (const auto& r : all) ids.push_back(r.video_id);
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (auto& r : all) {
      const auto pos = std::lower_bound(ids.begin(), ids.end(), r.video_id) - ids.begin();
      if ((pos % 4 == 3) == (split == "test")) out.push_back(std::move(r));
    }
    return out;
  }
};

int cmd_synthgen(const Layered& layers, const Output& output, std::ostream& out) {
  json doc = layers.resolve(synth::to_json(synth::SceneSpec{}));
  if (layers.seed) doc["seed"] = *layers.seed;
  const synth::SceneSpec spec = synth::scene_spec_from_json(doc);
  const fs::path root = output.prepare({"annotations.json"});
  if (output.overwrite) fs::remove_all(root / "videos");
  const Dataset data = synth::generate(spec, root);
  std::size_t records = 0;
  for (const auto& v : data) records += v.records.size();
  out << "generated " << data.size() << " videos, " << records << " records in " << root.string() << "\n";
  write_echo(root, "synthgen", synth::to_json(spec), dataset_hash(root), out);
  return kOk;
}

int cmd_train(const Layered& layers, const Output& output, const std::string& data_dir, const std::string& pufs_file,
              std::ostream& out) {
  json doc = layers.resolve(train::to_json(train::TrainConfig{}));
  if (layers.seed) doc["seed"] = *layers.seed;
  const train::TrainConfig cfg = train::train_config_from_json(doc);
  const fs::path root = output.prepare({"checkpoint.bin"});
  const Dataset data = load_dataset(data_dir);
  const Split split = split_records(data);
  const features::Featurizer featurizer = train::make_featurizer(cfg);
  features::FeatureCache cache(featurizer);

  std::vector<sampling::TrainingPair> pufs;
  if (cfg.sampler.pufs_enabled) {
    pufs = pufs_file.empty() ? pufs_for(data, split.train, cfg.sampler, {}, cfg.proposals)
                             : sampling::pairs_from_document(json::parse(read_text(pufs_file)));
    out << "P-UFS pool: " << pufs.size() << " pairs\n";
  }
  train::FitHooks hooks;
  hooks.on_checkpoint = [&](const train::Checkpoint& ck) {
    char name[48];
    std::snprintf(name, sizeof(name), "checkpoint_step%06d.bin", ck.step);
    train::save_checkpoint(ck, root / name);
  };
  train::FitLog log;
  const train::Checkpoint ck = train::fit(data, split.train, pufs, cache, cfg, &log, hooks);
  train::save_checkpoint(ck, root / "checkpoint.bin");

  std::ostringstream csv;
  csv << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < log.step_loss.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i + 1, log.step_loss[i]);
    csv << buf;
  }
  write_text(root / "train_log.csv", csv.str());
  out << "trained " << cfg.total_steps << " steps over " << log.epochs << " epochs on " << split.train.size()
      << " records; final loss " << (log.step_loss.empty() ? 0.0 : log.step_loss.back()) << "\n";
  write_echo(root, "train", train::to_json(cfg), dataset_hash(data_dir), out);
  return kOk;
}

int cmd_pufs(const Layered& layers, const Output& output, const std::string& data_dir, const std::string& split_name,
             std::ostream& out) {
  json doc = layers.resolve(sampling::to_json(sampling::SamplerConfig{}));
  if (layers.seed) doc["seed"] = *layers.seed;
  const sampling::SamplerConfig cfg = sampling::sampler_config_from_json(doc);
  const fs::path root = output.prepare({"pufs_pairs.json"});
  const Dataset data = load_dataset(data_dir);
  const auto pairs = pufs_for(data, select_split(data, split_name), cfg);
  write_text(root / "pufs_pairs.json", sampling::pairs_document(pairs, data).dump() + "\n");
  out << "wrote " << pairs.size() << " P-UFS pairs to " << (root / "pufs_pairs.json").string() << "\n";
  write_echo(root, "pufs", sampling::to_json(cfg), dataset_hash(data_dir), out);
  return kOk;
}

int cmd_predict(const Layered& layers, const Output& output, const std::string& data_dir, const std::string& ckpt_path,
                const std::string& split_name, std::ostream& out) {
  const InferenceConfig cfg = inference_config_from_json(layers.resolve(to_json(InferenceConfig{})));
  const fs::path root = output.prepare({"predictions.json", "detections.json"});
  const train::Checkpoint ck = train::load_checkpoint(ckpt_path);
  const Dataset data = load_dataset(data_dir);
  const auto records = select_split(data, split_name);
  if (records.empty()) throw DataError("split '" + split_name + "' has no records");
  const features::Featurizer featurizer = train::make_featurizer(ck.config);
  features::FeatureCache cache(featurizer);
  localize::write_predictions(root / "predictions.json", predict_vq2d(data, records, ck.head, cache, cfg));
  localize::write_detections(root / "detections.json", detect_annotated(data, records, ck.head, cache));
  out << "predicted " << records.size() << " queries (" << split_name << " split)\n";
  write_echo(root, "predict",
             {{"inference", to_json(cfg)}, {"checkpoint", ckpt_path}, {"train", train::to_json(ck.config)},
              {"split", split_name}},
             dataset_hash(data_dir), out);
  return kOk;
}

int cmd_eval_det(const Output& output, const std::string& pred, const AnnotationSource& src, std::ostream& out) {
  const fs::path root = output.prepare({"results.json"});
  const auto dets = localize::read_detections(pred);
  std::set<std::pair<std::string, int>> present;
  for (const auto& d : dets) present.insert({d.video_id, d.query_index});
  const auto records = src.records(present);
  const metrics::DetEvalResult r = metrics::evaluate_detections(dets, records);
  json doc = metrics::to_json(r);
  doc["config_echo"] = {{"predictions", pred},
                        {"annotations", src.path().string()},
                        {"split", src.split},
                        {"iou_thresholds", metrics::coco_thresholds()},
                        {"frames", std::accumulate(records.begin(), records.end(), 0,
                                                   [](int n, const AnnotationRecord& a) { return n + a.gt_track.size(); })}};
  doc["dataset_hash"] = src.hash();
  write_text(root / "results.json", doc.dump(2) + "\n");
  out << "AP = " << fmt(r.ap) << "  AP50 = " << fmt(r.ap50) << "  AP75 = " << fmt(r.ap75) << "  AR@10 = " << fmt(r.ar10)
      << "\n";
  return kOk;
}

int cmd_eval_vq2d(const Output& output, const std::string& pred, const AnnotationSource& src, double tau,
                  std::ostream& out) {
  const fs::path root = output.prepare({"results.json"});
  const auto preds = localize::read_predictions(pred);
  std::set<std::pair<std::string, int>> present;
  for (const auto& p : preds) present.insert({p.video_id, p.query_index});
  const auto records = src.records(present);
  const metrics::Vq2dEvalResult r = metrics::evaluate_vq2d(preds, records);
  std::map<std::pair<std::string, int>, const localize::Prediction*> by_id;
  for (const auto& p : preds) by_id[{p.video_id, p.query_index}] = &p;
  std::vector<localize::ScoreTimeline> timelines;
  std::vector<const AnnotationRecord*> recs;
  for (const auto& rec : records) {
    timelines.push_back(by_id.at({rec.video_id, rec.query_index})->timeline);
    recs.push_back(&rec);
  }
  const double fp = metrics::fp_rate_on_negatives(timelines, recs, tau);
  json doc = metrics::to_json(r);
  doc["fp_rate"] = fp;
  const metrics::Vq2dOptions opts;
  doc["config_echo"] = {{"predictions", pred},
                        {"annotations", src.path().string()},
                        {"split", src.split},
                        {"queries", records.size()},
                        {"match_threshold", opts.match_threshold},
                        {"success_threshold", opts.success_threshold},
                        {"recovery_iou", opts.recovery_iou},
                        {"fp_tau", tau}};
  doc["dataset_hash"] = src.hash();
  write_text(root / "results.json", doc.dump(2) + "\n");
  out << "tAP25 = " << fmt(r.tap25) << "  stAP25 = " << fmt(r.stap25) << "  rec% = " << fmt(r.rec_percent)
      << "  Succ = " << fmt(r.succ) << "  fp_rate = " << fmt(fp) << "\n";
  return kOk;
}

int cmd_plot_timeline(const Output& output, const std::string& pred, const AnnotationSource& src,
                      const std::string& query, std::ostream& out) {
  const auto hash_pos = query.rfind('#');
  if (hash_pos == std::string::npos) throw ConfigError("--query must look like <video_id>#<query_index>");
  const std::string vid = query.substr(0, hash_pos);
  int index = 0;
  try {
    index = std::stoi(query.substr(hash_pos + 1));
  } catch (const std::exception&) {
    throw ConfigError("--query index is not an integer: " + query);
  }
  const fs::path root = output.prepare({"timeline.csv", "timeline.png", "timeline_meta.json"});
  const auto preds = localize::read_predictions(pred);
  const auto p = std::find_if(preds.begin(), preds.end(),
                              [&](const localize::Prediction& x) { return x.video_id == vid && x.query_index == index; });
  if (p == preds.end()) throw DataError("query " + query + " not in " + pred);
  const auto records = read_annotations(src.path());
  const auto r = std::find_if(records.begin(), records.end(),
                              [&](const AnnotationRecord& x) { return x.video_id == vid && x.query_index == index; });
  if (r == records.end()) throw DataError("query " + query + " not in " + src.path().string());

  write_text(root / "timeline.csv", timeline_csv(p->timeline));
  const TimelinePlot plot = render_timeline(p->timeline, r->gt_track, p->peak.frame, r->query.query_frame);
  write_png(root / "timeline.png", plot.image);
  json meta = plot.metadata;
  meta["query"] = query;
  write_text(root / "timeline_meta.json", meta.dump(2) + "\n");
  out << "wrote " << p->timeline.size() << " timeline points for " << query << " to " << root.string() << "\n";
  return kOk;
}

int cmd_ablation(const Layered& layers, const Output& output, const std::string& data_dir, int seeds,
                 std::ostream& out) {
  json doc = layers.resolve(train::to_json(train::TrainConfig{}));
  if (layers.seed) doc["seed"] = *layers.seed;
  const train::TrainConfig base = train::train_config_from_json(doc);
  if (seeds < 1) throw ConfigError("--seeds must be >= 1");
  const fs::path root = output.prepare({"ablation.json", "ablation.md"});
  const Dataset data = load_dataset(data_dir);
  const features::Featurizer featurizer = train::make_featurizer(base);
  features::FeatureCache cache(featurizer);

  std::vector<RunSpec> specs;
  for (int k = 0; k < seeds; ++k) {
    train::TrainConfig cfg = base;
    cfg.seed = base.seed + static_cast<std::uint64_t>(k);
    for (auto& s : ablation_grid(cfg)) specs.push_back(std::move(s));
  }
  const InferenceConfig infer;
  const auto runs = run_grid(data, specs, infer, cache, [&](const RunOutcome& r) {
    out << r.name << " seed " << r.seed << ": Succ " << fmt(r.eval.vq2d.succ) << " stAP25 " << fmt(r.eval.vq2d.stap25)
        << " AP " << fmt(r.eval.det.ap) << "\n"
        << std::flush;
  });
  json per_run = json::array();
  for (const auto& r : runs) per_run.push_back({{"name", r.name}, {"seed", r.seed}, {"metrics", to_json(r.eval)}});
  const json summary = summarize(runs);
  write_text(root / "ablation.json", json({{"runs", per_run}, {"summary", summary}}).dump(2) + "\n");
  const std::string table = summary_table(summary);
  write_text(root / "ablation.md", table);
  out << table;
  write_echo(root, "ablation", {{"train", train::to_json(base)}, {"inference", to_json(infer)}, {"seeds", seeds}},
             dataset_hash(data_dir), out);
  return kOk;
}

}  // namespace

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key segment in override '" + path + "'");
    if (!node->is_object()) throw ConfigError("override '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"vqlab: visual query localization laboratory"};
  app.require_subcommand(1);

  Layered layers;
  Output output;
  std::string data_dir, pufs_file, ckpt, split = "test", pred, query, pufs_split = "train";
  AnnotationSource src;
  double tau = 0.6;
  int seeds = 1;

  auto* synthgen = app.add_subcommand("synthgen", "generate a synthetic video dataset");
  layers.attach(synthgen);
  output.attach(synthgen);

  auto* train = app.add_subcommand("train", "train a head on the train split");
  layers.attach(train);
  output.attach(train);
  train->add_option("--data", data_dir, "dataset root")->required();
  train->add_option("--pufs", pufs_file, "pufs_pairs.json to draw P-UFS pairs from");

  auto* pufs = app.add_subcommand("pufs", "generate P-UFS pseudo pairs");
  layers.attach(pufs);
  output.attach(pufs);
  pufs->add_option("--data", data_dir, "dataset root")->required();
  pufs->add_option("--split", pufs_split, "train, test or all");

  auto* predict = app.add_subcommand("predict", "run the localization pipeline with a checkpoint");
  layers.attach(predict, false);
  output.attach(predict);
  predict->add_option("--data", data_dir, "dataset root")->required();
  predict->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  predict->add_option("--split", split, "train, test or all");

  auto* eval_det = app.add_subcommand("eval-det", "detection AP on annotated frames");
  output.attach(eval_det);
  eval_det->add_option("--pred", pred, "detections file (or an annotations file)")->required();
  src.attach(eval_det);

  auto* eval_vq2d = app.add_subcommand("eval-vq2d", "track-level VQ2D metrics");
  output.attach(eval_vq2d);
  eval_vq2d->add_option("--pred", pred, "predictions file")->required();
  eval_vq2d->add_option("--tau", tau, "score threshold of the negative-frame false-positive rate");
  src.attach(eval_vq2d);

  auto* plot = app.add_subcommand("plot-timeline", "score timeline of one query as CSV and PNG");
  output.attach(plot);
  plot->add_option("--pred", pred, "predictions file")->required();
  plot->add_option("--query", query, "<video_id>#<query_index>")->required();
  src.attach(plot);

  auto* ablation = app.add_subcommand("ablation", "head variants and sampler switches in one table");
  layers.attach(ablation);
  output.attach(ablation);
  ablation->add_option("--data", data_dir, "dataset root")->required();
  ablation->add_option("--seeds", seeds, "runs per configuration, seeds seed, seed + 1, ...");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*synthgen) return cmd_synthgen(layers, output, out);
    if (*train) return cmd_train(layers, output, data_dir, pufs_file, out);
    if (*pufs) return cmd_pufs(layers, output, data_dir, pufs_split, out);
    if (*predict) return cmd_predict(layers, output, data_dir, ckpt, split, out);
    if (*eval_det) return cmd_eval_det(output, pred, src, out);
    if (*eval_vq2d) return cmd_eval_vq2d(output, pred, src, tau, out);
    if (*plot) return cmd_plot_timeline(output, pred, src, query, out);
    if (*ablation) return cmd_ablation(layers, output, data_dir, seeds, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const NumericError& e) {
    err << "numeric divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const json::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  }
  return kFailure;
}

}  // namespace vql::cli
