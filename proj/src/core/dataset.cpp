#include "vql/core/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace vql {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out << bytes;
}

std::string record_name(const std::string& video_id, int query_index) {
  return "record (video " + video_id + ", query " + std::to_string(query_index) + ")";
}

Box parse_box(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4) throw DataError(where + ": box must be [x, y, w, h]");
  for (const auto& v : j) {
    if (!v.is_number()) throw DataError(where + ": box entries must be numbers");
  }
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!is_valid(b)) throw DataError(where + ": box has non-positive size or non-finite coordinates");
  return b;
}

json box_json(const Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

struct RawRecord {
  std::string video_id;
  double fps;
  int query_frame;
  int crop_frame;
  Box crop_box;
  std::optional<std::string> title;
  ResponseTrack track;
};

/// Records grouped by video, in document order within each video.
std::map<std::string, std::vector<RawRecord>> parse_annotations(const json& doc) {
  if (!doc.is_array()) throw DataError("annotations.json: expected a list of records");
  std::map<std::string, std::vector<RawRecord>> by_video;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& r = doc[i];
    std::string where = "annotation " + std::to_string(i);
    try {
      RawRecord raw;
      raw.video_id = r.at("video_id").get<std::string>();
      where += " (video " + raw.video_id + ")";
      raw.fps = r.at("fps").get<double>();
      if (!(raw.fps > 0.0)) throw DataError(where + ": fps must be positive");
      const json& q = r.at("query");
      raw.query_frame = q.at("frame_idx").get<int>();
      raw.crop_box = parse_box(q.at("box"), where);
      raw.crop_frame = q.contains("crop_frame") ? q.at("crop_frame").get<int>() : raw.query_frame;
      if (q.contains("title") && !q.at("title").is_null()) raw.title = q.at("title").get<std::string>();
      const json& t = r.at("response_track");
      raw.track.start = t.at("start").get<int>();
      for (const json& b : t.at("boxes")) raw.track.boxes.push_back(parse_box(b, where));
      by_video[raw.video_id].push_back(std::move(raw));
    } catch (const json::exception& e) {
      throw DataError(where + ": malformed record: " + e.what());
    }
  }

  return by_video;
}


VideoClip load_clip(const fs::path& root, const std::string& video_id, double fps) {
  VideoClip clip;
  clip.video_id = video_id;
  clip.fps = fps;
  const fs::path dir = root / "videos" / video_id / "frames";
  if (!fs::is_directory(dir)) throw DataError("video " + video_id + ": missing frames directory");
  std::vector<int> indices;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".png") continue;
    const std::string stem = e.path().stem().string();
    if (stem.size() != 6 || !std::all_of(stem.begin(), stem.end(), ::isdigit)) {
      throw DataError("video " + video_id + ": unexpected frame file " + e.path().filename().string());
    }
    indices.push_back(std::stoi(stem));
  }
  std::sort(indices.begin(), indices.end());
  if (indices.empty()) throw DataError("video " + video_id + ": no frames");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] != static_cast<int>(i)) {
      throw DataError("video " + video_id + ": missing frame " + std::to_string(i));
    }
  }
  clip.frames.reserve(indices.size());
  for (int idx : indices) {
    Frame f{video_id, idx, read_png(frame_path(root, video_id, idx))};
    if (!clip.frames.empty() && (f.height() != clip.height() || f.width() != clip.width())) {
      throw DataError("video " + video_id + ": frame " + std::to_string(idx) + " has a different resolution");
    }
    clip.frames.push_back(std::move(f));
  }
  return clip;
}

}  // namespace

fs::path frame_path(const fs::path& root, const std::string& video_id, int index) {
  char name[32];
  std::snprintf(name, sizeof(name), "%06d.png", index);
  return root / "videos" / video_id / "frames" / name;
}

Image extract_crop(const VideoClip& clip, int crop_frame, const Box& crop_box) {
  if (crop_frame < 0 || crop_frame >= clip.size()) throw DataError("crop frame outside clip");
  return crop(clip.frames[static_cast<std::size_t>(crop_frame)].image(), crop_box);
}

void validate_record(const VideoClip& clip, const AnnotationRecord& rec) {
  const std::string name = record_name(rec.video_id, rec.query_index);
  try {
    validate(rec.gt_track);
  } catch (const DataError& e) {
    throw DataError(name + ": " + e.what());
  }
  const int n = clip.size();
  if (rec.gt_track.last() >= n) throw DataError(name + ": response track extends past the clip");
  if (rec.query.query_frame < 0 || rec.query.query_frame >= n) {
    throw DataError(name + ": query frame outside the clip");
  }
  if (rec.gt_track.last() >= rec.query.query_frame) {
    throw DataError(name + ": response track must end before the query frame");
  }
  if (rec.query.crop_frame < 0 || rec.query.crop_frame >= n) throw DataError(name + ": crop frame outside the clip");
  if (!clip_to_frame(rec.query.crop_box, clip.width(), clip.height())) {
    throw DataError(name + ": crop box outside the frame");
  }
  if (rec.query.crop.empty()) throw DataError(name + ": empty query crop");
}

Dataset load_dataset(const fs::path& root) {
  const fs::path ann_path = root / "annotations.json";
  json doc;
  try {
    doc = json::parse(read_file(ann_path));
  } catch (const json::exception& e) {
    throw DataError("annotations.json: " + std::string(e.what()));
  }
  if (!doc.is_array()) throw DataError("annotations.json: expected a list of records");

  double default_fps = 10.0;
  if (fs::exists(root / "spec.json")) {
    try {
      const json spec = json::parse(read_file(root / "spec.json"));
      if (spec.contains("fps")) default_fps = spec.at("fps").get<double>();
    } catch (const json::exception& e) {
      throw DataError("spec.json: " + std::string(e.what()));
    }
  }

  const auto by_video = parse_annotations(doc);

  std::vector<std::string> ids;
  if (fs::is_directory(root / "videos")) {
    for (const auto& e : fs::directory_iterator(root / "videos")) {
      if (e.is_directory()) ids.push_back(e.path().filename().string());
    }
  }
  std::sort(ids.begin(), ids.end());
  for (const auto& [vid, recs] : by_video) {
    if (!std::binary_search(ids.begin(), ids.end(), vid)) {
      throw DataError(record_name(vid, 0) + ": no such video directory");
    }
  }

  Dataset out;
  out.reserve(ids.size());
  for (const std::string& vid : ids) {
    auto it = by_video.find(vid);
    const double fps = it != by_video.end() ? it->second.front().fps : default_fps;
    VideoEntry entry{load_clip(root, vid, fps), {}};
    if (it != by_video.end()) {
      int qi = 0;
      for (const RawRecord& raw : it->second) {
        AnnotationRecord rec;
        rec.video_id = vid;
        rec.query_index = qi++;
        rec.query.query_frame = raw.query_frame;
        rec.query.crop_frame = raw.crop_frame;
        rec.query.crop_box = raw.crop_box;
        rec.query.title = raw.title;
        rec.gt_track = raw.track;
        const std::string name = record_name(vid, rec.query_index);
        if (rec.query.crop_frame < 0 || rec.query.crop_frame >= entry.clip.size() ||
            !clip_to_frame(rec.query.crop_box, entry.clip.width(), entry.clip.height())) {
          throw DataError(name + ": query crop outside the clip");
        }
        rec.query.crop = extract_crop(entry.clip, rec.query.crop_frame, rec.query.crop_box);
        validate_record(entry.clip, rec);
        entry.records.push_back(std::move(rec));
      }
    }
    out.push_back(std::move(entry));
  }
  return out;
}

std::vector<AnnotationRecord> read_annotations(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw DataError(path.filename().string() + ": " + std::string(e.what()));
  }
  std::vector<AnnotationRecord> out;
  for (const auto& [vid, recs] : parse_annotations(doc)) {
    int qi = 0;
    for (const RawRecord& raw : recs) {
      AnnotationRecord rec;
      rec.video_id = vid;
      rec.query_index = qi++;
      rec.query.query_frame = raw.query_frame;
      rec.query.crop_frame = raw.crop_frame;
      rec.query.crop_box = raw.crop_box;
      rec.query.title = raw.title;
      rec.gt_track = raw.track;
      validate(rec.gt_track);
      if (rec.gt_track.last() >= rec.query.query_frame) {
        throw DataError(record_name(vid, rec.query_index) + ": response track must end before the query frame");
      }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

std::string annotations_document(const Dataset& data) {
  json doc = json::array();
  for (const VideoEntry& v : data) {
    for (const AnnotationRecord& r : v.records) {
      json q = {{"frame_idx", r.query.query_frame}, {"crop_frame", r.query.crop_frame}, {"box", box_json(r.query.crop_box)}};
      if (r.query.title) q["title"] = *r.query.title;
      json boxes = json::array();
      for (const Box& b : r.gt_track.boxes) boxes.push_back(box_json(b));
      doc.push_back({{"video_id", r.video_id},
                     {"fps", v.clip.fps},
                     {"query", q},
                     {"response_track", {{"start", r.gt_track.start}, {"boxes", boxes}}}});
    }
  }
  return doc.dump(1) + "\n";
}

void save_dataset(const Dataset& data, const fs::path& root) {
  try {
    fs::create_directories(root / "videos");
  } catch (const fs::filesystem_error& e) {
    throw DataError(std::string("cannot create dataset directory: ") + e.what());
  }
  for (const VideoEntry& v : data) {
    fs::create_directories(root / "videos" / v.clip.video_id / "frames");
    for (const Frame& f : v.clip.frames) write_png(frame_path(root, v.clip.video_id, f.index), f.pixels);
  }
  write_file(root / "annotations.json", annotations_document(data));
}

std::uint64_t fnv1a64(const std::string& bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string dataset_hash(const fs::path& root) {
  std::uint64_t h = fnv1a64(read_file(root / "annotations.json"));
  if (fs::exists(root / "spec.json")) h = fnv1a64(read_file(root / "spec.json"), h);
  return hex64(h);
}

const VideoEntry& find_video(const Dataset& data, const std::string& video_id) {
  for (const VideoEntry& v : data) {
    if (v.clip.video_id == video_id) return v;
  }
  throw DataError("unknown video " + video_id);
}

}  // namespace vql
