#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vql/core/box.hpp"
#include "vql/core/image.hpp"
#include "vql/core/track.hpp"

namespace vql {

struct Frame {
  std::string video_id;
  int index = 0;
  ImageU8 pixels;

  /// Pixels normalized to [0, 1].
  Image image() const { return to_real<double>(pixels); }
  int height() const { return pixels.height; }
  int width() const { return pixels.width; }
};

struct VideoClip {
  std::string video_id;
  double fps = 10.0;
  std::vector<Frame> frames;

  int size() const { return static_cast<int>(frames.size()); }
  int height() const { return frames.empty() ? 0 : frames.front().height(); }
  int width() const { return frames.empty() ? 0 : frames.front().width(); }
};

/// The visual crop of the queried object plus the frame at which the question is asked.
/// `crop_frame` / `crop_box` locate the crop in the source clip.
struct VisualQuery {
  Image crop;
  std::optional<std::string> title;
  int query_frame = 0;
  int crop_frame = 0;
  Box crop_box;
};

struct AnnotationRecord {
  std::string video_id;
  int query_index = 0;  // position among this video's records
  VisualQuery query;
  ResponseTrack gt_track;
};

struct VideoEntry {
  VideoClip clip;
  std::vector<AnnotationRecord> records;
};

using Dataset = std::vector<VideoEntry>;

/// Checks every record invariant against its clip; throws DataError naming the record.
void validate_record(const VideoClip& clip, const AnnotationRecord& rec);

/// Builds the crop of `rec.query` from the clip (crop_frame, crop_box).
Image extract_crop(const VideoClip& clip, int crop_frame, const Box& crop_box);

/// Reads `root/videos/<id>/frames/%06d.png` and `root/annotations.json`.
/// Ordered by video_id, then by query index within the video.
Dataset load_dataset(const std::filesystem::path& root);

/// Annotation records of an annotations.json without touching frames; crops stay empty.
/// Ordered by video_id, then query index.
std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path);

/// Writes the layout read by load_dataset. Existing frame files are overwritten.
void save_dataset(const Dataset& data, const std::filesystem::path& root);

/// Serialized annotation document (the exact bytes save_dataset writes).
std::string annotations_document(const Dataset& data);

std::filesystem::path frame_path(const std::filesystem::path& root, const std::string& video_id, int index);

/// FNV-1a 64 of annotations.json (and spec.json when present), hex encoded.
std::string dataset_hash(const std::filesystem::path& root);

std::uint64_t fnv1a64(const std::string& bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

const VideoEntry& find_video(const Dataset& data, const std::string& video_id);

}  // namespace vql
