#include "tubelet/data_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "binary_io.hpp"
#include "tubelet/errors.hpp"

namespace tubelet {

using nlohmann::json;

namespace {

struct LayerInfo {
  LayerTag tag;
  const char* name;
  int stride;
  int channels;
  int roi_res;
};

// Surrogate backbone: channels double per stage; ROI resolution shrinks with depth.
constexpr LayerInfo kLayerTable[] = {
    {LayerTag::IMG, "IMG", 1, 1, 128},   {LayerTag::F2, "F2", 2, 16, 64},   {LayerTag::F4, "F4", 4, 32, 32},
    {LayerTag::F6, "F6", 8, 64, 16},     {LayerTag::F8, "F8", 16, 128, 8},
};

const LayerInfo& info(LayerTag tag) {
  for (const auto& l : kLayerTable)
    if (l.tag == tag) return l;
  throw std::invalid_argument("unknown layer tag " + std::to_string(static_cast<int>(tag)));
}

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

json box_to_json(const BoundingBox& b) {
  return json{{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}, {"conf", b.confidence}};
}

BoundingBox box_from_json(const json& j) {
  BoundingBox b{j.at("x1").get<double>(), j.at("y1").get<double>(), j.at("x2").get<double>(),
                j.at("y2").get<double>(), j.at("conf").get<double>()};
  if (!b.valid()) throw std::invalid_argument("box has x1 > x2, y1 > y2 or confidence outside [0, 1]");
  return b;
}

json boxes_to_json(const std::vector<BoundingBox>& boxes) {
  json arr = json::array();
  for (const auto& b : boxes) arr.push_back(box_to_json(b));
  return arr;
}

std::vector<BoundingBox> boxes_from_json(const json& arr) {
  if (!arr.is_array()) throw std::invalid_argument("boxes must be an array");
  std::vector<BoundingBox> out;
  for (const auto& b : arr) out.push_back(box_from_json(b));
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

std::string_view to_string(LayerTag tag) { return info(tag).name; }

LayerTag parse_layer_tag(std::string_view text) {
  const std::string u = upper(text);
  for (const auto& l : kLayerTable)
    if (u == l.name) return l.tag;
  throw std::invalid_argument("unknown layer tag '" + std::string(text) + "' (expected IMG, F2, F4, F6 or F8)");
}

int layer_stride(LayerTag tag) { return info(tag).stride; }
int layer_channels(LayerTag tag) { return info(tag).channels; }
int layer_roi_res(LayerTag tag) { return info(tag).roi_res; }

std::span<const float> FeatureVolume::frame(int t) const {
  if (t < 0 || t >= frames)
    throw std::invalid_argument("frame index " + std::to_string(t) + " outside volume of " + std::to_string(frames) +
                                " frames");
  return std::span<const float>(values).subspan(static_cast<std::size_t>(t) * frame_size(), frame_size());
}

Tensor FeatureVolume::frame_tensor(int t) const {
  auto f = frame(t);
  return Tensor({channels, height, width}, std::vector<float>(f.begin(), f.end()));
}

void FeatureVolume::validate() const {
  if (channels <= 0 || height <= 0 || width <= 0 || frames <= 0 || stride <= 0)
    throw std::invalid_argument("feature volume dimensions and stride must be positive");
  if (values.size() != frame_size() * frames)
    throw std::invalid_argument("feature volume holds " + std::to_string(values.size()) + " values, expected " +
                                std::to_string(frame_size() * frames));
}

std::vector<std::uint8_t> encode_feature_volume(const FeatureVolume& fv) {
  fv.validate();
  detail::ByteWriter w;
  w.bytes("TBFV", 4);
  w.u32(kFeatureVolumeVersion);
  w.u8(static_cast<std::uint8_t>(fv.layer));
  w.u32(static_cast<std::uint32_t>(fv.stride));
  w.u32(static_cast<std::uint32_t>(fv.channels));
  w.u32(static_cast<std::uint32_t>(fv.height));
  w.u32(static_cast<std::uint32_t>(fv.width));
  w.u32(static_cast<std::uint32_t>(fv.frames));
  w.f32(fv.values);
  return w.take();
}

FeatureVolume decode_feature_volume(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.bytes(4, "magic");
  if (std::string(magic.begin(), magic.end()) != "TBFV") throw FormatError("magic", "expected \"TBFV\"");
  const auto version = r.u32("version");
  if (version != kFeatureVolumeVersion)
    throw FormatError("version", "unsupported feature volume version " + std::to_string(version));
  const auto tag = r.u8("layer_tag");
  if (tag > static_cast<std::uint8_t>(LayerTag::F8))
    throw FormatError("layer_tag", "unknown layer tag " + std::to_string(tag));
  FeatureVolume fv;
  fv.layer = static_cast<LayerTag>(tag);
  const auto stride = r.u32("stride");
  const auto c = r.u32("channels");
  const auto h = r.u32("height");
  const auto w = r.u32("width");
  const auto t = r.u32("frames");
  if (stride == 0) throw FormatError("stride", "stride must be positive");
  for (auto [name, v] : {std::pair{"channels", c}, {"height", h}, {"width", w}, {"frames", t}})
    if (v == 0 || v > (1u << 24)) throw FormatError(name, "invalid dimension " + std::to_string(v));
  const unsigned long long count = 1ull * c * h * w * t;
  if (count * 4 != r.remaining())
    throw FormatError("payload", "dims C*h*w*T = " + std::to_string(count) + " need " + std::to_string(count * 4) +
                                     " payload bytes, file has " + std::to_string(r.remaining()));
  fv.stride = static_cast<int>(stride);
  fv.channels = static_cast<int>(c);
  fv.height = static_cast<int>(h);
  fv.width = static_cast<int>(w);
  fv.frames = static_cast<int>(t);
  fv.values = r.f32(count, "payload");
  return fv;
}

void write_feature_volume(const std::filesystem::path& path, const FeatureVolume& fv) {
  detail::write_file_bytes(path, encode_feature_volume(fv));
}

FeatureVolume read_feature_volume(const std::filesystem::path& path) {
  return decode_feature_volume(detail::read_file_bytes(path));
}

PerFrameBoxes parse_detections(std::istream& in, std::optional<int> frame_count) {
  if (frame_count && *frame_count < 0) throw std::invalid_argument("frame count must be non-negative");
  std::map<int, std::vector<BoundingBox>> by_frame;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    const std::string where = "line " + std::to_string(line_no);
    try {
      const json rec = json::parse(line);
      const int frame = rec.at("frame").get<int>();
      if (frame < 0) throw std::invalid_argument("negative frame index");
      if (frame_count && frame >= *frame_count)
        throw std::invalid_argument("frame " + std::to_string(frame) + " beyond frame count " +
                                    std::to_string(*frame_count));
      auto boxes = boxes_from_json(rec.at("boxes"));
      auto& dst = by_frame[frame];
      dst.insert(dst.end(), boxes.begin(), boxes.end());
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(where, e.what());
    }
  }
  int frames = frame_count.value_or(by_frame.empty() ? 0 : by_frame.rbegin()->first + 1);
  PerFrameBoxes out(frames);
  for (auto& [f, boxes] : by_frame) out[f] = std::move(boxes);
  return out;
}

PerFrameBoxes read_detections(const std::filesystem::path& path, std::optional<int> frame_count) {
  auto in = open_in(path);
  return parse_detections(in, frame_count);
}

void write_detections(const std::filesystem::path& path, const PerFrameBoxes& frames) {
  auto out = open_out(path);
  for (std::size_t t = 0; t < frames.size(); ++t)
    out << json{{"frame", t}, {"boxes", boxes_to_json(frames[t])}}.dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::string_view to_string(Pathology p) { return p == Pathology::PE ? "pe" : "con"; }

Pathology parse_pathology(std::string_view text) {
  const std::string u = upper(text);
  if (u == "PE") return Pathology::PE;
  if (u == "CON") return Pathology::CON;
  throw std::invalid_argument("unknown pathology '" + std::string(text) + "' (expected pe or con)");
}

void write_ground_truth(const std::filesystem::path& path, const GroundTruth& gt) {
  auto out = open_out(path);
  for (std::size_t t = 0; t < gt.size(); ++t) {
    out << json{{"frame", t},
                {"objects", boxes_to_json(gt[t].objects)},
                {"pe", boxes_to_json(gt[t].pe)},
                {"con", boxes_to_json(gt[t].con)}}
               .dump()
        << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

GroundTruth read_ground_truth(const std::filesystem::path& path, int frame_count) {
  auto in = open_in(path);
  GroundTruth gt(frame_count);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    try {
      const json rec = json::parse(line);
      const int frame = rec.at("frame").get<int>();
      if (frame < 0 || frame >= frame_count) throw std::invalid_argument("frame index out of range");
      auto& f = gt[frame];
      if (rec.contains("objects")) f.objects = boxes_from_json(rec["objects"]);
      if (rec.contains("pe")) f.pe = boxes_from_json(rec["pe"]);
      if (rec.contains("con")) f.con = boxes_from_json(rec["con"]);
    } catch (const std::exception& e) {
      throw FormatError(path.filename().string() + " line " + std::to_string(line_no), e.what());
    }
  }
  return gt;
}

PerFrameBoxes pathology_boxes(const GroundTruth& gt, Pathology p) {
  PerFrameBoxes out;
  out.reserve(gt.size());
  for (const auto& f : gt) out.push_back(f.boxes(p));
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<VideoRecord>& videos) {
  auto out = open_out(path);
  for (const auto& v : videos) {
    json features = json::object();
    for (const auto& [tag, p] : v.features_path) features[std::string(to_string(tag))] = p;
    out << json{{"video_id", v.video_id},
                {"patient_id", v.patient_id},
                {"label_pe", v.label_pe},
                {"label_con", v.label_con},
                {"frames", v.frames},
                {"height", v.height},
                {"width", v.width},
                {"detections_path", v.detections_path},
                {"features_path", features},
                {"gt_path", v.gt_path}}
               .dump()
        << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::filesystem::path file = path;
  if (std::filesystem::is_directory(file)) file /= kManifestName;
  if (!std::filesystem::exists(file)) throw IoError("manifest not found: " + file.string());
  auto in = open_in(file);
  Manifest m;
  m.root = file.parent_path();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    try {
      const json rec = json::parse(line);
      VideoRecord v;
      v.video_id = rec.at("video_id").get<std::string>();
      v.patient_id = rec.at("patient_id").get<std::string>();
      if (v.patient_id.empty()) throw std::invalid_argument("patient_id must be nonempty");
      v.label_pe = rec.at("label_pe").get<int>();
      v.label_con = rec.at("label_con").get<int>();
      v.frames = rec.at("frames").get<int>();
      v.height = rec.at("height").get<int>();
      v.width = rec.at("width").get<int>();
      v.detections_path = rec.at("detections_path").get<std::string>();
      v.gt_path = rec.at("gt_path").get<std::string>();
      for (const auto& [k, p] : rec.at("features_path").items())
        v.features_path[parse_layer_tag(k)] = p.get<std::string>();
      m.videos.push_back(std::move(v));
    } catch (const std::exception& e) {
      throw FormatError("manifest line " + std::to_string(line_no), e.what());
    }
  }
  return m;
}

}  // namespace tubelet
