#include <doctest.h>

#include <random>
#include <sstream>

#include "temp_dir.hpp"
#include "tubelet/data_io.hpp"
#include "tubelet/errors.hpp"
#include "tubelet/params.hpp"
#include "tubelet/random.hpp"

using namespace tubelet;

namespace {

FeatureVolume random_volume(std::mt19937_64& rng, LayerTag tag = LayerTag::F4) {
  std::uniform_int_distribution<int> dim(1, 6);
  std::normal_distribution<float> value(0.0f, 3.0f);
  FeatureVolume fv;
  fv.layer = tag;
  fv.stride = layer_stride(tag);
  fv.channels = dim(rng);
  fv.height = dim(rng);
  fv.width = dim(rng);
  fv.frames = dim(rng);
  fv.values.resize(fv.frame_size() * fv.frames);
  for (auto& v : fv.values) v = value(rng);
  return fv;
}

std::string field_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.field();
  }
  return "<no error>";
}

std::vector<std::uint8_t> with_u32(std::vector<std::uint8_t> bytes, std::size_t offset, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[offset + i] = static_cast<std::uint8_t>(v >> (8 * i));
  return bytes;
}

}  // namespace

TEST_CASE("layer tags parse case-insensitively and carry their geometry") {
  CHECK(parse_layer_tag("f4") == LayerTag::F4);
  CHECK(parse_layer_tag("IMG") == LayerTag::IMG);
  CHECK_THROWS_AS(parse_layer_tag("F5"), std::invalid_argument);
  const int strides[] = {1, 2, 4, 8, 16}, channels[] = {1, 16, 32, 64, 128}, res[] = {128, 64, 32, 16, 8};
  for (int i = 0; i < 5; ++i) {
    CHECK(layer_stride(kAllLayers[i]) == strides[i]);
    CHECK(layer_channels(kAllLayers[i]) == channels[i]);
    CHECK(layer_roi_res(kAllLayers[i]) == res[i]);
    CHECK(parse_layer_tag(to_string(kAllLayers[i])) == kAllLayers[i]);
  }
}

TEST_CASE("feature volume round trip is bitwise exact") {
  std::mt19937_64 rng(4);
  TempDir dir;
  for (int i = 0; i < 20; ++i) {
    const FeatureVolume fv = random_volume(rng, kAllLayers[i % 5]);
    const auto bytes = encode_feature_volume(fv);
    CHECK(bytes.size() == 4 + 4 + 1 + 5 * 4 + fv.values.size() * 4);
    CHECK(decode_feature_volume(bytes) == fv);
    write_feature_volume(dir / "v.tbfv", fv);
    const FeatureVolume back = read_feature_volume(dir / "v.tbfv");
    CHECK(back == fv);
    CHECK(encode_feature_volume(back) == bytes);
  }
}

TEST_CASE("feature volume header layout") {
  FeatureVolume fv;
  fv.layer = LayerTag::F6;
  fv.stride = 8;
  fv.channels = 2;
  fv.height = 3;
  fv.width = 4;
  fv.frames = 1;
  fv.values.assign(24, 1.0f);
  const auto b = encode_feature_volume(fv);
  CHECK(std::string(b.begin(), b.begin() + 4) == "TBFV");
  CHECK(b[4] == 1);
  CHECK(b[8] == static_cast<std::uint8_t>(LayerTag::F6));
  CHECK(b[9] == 8);
  CHECK(b[13] == 2);
  CHECK(b[17] == 3);
  CHECK(b[21] == 4);
  CHECK(b[25] == 1);
  // 1.0f little-endian.
  CHECK(b[29] == 0x00);
  CHECK(b[32] == 0x3f);
}

TEST_CASE("corrupt feature volumes fail naming the field") {
  std::mt19937_64 rng(5);
  const FeatureVolume fv = random_volume(rng);
  const auto good = encode_feature_volume(fv);

  auto decode = [](std::vector<std::uint8_t> b) { return [b] { decode_feature_volume(b); }; };
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(field_of(decode(bad_magic)) == "magic");
  CHECK(field_of(decode(with_u32(good, 4, 7))) == "version");
  auto bad_tag = good;
  bad_tag[8] = 9;
  CHECK(field_of(decode(bad_tag)) == "layer_tag");
  CHECK(field_of(decode(with_u32(good, 9, 0))) == "stride");
  CHECK(field_of(decode(with_u32(good, 13, 0))) == "channels");
  CHECK(field_of(decode(with_u32(good, 25, fv.frames + 1))) == "payload");

  auto truncated = good;
  truncated.pop_back();
  CHECK(field_of(decode(truncated)) == "payload");
  for (std::size_t cut : {0, 3, 6, 8, 12, 20, 28})
    CHECK(field_of(decode(std::vector<std::uint8_t>(good.begin(), good.begin() + cut))) != "<no error>");
  auto longer = good;
  longer.push_back(0);
  CHECK(field_of(decode(longer)) == "payload");
}

TEST_CASE("missing files raise IoError") {
  TempDir dir;
  CHECK_THROWS_AS(read_feature_volume(dir / "absent.tbfv"), IoError);
  CHECK_THROWS_AS(read_detections(dir / "absent.jsonl"), IoError);
  CHECK_THROWS_AS(read_manifest(dir.path()), IoError);
}

TEST_CASE("detections parsing examples") {
  std::istringstream empty("");
  const PerFrameBoxes none = parse_detections(empty, 4);
  CHECK(none.size() == 4);
  for (const auto& f : none) CHECK(f.empty());

  std::istringstream one(R"({"frame": 2, "boxes": [{"x1": 1.5, "y1": 2, "x2": 10.25, "y2": 12, "conf": 0.875}]})");
  const PerFrameBoxes parsed = parse_detections(one, 5);
  REQUIRE(parsed.size() == 5);
  REQUIRE(parsed[2].size() == 1);
  CHECK(parsed[2][0] == BoundingBox{1.5, 2, 10.25, 12, 0.875});
  CHECK(parsed[0].empty());

  std::istringstream implicit(R"({"frame": 3, "boxes": []})");
  CHECK(parse_detections(implicit).size() == 4);
}

TEST_CASE("shuffled detection records parse like sorted ones") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 50);
  std::vector<std::string> lines;
  for (int f = 0; f < 12; ++f) {
    std::ostringstream line;
    line << R"({"frame": )" << f << R"(, "boxes": [)";
    for (int b = 0; b < f % 3; ++b) {
      const double x = u(rng), y = u(rng);
      line << (b ? "," : "") << R"({"x1": )" << x << R"(, "y1": )" << y << R"(, "x2": )" << x + 5
           << R"(, "y2": )" << y + 6 << R"(, "conf": 0.5})";
    }
    line << "]}";
    lines.push_back(line.str());
  }
  auto join = [](const std::vector<std::string>& ls) {
    std::string s;
    for (const auto& l : ls) s += l + "\n";
    return s;
  };
  std::istringstream sorted(join(lines));
  const auto want = parse_detections(sorted, 12);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(lines.begin(), lines.end(), rng);
    std::istringstream shuffled(join(lines));
    CHECK(parse_detections(shuffled, 12) == want);
  }
}

TEST_CASE("malformed detection lines report their line number") {
  auto field = [](const std::string& text) {
    return field_of([&] {
      std::istringstream in(text);
      parse_detections(in, 4);
    });
  };
  CHECK(field("{\"frame\": 0, \"boxes\": []}\n{not json}\n") == "line 2");
  CHECK(field("\n\n{\"boxes\": []}\n") == "line 3");
  CHECK(field(R"({"frame": 9, "boxes": []})") == "line 1");
  CHECK(field(R"({"frame": -1, "boxes": []})") == "line 1");
  CHECK(field(R"({"frame": 0, "boxes": [{"x1": 5, "y1": 0, "x2": 1, "y2": 3, "conf": 0.5}]})") == "line 1");
  CHECK(field(R"({"frame": 0, "boxes": [{"x1": 0, "y1": 0, "x2": 1, "y2": 3, "conf": 1.5}]})") == "line 1");
  CHECK(field(R"({"frame": 0, "boxes": {}})") == "line 1");
}

TEST_CASE("detections, ground truth and manifest files round trip") {
  TempDir dir;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 60), c(0, 1);
  PerFrameBoxes dets(7);
  GroundTruth gt(7);
  for (int t = 0; t < 7; ++t)
    for (int i = 0; i < t % 4; ++i) {
      const double x = u(rng), y = u(rng);
      const BoundingBox b{x, y, x + u(rng) / 3, y + u(rng) / 3, c(rng)};
      dets[t].push_back(b);
      gt[t].objects.push_back(b);
      if (i == 0) gt[t].pe.push_back(b);
      if (i == 1) gt[t].con.push_back(b);
    }
  write_detections(dir / "d.jsonl", dets);
  CHECK(read_detections(dir / "d.jsonl", 7) == dets);
  write_ground_truth(dir / "gt.jsonl", gt);
  CHECK(read_ground_truth(dir / "gt.jsonl", 7) == gt);
  CHECK(pathology_boxes(gt, Pathology::PE)[1] == gt[1].pe);

  std::vector<VideoRecord> videos(3);
  for (int i = 0; i < 3; ++i) {
    auto& v = videos[i];
    v.video_id = "v" + std::to_string(i);
    v.patient_id = "p" + std::to_string(i / 2);
    v.frames = 7;
    v.height = 64;
    v.width = 48;
    v.label_pe = i % 2;
    v.label_con = 1 - i % 2;
    v.detections_path = "videos/" + v.video_id + "/detections.jsonl";
    v.gt_path = "videos/" + v.video_id + "/gt.jsonl";
    v.features_path[LayerTag::F4] = "videos/" + v.video_id + "/F4.tbfv";
    v.features_path[LayerTag::IMG] = "videos/" + v.video_id + "/IMG.tbfv";
  }
  write_manifest(dir / kManifestName, videos);
  const Manifest m = read_manifest(dir.path());
  CHECK(m.videos == videos);
  CHECK(m.root == dir.path());
  CHECK(read_manifest(dir / kManifestName).videos == videos);
  CHECK(m.resolve(videos[0].gt_path) == dir.path() / videos[0].gt_path);
}

TEST_CASE("manifest rejects an empty patient id") {
  TempDir dir;
  write_text(dir / kManifestName,
             R"({"video_id":"v0","patient_id":"","label_pe":0,"label_con":0,"frames":1,"height":16,"width":16,)"
             R"("detections_path":"d","gt_path":"g","features_path":{}})"
             "\n");
  CHECK(field_of([&] { read_manifest(dir.path()); }) == "manifest line 1");
}

TEST_CASE("feature volume validation and frame access") {
  std::mt19937_64 rng(10);
  FeatureVolume fv = random_volume(rng);
  CHECK_NOTHROW(fv.validate());
  const Tensor f0 = fv.frame_tensor(fv.frames - 1);
  CHECK(f0.shape() == Shape{fv.channels, fv.height, fv.width});
  CHECK(f0.data()[0] == fv.values[fv.frame_size() * (fv.frames - 1)]);
  CHECK_THROWS_AS(fv.frame(fv.frames), std::invalid_argument);
  fv.values.pop_back();
  CHECK_THROWS_AS(fv.validate(), std::invalid_argument);
}

TEST_CASE("checkpoint container round trip and corruption") {
  std::mt19937_64 rng(12);
  ParamSet p;
  p.add("a.weight", uniform_tensor({3, 2, 3, 3}, 1.0, rng));
  p.add("a.bias", uniform_tensor({3}, 1.0, rng));
  p.add("fc", uniform_tensor({4, 5}, 1.0, rng));
  const auto bytes = encode_checkpoint(p);
  CHECK(decode_checkpoint(bytes) == p);
  std::size_t payload = 0;
  for (const auto& e : p) payload += e.value.numel() * 4;
  std::size_t headers = 12;
  for (const auto& e : p) headers += 4 + e.name.size() + 4 + 4 * e.value.rank();
  CHECK(bytes.size() == headers + payload);

  auto bad = bytes;
  bad[1] = 'X';
  CHECK(field_of([&] { decode_checkpoint(bad); }) == "magic");
  auto trailing = bytes;
  trailing.push_back(1);
  CHECK(field_of([&] { decode_checkpoint(trailing); }) == "trailer");
  auto cut = bytes;
  cut.resize(bytes.size() - 3);
  CHECK(field_of([&] { decode_checkpoint(cut); }) != "<no error>");
  CHECK(field_of([&] { decode_checkpoint(with_u32(bytes, 4, 2)) ; }) == "version");
}
