#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tubelet/errors.hpp"
#include "tubelet/metrics.hpp"
#include "tubelet/pipeline.hpp"

namespace tubelet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kRunFile = "run.json";
constexpr const char* kCheckpointName = "checkpoint.tbkt";

std::string fold_dir_name(int fold) { return "fold_" + std::to_string(fold); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.filename().string(), e.what());
  }
}

Manifest load_manifest(const fs::path& data) {
  if (!fs::exists(data)) throw IoError("dataset not found: " + data.string());
  return read_manifest(data);
}

std::optional<Pathology> stratify_target(const std::string& s) {
  if (s.empty() || s == "none") return std::nullopt;
  return parse_pathology(s);
}

FoldAssignment assign_folds(const Manifest& m, const FoldOptions& f) {
  if (f.folds < 2) throw UsageError("--folds must be >= 2");
  return patient_folds(m.videos, f.folds, f.fold_seed, stratify_target(f.stratify));
}

std::vector<VideoSample> load_samples(const Manifest& m, LayerTag layer, const TrackerParams& tracker) {
  std::vector<VideoSample> out;
  out.reserve(m.videos.size());
  for (const auto& r : m.videos) out.push_back(load_video_sample(m, r, layer, tracker));
  return out;
}

std::string human_count(double v) {
  const char* units[] = {"", "K", "M", "G", "T"};
  int u = 0;
  while (std::abs(v) >= 1000 && u < 4) {
    v /= 1000;
    ++u;
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(u ? 2 : 0) << v << units[u];
  return os.str();
}

struct ProfileRow {
  std::string name;
  std::string embed;
  std::string layer;
  ProfileReport report;
};

// Params and FLOPs columns per configuration, FLOPs per tubelet of `frames`.
std::string format_profile_rows(const std::vector<ProfileRow>& rows, int frames) {
  std::size_t name_w = 6;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_w)) << "config" << "  " << std::setw(6) << "embed" << "  "
     << std::setw(5) << "RoIA" << "  " << std::right << std::setw(9) << "Params" << "  " << std::setw(12)
     << "FLOPs/frame" << "  " << std::setw(12) << ("FLOPs/T=" + std::to_string(frames)) << '\n';
  for (const auto& r : rows) {
    const double per_tubelet =
        static_cast<double>(r.report.total_flops_per_frame) * frames + static_cast<double>(r.report.tubelet_flops);
    os << std::left << std::setw(static_cast<int>(name_w)) << r.name << "  " << std::setw(6) << r.embed << "  "
       << std::setw(5) << r.layer << "  " << std::right << std::setw(9)
       << human_count(static_cast<double>(r.report.parameters)) << "  " << std::setw(12)
       << human_count(static_cast<double>(r.report.total_flops_per_frame)) << "  " << std::setw(12)
       << human_count(per_tubelet) << '\n';
  }
  return os.str();
}

}  // namespace

TrackerParams TrackerOptions::resolve() const {
  TrackerParams p;
  p.iou_threshold = iou_threshold;
  p.hit_threshold = min_hits;
  p.min_track_length = min_length;
  p.max_age = max_age;
  return p;
}

ClassifierConfig ModelOptions::resolve() const {
  ClassifierConfig cfg = default_classifier_config(parse_layer_tag(layer), parse_embed_mode(embed));
  if (base_width > 0) cfg.widths = doubling_widths(base_width, cfg.blocks());
  cfg.epochs = epochs;
  cfg.lr = lr;
  cfg.seed = seed;
  cfg.w_ins = w_ins;
  cfg.w_tubelet = w_tubelet;
  validate(cfg);
  return cfg;
}

void run_synth(const SynthOptions& o) {
  SynthConfig cfg = o.config;
  cfg.layers.clear();
  for (const auto& l : o.layers) cfg.layers.push_back(parse_layer_tag(l));
  try {
    validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  ensure_dir(o.out);
  const Manifest m = synth_generate(cfg, o.out);
  std::cout << (o.out / kManifestName).string() << '\n';
  std::cerr << "wrote " << m.videos.size() << " videos\n";
}

void run_train(const TrainOptions& o) {
  const ClassifierConfig cfg = o.model.resolve();
  const Pathology pathology = parse_pathology(o.pathology);
  const LayerTag layer = parse_layer_tag(o.model.layer);
  const TrackerParams tracker = o.tracker.resolve();
  const Manifest manifest = load_manifest(o.data);
  const FoldAssignment folds = assign_folds(manifest, o.folds);

  std::vector<int> to_train;
  if (o.fold == "all") {
    for (int k = 0; k < folds.folds; ++k) to_train.push_back(k);
  } else {
    int k = -1;
    try {
      std::size_t used = 0;
      k = std::stoi(o.fold, &used);
      if (used != o.fold.size()) k = -1;
    } catch (const std::exception&) {
      k = -1;
    }
    if (k < 0 || k >= folds.folds)
      throw UsageError("--fold must be 'all' or an integer in [0, " + std::to_string(folds.folds - 1) + "], got '" +
                       o.fold + "'");
    to_train.push_back(k);
  }

  const auto samples = load_samples(manifest, layer, tracker);
  ensure_dir(o.out);
  json run{{"layer", std::string(to_string(layer))},
           {"pathology", std::string(to_string(pathology))},
           {"embed", std::string(to_string(cfg.embed))},
           {"folds", o.folds.folds},
           {"fold_seed", o.folds.fold_seed},
           {"stratify", o.folds.stratify},
           {"trained_folds", to_train}};
  write_text(o.out / kRunFile, run.dump(2) + "\n");

  for (int k : to_train) {
    const fs::path dir = o.out / fold_dir_name(k);
    ensure_dir(dir);
    std::ofstream log(dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot write " + (dir / "train_log.jsonl").string());
    const auto train_idx = folds.videos_outside(k);
    std::size_t tubelets = 0;
    for (int v : train_idx) tubelets += samples[static_cast<std::size_t>(v)].tracklets.size();
    std::cerr << "fold " << k << ": " << train_idx.size() << " training videos, " << tubelets << " tubelets\n";
    TrainResult result = train_on_samples(samples, train_idx, cfg, pathology, [&](const EpochLog& e) {
      log << format_epoch_log(e) << '\n';
      log.flush();
    });
    save_model(dir / kCheckpointName, result.params, cfg);
    std::cerr << "fold " << k << ": final loss " << result.log.back().loss << '\n';
    std::cout << (dir / kCheckpointName).string() << '\n';
  }
}

void run_infer(const InferOptions& o) {
  const Model model = load_model(o.checkpoint);
  const LayerTag layer = parse_layer_tag(o.layer);
  if (model.config.in_channels != layer_channels(layer))
    throw UsageError("checkpoint expects " + std::to_string(model.config.in_channels) + " input channels but layer " +
                     o.layer + " has " + std::to_string(layer_channels(layer)));
  const TrackerParams tracker = o.tracker.resolve();
  const Manifest manifest = load_manifest(o.data);
  const auto samples = load_samples(manifest, layer, tracker);
  const auto predictions = predict_videos(samples, model, tracker, o.jobs);
  if (o.out.has_parent_path()) ensure_dir(o.out.parent_path());
  write_predictions(o.out, predictions);
  std::cout << o.out.string() << '\n';
}

namespace {

struct RunModels {
  std::string name;
  LayerTag layer = LayerTag::F4;
  Pathology pathology = Pathology::PE;
  FoldOptions folds;
  std::vector<std::pair<int, fs::path>> checkpoints;
  ClassifierConfig config;
};

RunModels resolve_run(const fs::path& path, std::optional<int> only_fold) {
  fs::path run_dir = path;
  std::optional<int> file_fold;
  if (fs::is_regular_file(path)) {
    const std::string dir = path.parent_path().filename().string();
    if (dir.rfind("fold_", 0) != 0)
      throw UsageError("checkpoint " + path.string() + " is not inside a fold_<k> directory of a training run");
    file_fold = std::stoi(dir.substr(5));
    run_dir = path.parent_path().parent_path();
  }
  if (!fs::exists(run_dir / kRunFile))
    throw IoError("no " + std::string(kRunFile) + " in " + run_dir.string() + "; pass a directory written by train");
  const json run = read_json(run_dir / kRunFile);
  RunModels r;
  r.name = run_dir.filename().string();
  if (r.name.empty()) r.name = run_dir.parent_path().filename().string();
  r.layer = parse_layer_tag(run.at("layer").get<std::string>());
  r.pathology = parse_pathology(run.at("pathology").get<std::string>());
  r.folds.folds = run.at("folds").get<int>();
  r.folds.fold_seed = run.at("fold_seed").get<std::uint64_t>();
  r.folds.stratify = run.value("stratify", std::string("none"));
  for (int k : run.at("trained_folds").get<std::vector<int>>()) {
    if (file_fold && k != *file_fold) continue;
    if (only_fold && k != *only_fold) continue;
    r.checkpoints.emplace_back(k, run_dir / fold_dir_name(k) / kCheckpointName);
  }
  if (r.checkpoints.empty()) throw UsageError("run " + run_dir.string() + " has no checkpoint for the requested fold");
  r.config = load_model(r.checkpoints.front().second).config;
  return r;
}

}  // namespace

void run_eval(const EvalOptions& o) {
  if (o.checkpoints.empty() || o.checkpoints.size() > 2) throw UsageError("eval takes one or two --checkpoint runs");
  if (!o.names.empty() && o.names.size() != o.checkpoints.size())
    throw UsageError("--name must be given once per --checkpoint");
  if (o.split != "test" && o.split != "train" && o.split != "all")
    throw UsageError("--split must be test, train or all");
  std::vector<RunModels> runs;
  for (std::size_t i = 0; i < o.checkpoints.size(); ++i) {
    runs.push_back(resolve_run(o.checkpoints[i], o.fold));
    if (!o.names.empty()) runs.back().name = o.names[i];
  }
  if (runs.size() == 2 && runs[0].name == runs[1].name) runs[1].name += "_b";

  const TrackerParams tracker = o.tracker.resolve();
  const Manifest manifest = load_manifest(o.data);
  std::map<LayerTag, std::vector<VideoSample>> samples;
  ensure_dir(o.out);

  std::vector<MetricsRow> rows;
  for (const auto& run : runs) {
    if (!samples.count(run.layer)) samples[run.layer] = load_samples(manifest, run.layer, tracker);
    const auto& all = samples.at(run.layer);
    const FoldAssignment folds = assign_folds(manifest, run.folds);
    MetricsRow row{run.name, {}};
    std::vector<VideoPrediction> written;
    for (const auto& [k, ckpt] : run.checkpoints) {
      const Model model = load_model(ckpt);
      std::vector<int> idx;
      if (o.split == "test") idx = folds.videos_in(k);
      else if (o.split == "train") idx = folds.videos_outside(k);
      else for (std::size_t i = 0; i < all.size(); ++i) idx.push_back(static_cast<int>(i));
      std::vector<VideoSample> subset;
      for (int v : idx) subset.push_back(all[static_cast<std::size_t>(v)]);
      const auto preds = predict_videos(subset, model, tracker, o.jobs);
      std::vector<double> scores;
      std::vector<int> labels;
      bool any_tubelet = false;
      for (std::size_t i = 0; i < subset.size(); ++i) {
        scores.push_back(preds[i].confidence);
        labels.push_back(subset[i].record.label(run.pathology));
        any_tubelet = any_tubelet || !preds[i].tubelets.empty();
      }
      if (!any_tubelet)
        throw DegenerateInputError("fold " + std::to_string(k) + ": no video yields a tubelet, so every score is 0 " +
                                   "and AUROC is undefined; check the detections or lower --min-length");
      try {
        row.fold_auroc.push_back(auroc(scores, labels));
      } catch (const DegenerateInputError& e) {
        throw DegenerateInputError(std::string(e.what()) + " in fold " + std::to_string(k) +
                                   "; use more videos or a different --fold-seed");
      }
      written.insert(written.end(), preds.begin(), preds.end());
    }
    write_predictions(o.out / ("predictions_" + run.name + ".jsonl"), written);
    rows.push_back(std::move(row));
  }

  std::ostringstream report;
  report << "pathology " << to_string(runs.front().pathology) << ", split " << o.split << ", video-level AUROC\n";
  report << format_metrics_table(rows);
  if (runs.size() == 2) {
    if (rows[0].fold_auroc.size() != rows[1].fold_auroc.size() || rows[0].fold_auroc.size() < 2) {
      report << "paired t-test skipped: both runs need the same two or more folds\n";
    } else {
      const PairedTTest t = paired_t_test(rows[0].fold_auroc, rows[1].fold_auroc);
      report << std::fixed << std::setprecision(4) << "paired t-test " << rows[0].name << " vs " << rows[1].name
             << ": mean diff " << rows[0].mean() - rows[1].mean() << ", t " << t.t << ", df " << std::setprecision(0)
             << t.df << ", p " << std::setprecision(4) << t.p << '\n';
    }
  }
  if (o.profile) {
    std::vector<ProfileRow> prof;
    for (const auto& run : runs)
      prof.push_back({run.name, std::string(to_string(run.config.embed)), std::string(to_string(run.layer)),
                      profile(run.config)});
    report << '\n' << format_profile_rows(prof, manifest.videos.empty() ? 1 : manifest.videos.front().frames);
  }
  write_text(o.out / "metrics.txt", report.str());
  std::cout << report.str();
}

void run_profile(const ProfileOptions& o) {
  const ClassifierConfig cfg = o.model.resolve();
  const ProfileReport r = profile(cfg);
  std::ostringstream os;
  os << "layer " << o.model.layer << ", embed " << to_string(cfg.embed) << ", roi " << cfg.roi_res << "x"
     << cfg.roi_res << "x" << cfg.in_channels << "\n\n";
  os << std::left << std::setw(28) << "tensor op" << std::right << std::setw(10) << "params" << std::setw(14) << "FLOPs"
     << "  per\n";
  for (const auto& l : r.layers)
    os << std::left << std::setw(28) << l.name << std::right << std::setw(10) << l.params << std::setw(14) << l.flops
       << "  " << (l.per_frame ? "frame" : "tubelet") << '\n';
  os << '\n'
     << "parameters              " << r.parameters << '\n'
     << "classifier FLOPs/frame  " << r.classifier_flops_per_frame << '\n'
     << "ROI align FLOPs/frame   " << r.roi_align_flops_per_frame << '\n'
     << "total FLOPs/frame       " << r.total_flops_per_frame << '\n'
     << "FLOPs per tubelet (T=" << o.frames << ") "
     << static_cast<std::uint64_t>(r.total_flops_per_frame) * o.frames + r.tubelet_flops << "\n\n";

  // Embedding and feature-source ablation grid.
  std::vector<ProfileRow> grid;
  for (EmbedMode mode : {EmbedMode::None, EmbedMode::EmbedLast})
    for (LayerTag layer : {LayerTag::IMG, LayerTag::F4}) {
      const ClassifierConfig c = default_classifier_config(layer, mode);
      grid.push_back({std::string(to_string(layer)) + "/" + std::string(to_string(mode)),
                      std::string(to_string(mode)), std::string(to_string(layer)), profile(c)});
    }
  os << format_profile_rows(grid, o.frames);
  std::cout << os.str();
}

}  // namespace tubelet::cli
