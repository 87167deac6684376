#include "tubelet/classifier.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tubelet/errors.hpp"
#include "tubelet/ops.hpp"
#include "tubelet/random.hpp"

namespace tubelet {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

constexpr int kKernel = 3;

}  // namespace

std::string_view to_string(EmbedMode mode) {
  switch (mode) {
    case EmbedMode::None: return "none";
    case EmbedMode::EmbedAll: return "all";
    case EmbedMode::EmbedLast: return "last";
  }
  return "?";
}

EmbedMode parse_embed_mode(std::string_view text) {
  const std::string s = lower(text);
  if (s == "none") return EmbedMode::None;
  if (s == "all" || s == "embedall") return EmbedMode::EmbedAll;
  if (s == "last" || s == "embedlast") return EmbedMode::EmbedLast;
  throw std::invalid_argument("unknown embedding mode '" + std::string(text) + "' (valid: none, all, last)");
}

int block_count(int roi_res, int spatial_out) {
  require(roi_res >= 1 && spatial_out >= 1, "roi_res and spatial_out must be positive");
  require(roi_res % spatial_out == 0, "roi_res must be a multiple of spatial_out");
  int ratio = roi_res / spatial_out;
  int blocks = 0;
  while (ratio > 1) {
    require(ratio % 2 == 0, "roi_res / spatial_out must be a power of two");
    ratio /= 2;
    ++blocks;
  }
  return blocks;
}

std::vector<int> doubling_widths(int first, int blocks) {
  require(first >= 1, "first width must be positive");
  std::vector<int> w;
  for (int i = 0; i < blocks; ++i) w.push_back(first << i);
  return w;
}

void validate(const ClassifierConfig& cfg) {
  require(cfg.in_channels >= 1, "classifier: in_channels must be >= 1");
  const int blocks = block_count(cfg.roi_res, cfg.spatial_out);
  require(blocks >= 1, "classifier: roi_res must exceed spatial_out");
  require(cfg.blocks() == blocks, "classifier: " + std::to_string(cfg.blocks()) + " widths given but roi_res " +
                                      std::to_string(cfg.roi_res) + " -> " + std::to_string(cfg.spatial_out) +
                                      " needs " + std::to_string(blocks) + " stride-2 blocks");
  require(cfg.widths.front() >= 1, "classifier: widths must be positive");
  for (int i = 1; i < cfg.blocks(); ++i)
    require(cfg.widths[i] == 2 * cfg.widths[i - 1], "classifier: widths must double block to block");
  require(cfg.context_dim == 5, "classifier: context vector has 5 components");
  require(cfg.w_ins >= 0 && cfg.w_tubelet >= 0, "classifier: loss weights must be non-negative");
  require(cfg.epochs >= 0, "classifier: epochs must be >= 0");
  require(cfg.lr >= 0, "classifier: lr must be >= 0");
}

ClassifierConfig default_classifier_config(LayerTag layer, EmbedMode mode) {
  ClassifierConfig cfg;
  cfg.in_channels = layer_channels(layer);
  cfg.roi_res = layer_roi_res(layer);
  cfg.spatial_out = 4;
  const int blocks = block_count(cfg.roi_res, cfg.spatial_out);
  const int last = layer == LayerTag::IMG ? 512 : 256;
  cfg.widths = doubling_widths(last >> (blocks - 1), blocks);
  cfg.embed = mode;
  return cfg;
}

std::string config_to_json(const ClassifierConfig& cfg) {
  nlohmann::json j{{"in_channels", cfg.in_channels},
                   {"roi_res", cfg.roi_res},
                   {"spatial_out", cfg.spatial_out},
                   {"widths", cfg.widths},
                   {"embed", std::string(to_string(cfg.embed))},
                   {"context_dim", cfg.context_dim},
                   {"w_ins", cfg.w_ins},
                   {"w_tubelet", cfg.w_tubelet},
                   {"epochs", cfg.epochs},
                   {"lr", cfg.lr},
                   {"seed", cfg.seed},
                   {"leaky_slope", cfg.leaky_slope}};
  return j.dump(2);
}

ClassifierConfig config_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ClassifierConfig cfg;
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.roi_res = j.at("roi_res").get<int>();
    cfg.spatial_out = j.at("spatial_out").get<int>();
    cfg.widths = j.at("widths").get<std::vector<int>>();
    cfg.embed = parse_embed_mode(j.at("embed").get<std::string>());
    cfg.context_dim = j.at("context_dim").get<int>();
    cfg.w_ins = j.at("w_ins").get<double>();
    cfg.w_tubelet = j.at("w_tubelet").get<double>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.lr = j.at("lr").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.leaky_slope = j.at("leaky_slope").get<double>();
    validate(cfg);
    return cfg;
  } catch (const std::exception& e) {
    throw FormatError("classifier config", e.what());
  }
}

std::vector<ParamSpec> param_layout(const ClassifierConfig& cfg) {
  validate(cfg);
  std::vector<ParamSpec> out;
  int in = cfg.in_channels;
  for (int b = 0; b < cfg.blocks(); ++b) {
    const int w = cfg.widths[b];
    const std::string p = "encoder." + std::to_string(b);
    out.push_back({p + ".weight", {w, in, kKernel, kKernel}, in * kKernel * kKernel});
    out.push_back({p + ".bias", {w}, in * kKernel * kKernel});
    if (cfg.embed == EmbedMode::EmbedAll) {
      const std::string a = "attention." + std::to_string(b);
      out.push_back({a + ".conv1.weight", {w, w, 1, 1}, w});
      out.push_back({a + ".conv1.bias", {w}, w});
      out.push_back({a + ".conv2.weight", {w, w, 1, 1}, w});
      out.push_back({a + ".conv2.bias", {w}, w});
      const std::string c = "context." + std::to_string(b);
      out.push_back({c + ".weight", {2 * w, cfg.context_dim}, cfg.context_dim});
      out.push_back({c + ".bias", {2 * w}, cfg.context_dim});
    }
    in = w;
  }
  const int d = cfg.feature_length();
  out.push_back({"instance_head.weight", {1, d}, d});
  out.push_back({"instance_head.bias", {1}, d});
  int head_in = d;
  if (cfg.embed == EmbedMode::EmbedLast) {
    out.push_back({"context.weight", {d, cfg.context_dim}, cfg.context_dim});
    out.push_back({"context.bias", {d}, cfg.context_dim});
    head_in = 2 * d;
  }
  out.push_back({"tubelet_head.weight", {1, head_in}, head_in});
  out.push_back({"tubelet_head.bias", {1}, head_in});
  return out;
}

ParamSet init_params(const ClassifierConfig& cfg) {
  auto rng = make_rng(cfg.seed, {0x696e6974});
  ParamSet params;
  for (const auto& spec : param_layout(cfg))
    params.add(spec.name, uniform_tensor(spec.shape, 1.0 / std::sqrt(double(spec.fan_in)), rng));
  return params;
}

template <typename T>
ClassifierGraph<T>::ClassifierGraph(Graph<T>& graph, const ClassifierConfig& cfg, std::vector<BasicTensor<T>> values,
                                    bool requires_grad)
    : g_(graph), cfg_(cfg) {
  const auto layout = param_layout(cfg_);
  require(values.size() == layout.size(), "classifier: expected " + std::to_string(layout.size()) +
                                              " parameter tensors, got " + std::to_string(values.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    require(values[i].shape() == layout[i].shape, "classifier: parameter '" + layout[i].name + "' has shape " +
                                                       shape_str(values[i].shape()) + ", expected " +
                                                       shape_str(layout[i].shape));
    vars_.push_back(g_.input(std::move(values[i]), requires_grad));
    index_.emplace(layout[i].name, i);
  }
}

template <typename T>
Var ClassifierGraph<T>::param(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("classifier has no parameter '" + std::string(name) + "'");
  return vars_[it->second];
}

template <typename T>
std::vector<Var> ClassifierGraph<T>::embed_context(Var context) {
  require(g_.value(context).numel() == static_cast<std::size_t>(cfg_.context_dim),
          "embed_context: context must have " + std::to_string(cfg_.context_dim) + " components");
  std::vector<Var> out;
  if (cfg_.embed == EmbedMode::EmbedLast) {
    out.push_back(fully_connected(g_, context, param("context.weight"), param("context.bias")));
  } else if (cfg_.embed == EmbedMode::EmbedAll) {
    for (int b = 0; b < cfg_.blocks(); ++b) {
      const std::string p = "context." + std::to_string(b);
      out.push_back(fully_connected(g_, context, param(p + ".weight"), param(p + ".bias")));
    }
  }
  return out;
}

template <typename T>
Var ClassifierGraph<T>::channel_attention_modulate(Var feature, Var embedded, int block) {
  const auto& shape = g_.value(feature).shape();
  require(shape.size() == 4, "channel_attention_modulate: feature must be N x C x H x W");
  const int n = shape[0], c = shape[1];
  require(g_.value(embedded).numel() == static_cast<std::size_t>(2 * c),
          "channel_attention_modulate: embedding length " + std::to_string(g_.value(embedded).numel()) +
              " does not equal 2 x " + std::to_string(c) + " channels");
  const std::string a = "attention." + std::to_string(block);
  Var pooled = adaptive_max_pool2d(g_, feature);
  Var att = conv2d(g_, pooled, param(a + ".conv1.weight"), param(a + ".conv1.bias"), 1, 0);
  att = conv2d(g_, att, param(a + ".conv2.weight"), param(a + ".conv2.bias"), 1, 0);
  att = reshape(g_, att, {n, c});
  Var gate = affine_rows(g_, att, slice(g_, embedded, 0, c), slice(g_, embedded, c, c));
  gate = sigmoid(g_, gate);
  return scale_channels(g_, feature, gate);
}

template <typename T>
Var ClassifierGraph<T>::encode(Var instances, std::span<const Var> block_embeddings) {
  const auto& shape = g_.value(instances).shape();
  require(shape.size() == 4 && shape[1] == cfg_.in_channels && shape[2] == cfg_.roi_res && shape[3] == cfg_.roi_res,
          "encode: expected N x " + std::to_string(cfg_.in_channels) + " x " + std::to_string(cfg_.roi_res) + " x " +
              std::to_string(cfg_.roi_res) + " instances, got " + shape_str(shape));
  if (cfg_.embed == EmbedMode::EmbedAll)
    require(block_embeddings.size() == static_cast<std::size_t>(cfg_.blocks()),
            "encode: EmbedAll needs one context embedding per block");
  const int n = shape[0];
  Var x = instances;
  for (int b = 0; b < cfg_.blocks(); ++b) {
    const std::string p = "encoder." + std::to_string(b);
    x = conv2d(g_, x, param(p + ".weight"), param(p + ".bias"), 2, 1);
    x = leaky_relu(g_, x, cfg_.leaky_slope);
    if (cfg_.embed == EmbedMode::EmbedAll) x = channel_attention_modulate(x, block_embeddings[b], b);
  }
  const auto& out = g_.value(x).shape();
  require(out[2] == cfg_.spatial_out && out[3] == cfg_.spatial_out, "encode: encoder output is not x-by-x");
  return reshape(g_, x, {n, cfg_.feature_length()});
}

template <typename T>
Var ClassifierGraph<T>::encode_instance(Var instance, std::span<const Var> block_embeddings) {
  const auto& s = g_.value(instance).shape();
  require(s.size() == 3, "encode_instance: expected C x R x R, got " + shape_str(s));
  Var batched = reshape(g_, instance, {1, s[0], s[1], s[2]});
  return reshape(g_, encode(batched, block_embeddings), {cfg_.feature_length()});
}

template <typename T>
typename ClassifierGraph<T>::Output ClassifierGraph<T>::forward(Var frames, Var context) {
  const auto& s = g_.value(frames).shape();
  require(s.size() == 4, "classify: tubelet features must be T x C x R x R, got " + shape_str(s));
  require(s[1] == cfg_.in_channels, "classify: tubelet has " + std::to_string(s[1]) +
                                        " channels, classifier expects " + std::to_string(cfg_.in_channels));
  const int t_len = s[0];
  const std::vector<Var> embedded = embed_context(context);
  Var encoded = encode(frames, cfg_.embed == EmbedMode::EmbedAll ? std::span<const Var>(embedded)
                                                                   : std::span<const Var>{});
  Var inst = fully_connected(g_, encoded, param("instance_head.weight"), param("instance_head.bias"));
  inst = reshape(g_, inst, {t_len});
  Var pooled = max_rows(g_, encoded);
  if (cfg_.embed == EmbedMode::EmbedLast) pooled = concat(g_, pooled, embedded.front());
  Var tub = fully_connected(g_, pooled, param("tubelet_head.weight"), param("tubelet_head.bias"));
  return {inst, tub};
}

template <typename T>
Var ClassifierGraph<T>::loss(const Output& out, std::span<const int> instance_labels, int tubelet_label) {
  Var li = mean(g_, sigmoid_bce(g_, out.instance_logits, instance_labels));
  const int y[1] = {tubelet_label};
  Var lt = sigmoid_bce(g_, out.tubelet_logit, y);
  return add(g_, scale(g_, li, cfg_.w_ins), scale(g_, lt, cfg_.w_tubelet));
}

template class ClassifierGraph<float>;
template class ClassifierGraph<double>;

namespace {

std::vector<Tensor> param_values(const ParamSet& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& e : params) out.push_back(e.value);
  return out;
}

Tensor context_tensor(const Tubelet& tb) {
  return Tensor({5}, std::vector<float>(tb.context.begin(), tb.context.end()));
}

}  // namespace

TubeletScores classify_tubelet(const Tubelet& tubelet, const ParamSet& params, const ClassifierConfig& cfg) {
  Graph<float> g;
  ClassifierGraph<float> model(g, cfg, param_values(params), false);
  auto out = model.forward(g.input(tubelet.features), g.input(context_tensor(tubelet)));
  TubeletScores s;
  const auto& inst = g.value(out.instance_logits);
  s.instance_logits.assign(inst.data().begin(), inst.data().end());
  s.tubelet_logit = g.value(out.tubelet_logit).item();
  return s;
}

double tubelet_loss(std::span<const float> instance_logits, std::span<const int> instance_labels, float tubelet_logit,
                    int tubelet_label, double w_ins, double w_tubelet) {
  require(instance_logits.size() == instance_labels.size() && !instance_logits.empty(),
          "tubelet_loss: instance logits and labels must have equal nonzero length");
  auto bce = [](double z, int y) {
    require(y == 0 || y == 1, "tubelet_loss: labels must be 0 or 1");
    return y ? softplus(-z) : softplus(z);
  };
  double inst = 0;
  for (std::size_t i = 0; i < instance_logits.size(); ++i) inst += bce(instance_logits[i], instance_labels[i]);
  inst /= static_cast<double>(instance_logits.size());
  return w_ins * inst + w_tubelet * bce(tubelet_logit, tubelet_label);
}

namespace {

void check_training_tubelet(const Tubelet& tb, const ClassifierConfig& cfg) {
  require(tb.features.rank() == 4 && tb.features.dim(1) == cfg.in_channels && tb.features.dim(2) == cfg.roi_res &&
              tb.features.dim(3) == cfg.roi_res,
          "train: tubelet features do not match the classifier input shape");
  require(tb.features.dim(0) > 0, "train: tubelet has no frames");
  require(tb.instance_labels.size() == static_cast<std::size_t>(tb.features.dim(0)), "train: tubelet is not labeled");
}

}  // namespace

TrainResult train(std::span<const Tubelet> tubelets, const ClassifierConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  validate(cfg);
  for (const auto& tb : tubelets) check_training_tubelet(tb, cfg);
  return train(
      tubelets.size(), [&](std::size_t i) { return tubelets[i]; }, cfg, on_epoch);
}

TrainResult train(std::size_t count, const TubeletSource& source, const ClassifierConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  validate(cfg);
  if (count == 0) throw std::invalid_argument("train: empty training set");
  TrainResult result;
  result.params = init_params(cfg);
  AdamState adam(AdamOptions{cfg.lr}, param_values(result.params));
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog log{epoch, 0, 0, 0};
    for (std::size_t i = 0; i < count; ++i) {
      const Tubelet tb = source(i);
      check_training_tubelet(tb, cfg);
      Graph<float> g;
      ClassifierGraph<float> model(g, cfg, param_values(result.params));
      auto out = model.forward(g.input(tb.features), g.input(context_tensor(tb)));
      Var loss = model.loss(out, tb.instance_labels, tb.label);
      g.backward(loss);
      const auto& z = g.value(out.instance_logits);
      double inst = 0;
      for (std::size_t i = 0; i < z.numel(); ++i)
        inst += tb.instance_labels[i] ? softplus(-z[i]) : softplus(z[i]);
      inst /= static_cast<double>(z.numel());
      const float zt = g.value(out.tubelet_logit).item();
      log.instance_loss += inst;
      log.tubelet_loss += tb.label ? softplus(-zt) : softplus(zt);
      log.loss += g.value(loss).item();
      std::vector<Tensor> grads;
      grads.reserve(model.param_vars().size());
      for (Var v : model.param_vars()) grads.push_back(g.grad(v));
      adam_step(result.params, grads, adam);
    }
    const double n = static_cast<double>(count);
    log.loss /= n;
    log.instance_loss /= n;
    log.tubelet_loss /= n;
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

std::string format_epoch_log(const EpochLog& e) {
  nlohmann::json j{{"epoch", e.epoch}, {"loss", e.loss}, {"instance_loss", e.instance_loss},
                   {"tubelet_loss", e.tubelet_loss}};
  return j.dump();
}

void save_model(const std::filesystem::path& checkpoint, const ParamSet& params, const ClassifierConfig& cfg) {
  write_checkpoint(checkpoint, params);
  std::ofstream out(checkpoint.string() + ".json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + checkpoint.string() + ".json");
  out << config_to_json(cfg) << '\n';
}

Model load_model(const std::filesystem::path& checkpoint) {
  Model m;
  m.params = read_checkpoint(checkpoint);
  std::ifstream in(checkpoint.string() + ".json");
  if (!in) throw IoError("missing classifier config " + checkpoint.string() + ".json");
  std::stringstream ss;
  ss << in.rdbuf();
  m.config = config_from_json(ss.str());
  const auto layout = param_layout(m.config);
  require(layout.size() == m.params.size(), "checkpoint does not match its classifier config");
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].name != m.params[i].name || layout[i].shape != m.params[i].value.shape())
      throw FormatError("tensor[" + std::to_string(i) + "]", "checkpoint tensor '" + m.params[i].name +
                                                                 "' does not match the classifier layout");
  return m;
}

ProfileReport profile(const ClassifierConfig& cfg) {
  validate(cfg);
  ProfileReport r;
  auto add_layer = [&](std::string name, std::size_t params, std::uint64_t macs, bool per_frame) {
    r.layers.push_back({std::move(name), params, 2 * macs, per_frame});
    r.parameters += params;
    if (per_frame) {
      r.classifier_flops_per_frame += 2 * macs;
    } else {
      r.tubelet_flops += 2 * macs;
    }
  };
  int in = cfg.in_channels;
  int size = cfg.roi_res;
  for (int b = 0; b < cfg.blocks(); ++b) {
    const int w = cfg.widths[b];
    size = conv_output_size(size, kKernel, 2, 1);
    const std::uint64_t weights = std::uint64_t(w) * in * kKernel * kKernel;
    add_layer("encoder." + std::to_string(b), weights + w, weights * size * size, true);
    if (cfg.embed == EmbedMode::EmbedAll) {
      add_layer("attention." + std::to_string(b), 2 * (std::uint64_t(w) * w + w), 2 * std::uint64_t(w) * w, true);
      add_layer("context." + std::to_string(b), std::uint64_t(2 * w) * cfg.context_dim + 2 * w,
                std::uint64_t(2 * w) * cfg.context_dim, false);
    }
    in = w;
  }
  const std::uint64_t d = cfg.feature_length();
  add_layer("instance_head", d + 1, d, true);
  std::uint64_t head_in = d;
  if (cfg.embed == EmbedMode::EmbedLast) {
    add_layer("context", d * cfg.context_dim + d, d * cfg.context_dim, false);
    head_in = 2 * d;
  }
  add_layer("tubelet_head", head_in + 1, head_in, false);
  // Four bilinear taps per ROI-aligned output value.
  r.roi_align_flops_per_frame = 2ull * 4 * cfg.in_channels * cfg.roi_res * cfg.roi_res;
  r.total_flops_per_frame = r.classifier_flops_per_frame + r.roi_align_flops_per_frame;
  return r;
}

}  // namespace tubelet
