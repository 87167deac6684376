#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tubelet/data_io.hpp"
#include "tubelet/graph.hpp"
#include "tubelet/params.hpp"
#include "tubelet/tubelet.hpp"

namespace tubelet {

/// Where the tubelet context vector enters the classifier.
enum class EmbedMode {
  None,      ///< image features only
  EmbedAll,  ///< channel-attention modulation after every conv block
  EmbedLast, ///< embedded context concatenated before the tubelet head
};

std::string_view to_string(EmbedMode mode);
/// Accepts none / all / last (also the enum names); throws std::invalid_argument.
EmbedMode parse_embed_mode(std::string_view text);

struct ClassifierConfig {
  int in_channels = 32;
  int roi_res = 32;
  /// Spatial size after the encoder (x in x-by-x).
  int spatial_out = 4;
  /// Output channels of each stride-2 block; doubles block to block.
  std::vector<int> widths{64, 128, 256};
  EmbedMode embed = EmbedMode::EmbedLast;
  int context_dim = 5;
  double w_ins = 1.0;
  double w_tubelet = 1.0;
  int epochs = 500;
  double lr = 1e-5;
  std::uint64_t seed = 0;
  double leaky_slope = 0.1;

  int blocks() const noexcept { return static_cast<int>(widths.size()); }
  int last_width() const { return widths.back(); }
  /// Flattened encoder output length, C_last * x^2.
  int feature_length() const { return last_width() * spatial_out * spatial_out; }

  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

/// Throws std::invalid_argument unless roi_res / spatial_out is a power of two
/// equal to 2^blocks and the widths double block to block.
void validate(const ClassifierConfig& cfg);

/// Number of stride-2 blocks needed to take roi_res down to spatial_out.
int block_count(int roi_res, int spatial_out);
std::vector<int> doubling_widths(int first, int blocks);

/// Defaults per feature source: input channels and ROI resolution of the
/// layer, and widths ending at 256 (512 for raw images).
ClassifierConfig default_classifier_config(LayerTag layer, EmbedMode mode = EmbedMode::EmbedLast);

std::string config_to_json(const ClassifierConfig& cfg);
ClassifierConfig config_from_json(std::string_view text);

struct ParamSpec {
  std::string name;
  Shape shape;
  int fan_in;
};

/// Names and shapes of every learned tensor, in checkpoint order.
std::vector<ParamSpec> param_layout(const ClassifierConfig& cfg);

/// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
ParamSet init_params(const ClassifierConfig& cfg);

/// The classifier bound to one graph. Parameters become gradient-tracked
/// leaves in layout order; `param_vars()[i]` corresponds to layout entry i.
template <typename T>
class ClassifierGraph {
 public:
  ClassifierGraph(Graph<T>& graph, const ClassifierConfig& cfg, std::vector<BasicTensor<T>> values,
                  bool requires_grad = true);

  Graph<T>& graph() noexcept { return g_; }
  const std::vector<Var>& param_vars() const noexcept { return vars_; }
  Var param(std::string_view name) const;

  /// N x C x R x R instances -> N x D flattened encodings (EmbedAll needs the
  /// per-block embeddings from embed_context).
  Var encode(Var instances, std::span<const Var> block_embeddings = {});
  /// Single C x R x R instance -> length-D encoding.
  Var encode_instance(Var instance, std::span<const Var> block_embeddings = {});
  /// EmbedLast: one embedding of length D. EmbedAll: one 2*C_l embedding per block.
  std::vector<Var> embed_context(Var context);
  /// gate = sigmoid(attention(pool(feature)) * e[:C] + e[C:]); feature * gate.
  Var channel_attention_modulate(Var feature, Var embedded, int block);

  struct Output {
    Var instance_logits;  // length T
    Var tubelet_logit;    // length 1
  };
  /// `frames` is T x C x R x R, `context` has length 5.
  Output forward(Var frames, Var context);

  /// w_ins * mean(instance BCE) + w_tubelet * tubelet BCE.
  Var loss(const Output& out, std::span<const int> instance_labels, int tubelet_label);

 private:
  Graph<T>& g_;
  ClassifierConfig cfg_;
  std::vector<Var> vars_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct TubeletScores {
  std::vector<float> instance_logits;
  float tubelet_logit = 0.0f;
};

TubeletScores classify_tubelet(const Tubelet& tubelet, const ParamSet& params, const ClassifierConfig& cfg);

/// Scalar training loss of one labeled tubelet.
double tubelet_loss(std::span<const float> instance_logits, std::span<const int> instance_labels,
                    float tubelet_logit, int tubelet_label, double w_ins, double w_tubelet);

struct EpochLog {
  int epoch = 0;
  double loss = 0;
  double instance_loss = 0;
  double tubelet_loss = 0;
};

struct TrainResult {
  ParamSet params;
  std::vector<EpochLog> log;
};

/// Full passes over `tubelets` in the given order, one Adam step per tubelet.
TrainResult train(std::span<const Tubelet> tubelets, const ClassifierConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Yields labeled tubelet i on demand, so large training sets need not be
/// materialized at once.
using TubeletSource = std::function<Tubelet(std::size_t)>;
TrainResult train(std::size_t count, const TubeletSource& source, const ClassifierConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

std::string format_epoch_log(const EpochLog& e);

/// Checkpoint plus a `<checkpoint>.json` sidecar holding the config.
void save_model(const std::filesystem::path& checkpoint, const ParamSet& params, const ClassifierConfig& cfg);
struct Model {
  ParamSet params;
  ClassifierConfig config;
};
Model load_model(const std::filesystem::path& checkpoint);

struct LayerCost {
  std::string name;
  std::size_t params = 0;
  std::uint64_t flops = 0;
  bool per_frame = true;  ///< false: evaluated once per tubelet
};

/// Analytic cost model; FLOPs count 2 per multiply-accumulate.
struct ProfileReport {
  std::size_t parameters = 0;
  std::uint64_t classifier_flops_per_frame = 0;
  std::uint64_t roi_align_flops_per_frame = 0;
  std::uint64_t total_flops_per_frame = 0;
  std::uint64_t tubelet_flops = 0;
  std::vector<LayerCost> layers;
};

ProfileReport profile(const ClassifierConfig& cfg);

}  // namespace tubelet
