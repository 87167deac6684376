#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tubelet/tensor.hpp"

namespace tubelet {

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Ordered collection of named parameter tensors. Order is insertion order
/// and is preserved by the checkpoint format.
class ParamSet {
 public:
  Tensor& add(std::string name, Tensor value);
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  bool contains(std::string_view name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t parameter_count() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  NamedTensor& operator[](std::size_t i) { return entries_[i]; }
  const NamedTensor& operator[](std::size_t i) const { return entries_[i]; }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<NamedTensor> entries_;
};

struct AdamOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for each parameter plus the step counter.
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  AdamState() = default;
  AdamState(AdamOptions opts, std::span<const Tensor> params);
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state);
void adam_step(ParamSet& params, std::span<const Tensor> grads, AdamState& state);

// Checkpoint container: "TBKT", u32 version, u32 count, then per tensor
// u32 name length, UTF-8 name, u32 rank, u32 dims, little-endian f32 payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params);
ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet read_checkpoint(const std::filesystem::path& path);

}  // namespace tubelet
