#include "tubelet/params.hpp"

#include <cmath>
#include <stdexcept>

#include "binary_io.hpp"
#include "tubelet/errors.hpp"

namespace tubelet {

Tensor& ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  entries_.push_back({std::move(name), std::move(value)});
  return entries_.back().value;
}

bool ParamSet::contains(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const Tensor& ParamSet::at(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

Tensor& ParamSet::at(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

AdamState::AdamState(AdamOptions opts, std::span<const Tensor> params) : options(opts) {
  for (const auto& p : params) {
    first_moment.emplace_back(p.shape());
    second_moment.emplace_back(p.shape());
  }
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " params but " +
                                std::to_string(grads.size()) + " grads");
  if (state.first_moment.empty() && state.step == 0) state = AdamState(state.options, params);
  if (state.first_moment.size() != params.size())
    throw std::invalid_argument("adam_step: optimizer state tracks a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state.first_moment[i].shape())
      throw std::invalid_argument("adam_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                                  shape_str(params[i].shape()) + " vs grad " + shape_str(grads[i].shape()));
  }
  ++state.step;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  const float b1 = static_cast<float>(o.beta1), b2 = static_cast<float>(o.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      p[j] = static_cast<float>(p[j] - o.lr * m_hat / (std::sqrt(v_hat) + o.eps));
    }
  }
}

void adam_step(ParamSet& params, std::span<const Tensor> grads, AdamState& state) {
  std::vector<Tensor> values;
  values.reserve(params.size());
  for (auto& e : params) values.push_back(std::move(e.value));
  try {
    adam_step(std::span<Tensor>(values), grads, state);
  } catch (...) {
    for (std::size_t i = 0; i < values.size(); ++i) params[i].value = std::move(values[i]);
    throw;
  }
  for (std::size_t i = 0; i < values.size(); ++i) params[i].value = std::move(values[i]);
}

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params) {
  detail::ByteWriter w;
  w.bytes("TBKT", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (int d : e.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32(e.value.data());
  }
  return w.take();
}

ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.bytes(4, "magic");
  if (std::string(magic.begin(), magic.end()) != "TBKT") throw FormatError("magic", "expected \"TBKT\"");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("version", "unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u32("count");
  ParamSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor[" + std::to_string(i) + "]";
    const auto name_len = r.u32(where + ".name_length");
    auto name_bytes = r.bytes(name_len, where + ".name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto rank = r.u32(where + ".rank");
    if (rank == 0 || rank > 8) throw FormatError(where + ".rank", "invalid rank " + std::to_string(rank));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.u32(where + ".dims");
      if (dim == 0 || dim > (1u << 30)) throw FormatError(where + ".dims", "invalid dimension " + std::to_string(dim));
      shape.push_back(static_cast<int>(dim));
      numel *= dim;
      if (numel > r.remaining()) throw FormatError(where + ".payload", "dimensions exceed remaining file size");
    }
    auto values = r.f32(numel, where + ".payload");
    if (out.contains(name)) throw FormatError(where + ".name", "duplicate tensor name '" + name + "'");
    out.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw FormatError("trailer", std::to_string(r.remaining()) + " unexpected trailing bytes");
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  detail::write_file_bytes(path, encode_checkpoint(params));
}

ParamSet read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

}  // namespace tubelet
