#include "tubelet/random.hpp"

#include <vector>

namespace tubelet {

std::mt19937_64 make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> streams) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (auto s : streams) {
    words.push_back(static_cast<std::uint32_t>(s));
    words.push_back(static_cast<std::uint32_t>(s >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<float>(dist(rng));
  return t;
}

}  // namespace tubelet
