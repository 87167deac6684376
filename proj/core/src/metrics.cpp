#include "tubelet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "tubelet/errors.hpp"
#include "tubelet/random.hpp"

namespace tubelet {

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("auroc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0)
    throw DegenerateInputError("auroc: need at least one positive and one negative label (got " +
                               std::to_string(pos) + " positive, " + std::to_string(neg) + " negative)");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of 1-based mid-ranks of the positives; ties share their average rank.
  double rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum += mid_rank;
    i = j;
  }
  const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
  const double u = rank_sum - np * (np + 1) / 2.0;
  return u / (np * nn);
}

namespace {

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (a <= 0 || b <= 0) throw std::invalid_argument("incomplete beta: a and b must be positive");
  if (x < 0 || x > 1) throw std::invalid_argument("incomplete beta: x must lie in [0, 1]");
  if (x == 0 || x == 1) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1) / (a + b + 2)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0)) throw std::invalid_argument("student t: degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired t-test: samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired t-test: need at least two pairs");
  const double n = static_cast<double>(a.size());
  double mean = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double var = ss / (n - 1);
  if (!(var > 0)) throw DegenerateInputError("paired t-test: differences have zero variance");
  PairedTTest r;
  r.df = n - 1;
  r.t = mean / std::sqrt(var / n);
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

std::vector<int> FoldAssignment::videos_in(int fold) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < video_fold.size(); ++i)
    if (video_fold[i] == fold) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> FoldAssignment::videos_outside(int fold) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < video_fold.size(); ++i)
    if (video_fold[i] != fold) out.push_back(static_cast<int>(i));
  return out;
}

FoldAssignment patient_folds(std::span<const VideoRecord> videos, int k, std::uint64_t seed,
                             std::optional<Pathology> stratify) {
  if (k < 1) throw std::invalid_argument("patient_folds: k must be >= 1");
  std::set<std::string> positive;
  std::set<std::string> unique;
  for (const auto& v : videos) {
    if (v.patient_id.empty()) throw std::invalid_argument("patient_folds: video " + v.video_id + " has no patient id");
    unique.insert(v.patient_id);
    if (stratify && v.label(*stratify)) positive.insert(v.patient_id);
  }
  if (static_cast<std::size_t>(k) > unique.size())
    throw std::invalid_argument("patient_folds: " + std::to_string(k) + " folds requested but only " +
                                std::to_string(unique.size()) + " patients");
  auto rng = make_rng(seed, {0x666f6c64});
  std::vector<std::string> order;
  if (stratify) {
    std::vector<std::string> pos, neg;
    for (const auto& p : unique) (positive.count(p) ? pos : neg).push_back(p);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    order = pos;
    order.insert(order.end(), neg.begin(), neg.end());
  } else {
    order.assign(unique.begin(), unique.end());
    std::shuffle(order.begin(), order.end(), rng);
  }
  FoldAssignment f;
  f.folds = k;
  for (std::size_t i = 0; i < order.size(); ++i) f.patient_fold[order[i]] = static_cast<int>(i % k);
  for (const auto& v : videos) f.video_fold.push_back(f.patient_fold.at(v.patient_id));
  return f;
}

}  // namespace tubelet
