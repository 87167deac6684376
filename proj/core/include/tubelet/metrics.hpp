#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tubelet/data_io.hpp"

namespace tubelet {

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting half.
/// Throws DegenerateInputError unless both classes are present.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double regularized_incomplete_beta(double a, double b, double x);

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
double student_t_two_sided_p(double t, double df);

struct PairedTTest {
  double t = 0;
  double df = 0;
  double p = 1;
};

/// Paired t-test on a[i] - b[i]. Throws std::invalid_argument for unequal or
/// too-short inputs and DegenerateInputError when the differences have zero
/// variance.
PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b);

struct FoldAssignment {
  int folds = 0;
  std::map<std::string, int> patient_fold;
  std::vector<int> video_fold;  // parallel to the manifest's video list

  std::vector<int> videos_in(int fold) const;
  std::vector<int> videos_outside(int fold) const;
};

/// Seeded shuffle of the distinct patient ids followed by round-robin
/// assignment. With `stratify`, patients having any positive video for that
/// pathology are dealt first so both classes spread across folds.
FoldAssignment patient_folds(std::span<const VideoRecord> videos, int k, std::uint64_t seed,
                             std::optional<Pathology> stratify = std::nullopt);

}  // namespace tubelet
