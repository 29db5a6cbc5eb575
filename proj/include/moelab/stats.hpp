// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>

namespace moelab::stats {

/// Two-sided 95% standard-normal quantile used for Fisher intervals.
inline constexpr double kZ95 = 1.959963985;

struct ConfidenceInterval {
  double low = 0.0;
  double high = 0.0;
};

struct CorrelationResult {
  double r = 0.0;
  std::size_t n = 0;
  double t_statistic = 0.0;
  double p_two_sided = 1.0;
  std::optional<ConfidenceInterval> ci95;  // requires n ≥ 4
};

struct PairedTestResult {
  std::size_t n = 0;
  double mean_diff = 0.0;
  double sd_diff = 0.0;
  double t_statistic = 0.0;
  std::size_t degrees_freedom = 0;
  double p_two_sided = 1.0;
  /// Differences have (numerically) zero spread but nonzero mean: |t| = ∞, p = 0.
  bool saturated = false;
};

struct Summary {
  std::size_t n = 0;
  double mean = 0.0;
  std::optional<double> sample_std;  // requires n ≥ 2
};

/// Regularized incomplete beta I_x(a, b) by Lentz continued fractions.
double regularized_incomplete_beta(double a, double b, double x);

/// P(T ≤ t) for Student's t with `df` > 0 degrees of freedom.
double student_t_cdf(double t, double df);

/// Two-sided tail probability P(|T| ≥ |t|).
double student_t_two_sided_p(double t, double df);

/// Fisher z-transform interval for a correlation estimated from n ≥ 4 points.
ConfidenceInterval fisher_ci(double r, std::size_t n, double z = kZ95);

/// Two-sided p-value of H0: ρ = 0 via t = r√((n−2)/(1−r²)) with n − 2 df.
double correlation_p_value(double r, std::size_t n);

/// Product-moment correlation with p-value and (for n ≥ 4) Fisher CI.
/// Throws SampleSizeError for n < 3 and UndefinedCorrelationError for a constant series.
CorrelationResult pearson(std::span<const double> xs, std::span<const double> ys);

/// Paired t-test on a − b. Throws DegenerateTestError when every difference is zero.
PairedTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

Summary summarize(std::span<const double> values);

}  // namespace moelab::stats
