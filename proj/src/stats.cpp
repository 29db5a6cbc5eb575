// SPDX-License-Identifier: Apache-2.0
#include "moelab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab::stats {

namespace {

constexpr double kTolerance = 1e-12;
constexpr int kMaxIterations = 10000;
constexpr double kTiny = 1e-300;
// Spread below this fraction of the mean magnitude is floating-point noise.
constexpr double kZeroSpreadRel = 1e-12;

// Continued fraction for I_x(a,b), modified Lentz.
double beta_continued_fraction(double a, double b, double x) {
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
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
    if (std::abs(del - 1.0) < kTolerance) return h;
  }
  throw StatisticsError("incomplete beta continued fraction did not converge (a=" + std::to_string(a) +
                        ", b=" + std::to_string(b) + ", x=" + std::to_string(x) + ")");
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw StatisticsError("incomplete beta needs a, b > 0");
  if (x < 0.0 || x > 1.0 || std::isnan(x)) throw StatisticsError("incomplete beta needs x in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw StatisticsError("Student t needs positive degrees of freedom");
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw StatisticsError("Student t needs positive degrees of freedom");
  if (t == 0.0) return 0.5;
  const double tail = 0.5 * student_t_two_sided_p(t, df);
  return t > 0.0 ? 1.0 - tail : tail;
}

ConfidenceInterval fisher_ci(double r, std::size_t n, double z) {
  if (n < 4) throw SampleSizeError("Fisher confidence interval needs n >= 4, got " + std::to_string(n));
  const double centre = std::atanh(std::clamp(r, -1.0, 1.0));
  const double half = z / std::sqrt(static_cast<double>(n - 3));
  return {std::tanh(centre - half), std::tanh(centre + half)};
}

double correlation_p_value(double r, std::size_t n) {
  if (n < 3) throw SampleSizeError("correlation p-value needs n >= 3");
  if (std::abs(r) >= 1.0) return 0.0;
  const double t = r * std::sqrt(static_cast<double>(n - 2) / (1.0 - r * r));
  return student_t_two_sided_p(t, static_cast<double>(n - 2));
}

CorrelationResult pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw SampleSizeError("pearson: series lengths differ");
  const std::size_t n = xs.size();
  if (n < 3) throw SampleSizeError("pearson needs at least 3 pairs, got " + std::to_string(n));
  const double mx = mean_of(xs), my = mean_of(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelationError("pearson: constant series, correlation undefined");
  CorrelationResult res;
  res.n = n;
  res.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  if (std::abs(res.r) == 1.0) {
    res.t_statistic = std::copysign(std::numeric_limits<double>::infinity(), res.r);
  } else {
    res.t_statistic = res.r * std::sqrt(static_cast<double>(n - 2) / (1.0 - res.r * res.r));
  }
  res.p_two_sided = correlation_p_value(res.r, n);
  if (n >= 4) res.ci95 = fisher_ci(res.r, n);
  return res;
}

PairedTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw SampleSizeError("paired t-test: samples differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw SampleSizeError("paired t-test needs at least 2 pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) {
    throw DegenerateTestError("paired t-test: all differences are zero");
  }
  PairedTestResult res;
  res.n = n;
  res.degrees_freedom = n - 1;
  res.mean_diff = mean_of(d);
  double ss = 0.0, scale = 0.0;
  for (double v : d) {
    ss += (v - res.mean_diff) * (v - res.mean_diff);
    scale = std::max(scale, std::abs(v));
  }
  res.sd_diff = std::sqrt(ss / static_cast<double>(n - 1));
  if (res.sd_diff <= kZeroSpreadRel * scale) {
    res.saturated = true;
    res.t_statistic = std::copysign(std::numeric_limits<double>::infinity(), res.mean_diff);
    res.p_two_sided = 0.0;
    return res;
  }
  res.t_statistic = res.mean_diff / (res.sd_diff / std::sqrt(static_cast<double>(n)));
  res.p_two_sided = student_t_two_sided_p(res.t_statistic, static_cast<double>(n - 1));
  return res;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw SampleSizeError("summarize needs at least one value");
  Summary s;
  s.n = values.size();
  s.mean = mean_of(values);
  if (s.n >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sample_std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

}  // namespace moelab::stats
