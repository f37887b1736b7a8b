#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace carkit {

/// Neumaier-compensated running sum. Adding the same values in the same order
/// gives bit-identical results on every run.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      compensation_ += (sum_ - t) + x;
    } else {
      compensation_ += (x - t) + sum_;
    }
    sum_ = t;
    ++count_;
  }
  double value() const { return sum_ + compensation_; }
  std::size_t count() const { return count_; }
  double mean() const { return value() / static_cast<double>(count_); }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
  std::size_t count_ = 0;
};

inline double compensated_mean(std::span<const double> values) {
  CompensatedSum s;
  for (double v : values) s.add(v);
  return s.mean();
}

}  // namespace carkit
