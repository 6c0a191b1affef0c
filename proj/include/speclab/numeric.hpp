#pragma once

#include <cmath>
#include <span>

namespace speclab {

// Floor applied before logs so exact zeros become a huge-but-finite penalty
// instead of -inf; exact zeros that must stay exact (support violations,
// degenerate acceptance) are detected before the log is taken.
inline constexpr double kLogFloor = 1e-300;

inline double safe_log(double x) {
    return std::log(x < kLogFloor ? kLogFloor : x);
}

// Kahan-Neumaier compensated accumulator. Probability vectors here can have
// 1e5 entries and several invariants are asserted at 1e-12, which plain
// left-to-right summation does not reliably reach.
class KahanAccumulator {
public:
    void add(double x) {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x)) {
            comp_ += (sum_ - t) + x;
        } else {
            comp_ += (x - t) + sum_;
        }
        sum_ = t;
    }

    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

inline double kahan_sum(std::span<const double> xs) {
    KahanAccumulator acc;
    for (double x : xs) {
        acc.add(x);
    }
    return acc.value();
}

inline double l2_norm(std::span<const double> xs) {
    KahanAccumulator acc;
    for (double x : xs) {
        acc.add(x * x);
    }
    return std::sqrt(acc.value());
}

}  // namespace speclab
