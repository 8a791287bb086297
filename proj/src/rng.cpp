#include "parbeam/rng.hpp"

#include <cmath>
#include <numbers>

namespace parbeam::rng {

double Stream::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

namespace {

std::uint64_t poisson_inversion(double mean, Stream& s) {
    // sequential search on the CDF; fine for small means
    double p = std::exp(-mean);
    double cum = p;
    double u = s.uniform();
    std::uint64_t k = 0;
    while (u > cum && k < 10000) {
        ++k;
        p *= mean / double(k);
        cum += p;
    }
    return k;
}

// Hormann's PTRS (transformed rejection) for mean >= 10.
std::uint64_t poisson_ptrs(double mean, Stream& s) {
    const double slam = std::sqrt(mean);
    const double loglam = std::log(mean);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
        double u = s.uniform() - 0.5;
        double v = s.uniform();
        double us = 0.5 - std::abs(u);
        double kf = std::floor((2.0 * a / us + b) * u + mean + 0.43);
        if (kf < 0.0) continue;
        if (us >= 0.07 && v <= vr) return std::uint64_t(kf);
        if (us < 0.013 && v > us) continue;
        double lhs = std::log(v * inv_alpha / (a / (us * us) + b));
        double rhs = -mean + kf * loglam - std::lgamma(kf + 1.0);
        if (lhs <= rhs) return std::uint64_t(kf);
    }
}

} // namespace

std::uint64_t poisson(double mean, Stream& s) {
    if (!(mean > 0.0)) return 0;
    if (mean < 10.0) return poisson_inversion(mean, s);
    return poisson_ptrs(mean, s);
}

std::vector<int> shuffled_indices(int n, std::uint64_t seed, std::uint64_t key) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    Stream s(seed, key);
    for (int i = n - 1; i > 0; --i) {
        int j = int(s.below(std::uint64_t(i) + 1));
        std::swap(idx[i], idx[j]);
    }
    return idx;
}

} // namespace parbeam::rng
