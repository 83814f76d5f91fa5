#pragma once

#include "fsta/tensor.hpp"

namespace fsta {

/// 10*log10(peak^2 / MSE); +inf sentinel for identical images.
inline double psnr(const Tensor& a, const Tensor& b, double peak = 1.0) {
    if (!a.same_shape(b))
        throw std::invalid_argument("psnr: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    double mse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

namespace detail {

inline const std::vector<double>& ssim_gaussian11() {
    static const std::vector<double> win = [] {
        std::vector<double> w(11 * 11);
        const double sigma = 1.5;
        double sum = 0.0;
        for (int y = 0; y < 11; ++y)
            for (int x = 0; x < 11; ++x) {
                const double dy = y - 5, dx = x - 5;
                w[y * 11 + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                sum += w[y * 11 + x];
            }
        for (auto& v : w) v /= sum;
        return w;
    }();
    return win;
}

}  // namespace detail

/// Structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5, k1=0.01, k2=0.03), averaged over valid (interior) windows.
/// Accepts [H,W] or [1,H,W]; data range is `peak`.
inline double ssim(const Tensor& a, const Tensor& b, double peak = 1.0) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
    std::size_t H, W;
    if (a.rank() == 2) {
        H = a.extent(0);
        W = a.extent(1);
    } else if (a.rank() == 3 && a.extent(0) == 1) {
        H = a.extent(1);
        W = a.extent(2);
    } else {
        throw std::invalid_argument("ssim: [H,W] or [1,H,W] image required, got " +
                                    shape_str(a.shape()));
    }
    if (H < 11 || W < 11) throw std::invalid_argument("ssim: image smaller than the 11x11 window");

    const auto& win = detail::ssim_gaussian11();
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    const double* pa = a.ptr();
    const double* pb = b.ptr();

    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t oy = 0; oy + 11 <= H; ++oy)
        for (std::size_t ox = 0; ox + 11 <= W; ++ox) {
            double mu_a = 0, mu_b = 0, saa = 0, sbb = 0, sab = 0;
            for (std::size_t y = 0; y < 11; ++y)
                for (std::size_t x = 0; x < 11; ++x) {
                    const double w = win[y * 11 + x];
                    const double va = pa[(oy + y) * W + ox + x];
                    const double vb = pb[(oy + y) * W + ox + x];
                    mu_a += w * va;
                    mu_b += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            const double var_a = saa - mu_a * mu_a;
            const double var_b = sbb - mu_b * mu_b;
            const double cov = sab - mu_a * mu_b;
            const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            ++count;
        }
    return total / static_cast<double>(count);
}

}  // namespace fsta
