#pragma once

#include <chrono>

#include "fsta/nonlocal.hpp"

namespace fsta {

enum class CostMode { fsta, dense };

inline const char* cost_mode_name(CostMode m) { return m == CostMode::fsta ? "fsta" : "dense"; }

/// Element and FLOP accounting for factorized vs. dense attention.
/// Counts are in tensor elements (dtype-agnostic); bytes follow as
/// elems * sizeof(dtype).
struct CostReport {
    // config echo
    std::size_t T = 0, H = 0, W = 0, M = 0, N = 0, C = 0;

    std::size_t dense_affinity_elems = 0;  ///< (T*H*W)^2
    std::size_t fsta_attention_elems = 0;  ///< T*M*HW + N*T + M*N*HW
    std::size_t dense_flops = 0;
    std::size_t fsta_flops = 0;
    long long measured_peak_elems = 0;     ///< from the instrumented run, 0 if analytic only
    double ratio = 0.0;                    ///< dense_affinity_elems / fsta_attention_elems
    bool degenerate = false;               ///< ratio < 1 (factorization not smaller)
    double wall_ms = 0.0;

    /// FLOP formulas used above, kept with the numbers they produced.
    static const char* fsta_flop_formula() {
        return "2*C*ks^2*M*HW*T + 5*T*M*HW + 2*T*M*C*HW + T*C*HW + 2*N*kt*T + 5*N*T"
               " + 2*C*M*N*T + 2*C*kp^2*M*N*HW + 5*M*N*HW + 2*C*M*N*HW";
    }
    static const char* dense_flop_formula() {
        return "P=T*HW, Ce=ceil(C/2): 6*C*Ce*P + 2*Ce*P^2 + 5*P^2 + 2*Ce*P^2 + 2*Ce*C*P";
    }
};

inline CostReport analytic_cost(const FstaConfig& c) {
    c.validate();
    const std::size_t HW = c.hw(), P = c.T * HW;
    const std::size_t ce = DenseNonLocalParams::embed_dim(c.C);

    CostReport r;
    r.T = c.T;
    r.H = c.H;
    r.W = c.W;
    r.M = c.M;
    r.N = c.N;
    r.C = c.C;
    r.dense_affinity_elems = P * P;
    r.fsta_attention_elems = c.T * c.M * HW + c.N * c.T + c.mn() * HW;
    r.fsta_flops = 2 * c.C * c.k_s * c.k_s * c.M * HW * c.T  // f_s logits
                   + 5 * c.T * c.M * HW                      // softmax over HW
                   + 2 * c.T * c.M * c.C * HW                // spatial squeeze
                   + c.T * c.C * HW                          // x' pooling
                   + 2 * c.N * c.k_t * c.T                   // f_t logits
                   + 5 * c.N * c.T                           // softmax over T
                   + 2 * c.C * c.mn() * c.T                  // temporal squeeze
                   + 2 * c.C * c.k_p * c.k_p * c.mn() * HW   // f_p logits
                   + 5 * c.mn() * HW                         // softmax over MN
                   + 2 * c.C * c.mn() * HW;                  // distribution
    r.dense_flops = 6 * c.C * ce * P      // Q,K,V embeddings
                    + 2 * ce * P * P      // affinity
                    + 5 * P * P           // softmax
                    + 2 * ce * P * P      // apply to V
                    + 2 * ce * c.C * P;   // output projection
    r.ratio = static_cast<double>(r.dense_affinity_elems) /
              static_cast<double>(r.fsta_attention_elems);
    r.degenerate = r.ratio < 1.0;
    return r;
}

/// Runs one forward pass under the allocation counter and records the peak
/// live element count of tensors created inside the pass.
inline CostReport measured_cost(const Tensor& x, const FstaParams& fsta_params,
                                const DenseNonLocalParams& dense_params, const FstaConfig& c,
                                CostMode mode) {
    CostReport r = analytic_cost(c);
    const auto t0 = std::chrono::steady_clock::now();
    long long peak = 0;
    if (mode == CostMode::fsta) {
        AllocScope scope;
        Tensor y = fsta_forward_lean(x, fsta_params, c);
        peak = scope.peak();
    } else {
        check_affinity_guard(c.T * c.hw() * c.T * c.hw(), "measured_cost");
        AllocScope scope;
        Tensor y = dense_nonlocal_forward_lean(x, dense_params);
        peak = scope.peak();
    }
    const auto t1 = std::chrono::steady_clock::now();
    r.measured_peak_elems = peak;
    r.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return r;
}

}  // namespace fsta
