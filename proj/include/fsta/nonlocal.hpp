#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "fsta/attention.hpp"

namespace fsta {

/// Largest affinity the brute-force paths will materialize, in elements.
inline constexpr std::size_t kAffinityGuard = 100'000'000;

inline void check_affinity_guard(std::size_t entries, const char* what) {
    if (entries > kAffinityGuard)
        throw std::invalid_argument(std::string(what) + ": affinity of " + std::to_string(entries) +
                                    " entries exceeds the " + std::to_string(kAffinityGuard) +
                                    "-element guard");
}

/// The implicit attention matrix realized by the factorized pipeline,
/// restricted to the reference frame's output rows:
///   W_eff[p, t*HW + q] = sum_{m,n} A_p[m*N+n, p] * A_t[n, t] * A_s[t, m, q].
/// Every row is a convex combination over all T*HW input positions and the
/// matrix has rank at most M*N.
inline Tensor effective_affinity(const FstaIntermediates& inter, const FstaConfig& c) {
    const std::size_t HW = c.hw();
    check_affinity_guard(c.T * HW * HW, "effective_affinity");
    require_shape(inter.A_s, {c.T, c.M, HW}, "effective_affinity: A_s");
    require_shape(inter.A_t, {c.N, c.T}, "effective_affinity: A_t");
    require_shape(inter.A_p, {c.mn(), HW}, "effective_affinity: A_p");

    Tensor w_eff({HW, c.T * HW});
    // D[m,p] for a fixed t: sum_n A_p[m*N+n, p] * A_t[n, t]
    Tensor d({c.M, HW});
    for (std::size_t t = 0; t < c.T; ++t) {
        for (std::size_t m = 0; m < c.M; ++m)
            for (std::size_t p = 0; p < HW; ++p) {
                double acc = 0.0;
                for (std::size_t n = 0; n < c.N; ++n)
                    acc += inter.A_p[combo_index(m, n, c.N) * HW + p] * inter.A_t[n * c.T + t];
                d[m * HW + p] = acc;
            }
        for (std::size_t p = 0; p < HW; ++p)
            for (std::size_t q = 0; q < HW; ++q) {
                double acc = 0.0;
                for (std::size_t m = 0; m < c.M; ++m)
                    acc += d[m * HW + p] * inter.A_s[(t * c.M + m) * HW + q];
                w_eff[p * c.T * HW + t * HW + q] = acc;
            }
    }
    return w_eff;
}

/// True iff singular values of W_eff beyond index M*N are below
/// 1e-8 * sigma_max.
inline bool affinity_rank_bounded(const Tensor& w_eff, std::size_t mn) {
    const std::size_t rows = w_eff.extent(0), cols = w_eff.extent(1);
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t cc = 0; cc < cols; ++cc)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cc)) = w_eff[r * cols + cc];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0) return true;
    const double cutoff = 1e-8 * sv(0);
    for (Eigen::Index i = static_cast<Eigen::Index>(mn); i < sv.size(); ++i)
        if (sv(i) >= cutoff) return false;
    return true;
}

struct OracleReport {
    FstaConfig config;
    std::uint64_t seed = 0;
    double max_abs_diff = 0.0;
    bool rank_ok = false;
    bool pass = false;
};

/// Runs the factorized forward and checks it against the materialized
/// effective affinity applied to the flattened input. Pass threshold 1e-9.
inline OracleReport oracle_check(const Tensor& x, const FstaParams& p, const FstaConfig& c,
                                 bool with_rank_check = true) {
    const std::size_t HW = c.hw();
    check_affinity_guard(c.T * HW * HW, "oracle_check");
    FstaIntermediates inter = fsta_forward(x, p, c);
    Tensor w_eff = effective_affinity(inter, c);

    double max_diff = 0.0;
    for (std::size_t ch = 0; ch < c.C; ++ch) {
        // vec over (t, q) of channel ch
        std::vector<double> xin(c.T * HW);
        for (std::size_t t = 0; t < c.T; ++t)
            for (std::size_t q = 0; q < HW; ++q) xin[t * HW + q] = x[(t * c.C + ch) * HW + q];
        for (std::size_t pix = 0; pix < HW; ++pix) {
            double acc = 0.0;
            const double* row = w_eff.ptr() + pix * c.T * HW;
            for (std::size_t j = 0; j < c.T * HW; ++j) acc += row[j] * xin[j];
            max_diff = std::max(max_diff, std::abs(acc - inter.y_ref[ch * HW + pix]));
        }
    }

    OracleReport r;
    r.config = c;
    r.max_abs_diff = max_diff;
    r.rank_ok = with_rank_check ? affinity_rank_bounded(w_eff, c.mn()) : true;
    r.pass = max_diff < 1e-9 && r.rank_ok;
    return r;
}

// ---------------------------------------------------------------------------
// Dense non-local baseline (embedded Gaussian, residual connection).
// ---------------------------------------------------------------------------

struct DenseNonLocalParams {
    Tensor wq, wk, wv;  ///< [C,Ce] channel embeddings (1x1 convolutions)
    Tensor w_out;       ///< [Ce,C] projection back for the residual

    static std::size_t embed_dim(std::size_t c) { return (c + 1) / 2; }

    static DenseNonLocalParams zeros(std::size_t c) {
        const std::size_t ce = embed_dim(c);
        return {Tensor({c, ce}), Tensor({c, ce}), Tensor({c, ce}), Tensor({ce, c})};
    }

    static DenseNonLocalParams init(std::size_t c, Rng& rng) {
        DenseNonLocalParams p = zeros(c);
        auto fill = [&rng](Tensor& w) {
            const double lim = std::sqrt(1.0 / static_cast<double>(w.extent(0)));
            for (auto& v : w.data()) v = rng.uniform(-lim, lim);
        };
        fill(p.wq);
        fill(p.wk);
        fill(p.wv);
        fill(p.w_out);
        return p;
    }

    NamedTensors named() const {
        return {{"nl.wq", wq}, {"nl.wk", wk}, {"nl.wv", wv}, {"nl.w_out", w_out}};
    }
};

struct DenseNonLocalVars {
    Var wq, wk, wv, w_out;

    static DenseNonLocalVars leaves(Tape& t, const DenseNonLocalParams& p, bool rg = true) {
        return {t.leaf(p.wq, rg), t.leaf(p.wk, rg), t.leaf(p.wv, rg), t.leaf(p.w_out, rg)};
    }
};

/// Permute [T,C,H,W] -> [T*H*W, C] so positions become matrix rows.
inline Var flatten_positions(const Var& x) {
    Tape& t = *x.tape;
    const Shape& s = x.shape();
    if (s.size() != 4) throw std::invalid_argument("flatten_positions: [T,C,H,W] required");
    const std::size_t T = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out({T * HW, C});
    for (std::size_t f = 0; f < T; ++f)
        for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t q = 0; q < HW; ++q)
                out[(f * HW + q) * C + ch] = x.val()[(f * C + ch) * HW + q];
    const int ix = x.id;
    return detail::emit(t, std::move(out), t.needs_grad(ix), [ix, T, C, HW](int id) {
        return [id, ix, T, C, HW](Tape& tp) {
            const Tensor& g = tp.grad(id);
            Tensor& gx = tp.grad(ix);
            for (std::size_t f = 0; f < T; ++f)
                for (std::size_t ch = 0; ch < C; ++ch)
                    for (std::size_t q = 0; q < HW; ++q)
                        gx[(f * C + ch) * HW + q] += g[(f * HW + q) * C + ch];
        };
    });
}

/// Inverse of flatten_positions: [T*H*W, C] -> [T,C,H,W].
inline Var unflatten_positions(const Var& m, std::size_t T, std::size_t H, std::size_t W) {
    Tape& t = *m.tape;
    const Shape& s = m.shape();
    const std::size_t HW = H * W;
    if (s.size() != 2 || s[0] != T * HW)
        throw std::invalid_argument("unflatten_positions: row count must equal T*H*W");
    const std::size_t C = s[1];
    Tensor out({T, C, H, W});
    for (std::size_t f = 0; f < T; ++f)
        for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t q = 0; q < HW; ++q)
                out[(f * C + ch) * HW + q] = m.val()[(f * HW + q) * C + ch];
    const int im = m.id;
    return detail::emit(t, std::move(out), t.needs_grad(im), [im, T, C, HW](int id) {
        return [id, im, T, C, HW](Tape& tp) {
            const Tensor& g = tp.grad(id);
            Tensor& gm = tp.grad(im);
            for (std::size_t f = 0; f < T; ++f)
                for (std::size_t ch = 0; ch < C; ++ch)
                    for (std::size_t q = 0; q < HW; ++q)
                        gm[(f * HW + q) * C + ch] += g[(f * C + ch) * HW + q];
        };
    });
}

/// Embedded-Gaussian non-local block over all T*H*W positions:
///   y = x + unflatten( softmax(Q K^T / sqrt(Ce)) V W_out ).
inline Var dense_nonlocal_forward(const Var& x, const DenseNonLocalVars& p) {
    const Shape s = x.shape();  // by value: later pushes must not invalidate it
    if (s.size() != 4) throw std::invalid_argument("dense_nonlocal_forward: [T,C,H,W] required");
    const std::size_t P = s[0] * s[2] * s[3];
    check_affinity_guard(P * P, "dense_nonlocal_forward");
    const std::size_t ce = p.wq.shape()[1];

    Var xm = flatten_positions(x);                       // [P,C]
    Var q = matmul(xm, p.wq);                            // [P,Ce]
    Var k = matmul(xm, p.wk);
    Var v = matmul(xm, p.wv);
    Var logits = scale(matmul(q, transpose2d(k)), 1.0 / std::sqrt(static_cast<double>(ce)));
    Var aff = softmax(logits, 1);                        // [P,P], rows sum to 1
    Var attended = matmul(aff, v);                       // [P,Ce]
    Var proj = matmul(attended, p.w_out);                // [P,C]
    return add(x, unflatten_positions(proj, s[0], s[2], s[3]));
}

/// Plain-tensor wrapper on a local tape.
inline Tensor dense_nonlocal_forward(const Tensor& x, const DenseNonLocalParams& p) {
    Tape tape;
    Var xv = tape.leaf(x, false);
    DenseNonLocalVars pv = DenseNonLocalVars::leaves(tape, p, false);
    return dense_nonlocal_forward(xv, pv).val();
}

/// Tape-free dense forward for memory instrumentation; materializes the full
/// (T*H*W)^2 affinity.
inline Tensor dense_nonlocal_forward_lean(const Tensor& x, const DenseNonLocalParams& p) {
    const Shape& s = x.shape();
    const std::size_t T = s[0], C = s[1], HW = s[2] * s[3], P = T * HW;
    check_affinity_guard(P * P, "dense_nonlocal_forward_lean");
    const std::size_t ce = p.wq.extent(1);

    Tensor xm({P, C});
    for (std::size_t f = 0; f < T; ++f)
        for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t qq = 0; qq < HW; ++qq)
                xm[(f * HW + qq) * C + ch] = x[(f * C + ch) * HW + qq];

    Tensor attended;
    {
        Tensor aff;
        {
            Tensor q = kernels::matmul(xm, p.wq);
            Tensor k = kernels::matmul(xm, p.wk);
            Tensor logits = kernels::matmul(q, kernels::transpose2d(k));
            const double inv = 1.0 / std::sqrt(static_cast<double>(ce));
            for (auto& vv : logits.data()) vv *= inv;
            aff = kernels::softmax(logits, 1);
        }
        Tensor v = kernels::matmul(xm, p.wv);
        attended = kernels::matmul(aff, v);
    }
    Tensor proj = kernels::matmul(attended, p.w_out);

    Tensor out = x;
    for (std::size_t f = 0; f < T; ++f)
        for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t qq = 0; qq < HW; ++qq)
                out[(f * C + ch) * HW + qq] += proj[(f * HW + qq) * C + ch];
    return out;
}

}  // namespace fsta
