#pragma once

#include "fsta/autograd.hpp"

namespace fsta {

/// Flattening order of the (m, n) combination axis, shared by the temporal
/// squeeze, the pixel distribution and the affinity oracle.
inline constexpr std::size_t combo_index(std::size_t m, std::size_t n, std::size_t N) {
    return m * N + n;
}

struct FstaConfig {
    static constexpr std::size_t kDefaultRef = static_cast<std::size_t>(-1);

    std::size_t T = 5;   ///< frame-window length
    std::size_t M = 4;   ///< spatial attention maps per frame
    std::size_t N = 4;   ///< temporal attention maps
    std::size_t C = 1;   ///< feature channels
    std::size_t H = 0;
    std::size_t W = 0;
    std::size_t k_s = 3;
    std::size_t k_t = 3;
    std::size_t k_p = 3;
    std::size_t ref_index = kDefaultRef;  ///< current frame; defaults to floor(T/2)

    std::size_t hw() const { return H * W; }
    std::size_t mn() const { return M * N; }
    std::size_t ref() const { return ref_index == kDefaultRef ? T / 2 : ref_index; }

    void validate() const {
        if (T < 1 || M < 1 || N < 1 || C < 1 || H < 1 || W < 1)
            throw std::invalid_argument("FstaConfig: all of T,M,N,C,H,W must be >= 1");
        if (k_s % 2 == 0 || k_t % 2 == 0 || k_p % 2 == 0)
            throw std::invalid_argument("FstaConfig: kernel sizes must be odd");
        if (ref() >= T) throw std::invalid_argument("FstaConfig: ref_index out of window");
    }
};

struct FstaParams {
    Tensor w_s, b_s;  ///< f_s: [M,C,k_s,k_s], [M]
    Tensor w_t, b_t;  ///< f_t: [N,1,k_t], [N]
    Tensor w_p, b_p;  ///< f_p: [M*N,C,k_p,k_p], [M*N]

    static FstaParams zeros(const FstaConfig& c) {
        FstaParams p;
        p.w_s = Tensor({c.M, c.C, c.k_s, c.k_s});
        p.b_s = Tensor({c.M});
        p.w_t = Tensor({c.N, 1, c.k_t});
        p.b_t = Tensor({c.N});
        p.w_p = Tensor({c.mn(), c.C, c.k_p, c.k_p});
        p.b_p = Tensor({c.mn()});
        return p;
    }

    /// Fan-in-scaled uniform weights (+-sqrt(1/fan_in)), zero biases.
    static FstaParams init(const FstaConfig& c, Rng& rng) {
        FstaParams p = zeros(c);
        auto fill = [&rng](Tensor& w, std::size_t fan_in) {
            const double lim = std::sqrt(1.0 / static_cast<double>(fan_in));
            for (auto& v : w.data()) v = rng.uniform(-lim, lim);
        };
        fill(p.w_s, c.C * c.k_s * c.k_s);
        fill(p.w_t, c.k_t);
        fill(p.w_p, c.C * c.k_p * c.k_p);
        return p;
    }

    NamedTensors named() const {
        return {{"fsta.w_s", w_s}, {"fsta.b_s", b_s}, {"fsta.w_t", w_t},
                {"fsta.b_t", b_t}, {"fsta.w_p", w_p}, {"fsta.b_p", b_p}};
    }

    static FstaParams from_named(const NamedTensors& entries) {
        FstaParams p;
        for (const auto& [name, t] : entries) {
            if (name == "fsta.w_s") p.w_s = t;
            else if (name == "fsta.b_s") p.b_s = t;
            else if (name == "fsta.w_t") p.w_t = t;
            else if (name == "fsta.b_t") p.b_t = t;
            else if (name == "fsta.w_p") p.w_p = t;
            else if (name == "fsta.b_p") p.b_p = t;
        }
        if (p.w_s.size() == 0) throw std::runtime_error("checkpoint: missing fsta parameters");
        return p;
    }
};

/// Parameters lifted onto a tape.
struct FstaVars {
    Var w_s, b_s, w_t, b_t, w_p, b_p;

    static FstaVars leaves(Tape& t, const FstaParams& p, bool requires_grad = true) {
        return {t.leaf(p.w_s, requires_grad), t.leaf(p.b_s, requires_grad),
                t.leaf(p.w_t, requires_grad), t.leaf(p.b_t, requires_grad),
                t.leaf(p.w_p, requires_grad), t.leaf(p.b_p, requires_grad)};
    }
};

namespace detail {

inline void check_fsta_input(const Shape& s, const FstaConfig& c, const char* what) {
    if (s != Shape{c.T, c.C, c.H, c.W})
        throw std::invalid_argument(std::string(what) + ": input shape " + shape_str(s) +
                                    " does not match config [T,C,H,W]=" +
                                    shape_str({c.T, c.C, c.H, c.W}));
}

}  // namespace detail

/// A_s = softmax_HW(f_s(x)), per frame: [T,C,H,W] -> [T,M,HW].
inline Var spatial_attention(const Var& x, const FstaVars& p, const FstaConfig& c) {
    detail::check_fsta_input(x.shape(), c, "spatial_attention");
    std::vector<Var> per_frame;
    per_frame.reserve(c.T);
    for (std::size_t t = 0; t < c.T; ++t) {
        Var logits = conv2d(select0(x, t), p.w_s, p.b_s);      // [M,H,W]
        per_frame.push_back(reshape(logits, {c.M, c.hw()}));   // [M,HW]
    }
    return softmax(stack0(per_frame), 2);
}

/// G_s[c,m,t] = sum_hw A_s[t,m,hw] * x[t,c,hw]: attention-weighted spatial sum.
inline Var spatial_squeeze(const Var& x, const Var& A_s) {
    Tape& tp = detail::same_tape(x, A_s);
    const Shape& xs = x.shape();
    const Shape& as = A_s.shape();
    if (xs.size() != 4 || as.size() != 3 || xs[0] != as[0] || xs[2] * xs[3] != as[2])
        throw std::invalid_argument("spatial_squeeze: shapes " + shape_str(xs) + " / " +
                                    shape_str(as) + " incompatible");
    const std::size_t T = xs[0], C = xs[1], HW = xs[2] * xs[3], M = as[1];
    Tensor out({C, M, T});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t m = 0; m < M; ++m) {
            const double* a = A_s.val().ptr() + (t * M + m) * HW;
            for (std::size_t ch = 0; ch < C; ++ch) {
                const double* xv = x.val().ptr() + (t * C + ch) * HW;
                double acc = 0.0;
                for (std::size_t q = 0; q < HW; ++q) acc += a[q] * xv[q];
                out[(ch * M + m) * T + t] = acc;
            }
        }
    const int ix = x.id, ia = A_s.id;
    const bool rg = tp.needs_grad(ix) || tp.needs_grad(ia);
    return detail::emit(tp, std::move(out), rg, [ix, ia, T, C, HW, M](int id) {
        return [id, ix, ia, T, C, HW, M](Tape& tpp) {
            const Tensor& g = tpp.grad(id);
            const Tensor& xv = tpp.value(ix);
            const Tensor& av = tpp.value(ia);
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t m = 0; m < M; ++m)
                    for (std::size_t ch = 0; ch < C; ++ch) {
                        const double gv = g[(ch * M + m) * T + t];
                        if (gv == 0.0) continue;
                        if (tpp.needs_grad(ix)) {
                            double* gx = tpp.grad(ix).ptr() + (t * C + ch) * HW;
                            const double* a = av.ptr() + (t * M + m) * HW;
                            for (std::size_t q = 0; q < HW; ++q) gx[q] += gv * a[q];
                        }
                        if (tpp.needs_grad(ia)) {
                            double* ga = tpp.grad(ia).ptr() + (t * M + m) * HW;
                            const double* xr = xv.ptr() + (t * C + ch) * HW;
                            for (std::size_t q = 0; q < HW; ++q) ga[q] += gv * xr[q];
                        }
                    }
        };
    });
}

/// x' is the per-frame mean over (C,H,W); A_t = softmax_T(f_t(x')).
/// Returns (x_prime [1,T], A_t [N,T]).
inline std::pair<Var, Var> temporal_attention(const Var& x, const FstaVars& p,
                                              const FstaConfig& c) {
    detail::check_fsta_input(x.shape(), c, "temporal_attention");
    Var x_prime = frame_mean(x);                    // [1,T]
    Var logits = conv1d(x_prime, p.w_t, p.b_t);     // [N,T]
    return {x_prime, softmax(logits, 1)};
}

/// G_st = G_s A_t^Tr per channel, flattened (m,n) -> m*N + n.
/// [C,M,T] x [N,T] -> [C,M*N].
inline Var temporal_squeeze(const Var& G_s, const Var& A_t) {
    Tape& tp = detail::same_tape(G_s, A_t);
    const Shape& gs = G_s.shape();
    const Shape& at = A_t.shape();
    if (gs.size() != 3 || at.size() != 2 || gs[2] != at[1])
        throw std::invalid_argument("temporal_squeeze: shapes " + shape_str(gs) + " / " +
                                    shape_str(at) + " incompatible");
    const std::size_t C = gs[0], M = gs[1], T = gs[2], N = at[0];
    Tensor out({C, M * N});
    for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t n = 0; n < N; ++n) {
                double acc = 0.0;
                for (std::size_t t = 0; t < T; ++t)
                    acc += G_s.val()[(ch * M + m) * T + t] * A_t.val()[n * T + t];
                out[ch * M * N + combo_index(m, n, N)] = acc;
            }
    const int ig = G_s.id, ia = A_t.id;
    const bool rg = tp.needs_grad(ig) || tp.needs_grad(ia);
    return detail::emit(tp, std::move(out), rg, [ig, ia, C, M, T, N](int id) {
        return [id, ig, ia, C, M, T, N](Tape& tpp) {
            const Tensor& g = tpp.grad(id);
            const Tensor& gv = tpp.value(ig);
            const Tensor& av = tpp.value(ia);
            for (std::size_t ch = 0; ch < C; ++ch)
                for (std::size_t m = 0; m < M; ++m)
                    for (std::size_t n = 0; n < N; ++n) {
                        const double go = g[ch * M * N + combo_index(m, n, N)];
                        if (go == 0.0) continue;
                        for (std::size_t t = 0; t < T; ++t) {
                            if (tpp.needs_grad(ig))
                                tpp.grad(ig)[(ch * M + m) * T + t] += go * av[n * T + t];
                            if (tpp.needs_grad(ia))
                                tpp.grad(ia)[n * T + t] += go * gv[(ch * M + m) * T + t];
                        }
                    }
        };
    });
}

/// A_p = softmax over the M*N combination axis of f_p(x^R): [C,H,W] -> [MN,HW].
inline Var pixel_distribution(const Var& x_ref, const FstaVars& p, const FstaConfig& c) {
    if (x_ref.shape() != Shape{c.C, c.H, c.W})
        throw std::invalid_argument("pixel_distribution: reference frame shape " +
                                    shape_str(x_ref.shape()) + " does not match config");
    Var logits = conv2d(x_ref, p.w_p, p.b_p);             // [MN,H,W]
    return softmax(reshape(logits, {c.mn(), c.hw()}), 0);
}

/// y^R = G_st A_p: [C,MN] x [MN,HW] -> [C,HW].
inline Var distribute(const Var& G_st, const Var& A_p) { return matmul(G_st, A_p); }

struct FstaVarInter {
    Var A_s;      ///< [T,M,HW]
    Var G_s;      ///< [C,M,T]
    Var x_prime;  ///< [1,T]
    Var A_t;      ///< [N,T]
    Var G_st;     ///< [C,M*N]
    Var A_p;      ///< [M*N,HW]
    Var y_ref;    ///< [C,HW]
    Var y;        ///< [C,H,W] — y_ref reshaped
};

/// Full factorized forward pass: spatial squeeze, temporal squeeze,
/// pixelwise distribution, with every intermediate retained.
inline FstaVarInter fsta_forward(const Var& x, const FstaVars& p, const FstaConfig& c) {
    c.validate();
    detail::check_fsta_input(x.shape(), c, "fsta_forward");
    FstaVarInter r;
    r.A_s = spatial_attention(x, p, c);
    r.G_s = spatial_squeeze(x, r.A_s);
    auto [xp, at] = temporal_attention(x, p, c);
    r.x_prime = xp;
    r.A_t = at;
    r.G_st = temporal_squeeze(r.G_s, r.A_t);
    r.A_p = pixel_distribution(select0(x, c.ref()), p, c);
    r.y_ref = distribute(r.G_st, r.A_p);
    r.y = reshape(r.y_ref, {c.C, c.H, c.W});
    return r;
}

struct FstaIntermediates {
    Tensor A_s, G_s, x_prime, A_t, G_st, A_p, y_ref;
    Tensor y;  ///< [C,H,W]
};

/// Convenience wrapper on a local tape (no gradients kept).
inline FstaIntermediates fsta_forward(const Tensor& x, const FstaParams& p, const FstaConfig& c) {
    Tape tape;
    Var xv = tape.leaf(x, false);
    FstaVars pv = FstaVars::leaves(tape, p, false);
    FstaVarInter r = fsta_forward(xv, pv, c);
    FstaIntermediates out{r.A_s.val(), r.G_s.val(), r.x_prime.val(), r.A_t.val(),
                          r.G_st.val(), r.A_p.val(), r.y_ref.val(), r.y.val()};
    out.y.require_finite("fsta_forward");
    return out;
}

/// Tape-free forward pass for memory instrumentation: computes y^R only,
/// releasing intermediates as soon as they are consumed.
inline Tensor fsta_forward_lean(const Tensor& x, const FstaParams& p, const FstaConfig& c) {
    c.validate();
    detail::check_fsta_input(x.shape(), c, "fsta_forward_lean");
    const std::size_t HW = c.hw();

    Tensor A_s({c.T, c.M, HW});
    for (std::size_t t = 0; t < c.T; ++t) {
        Tensor frame({c.C, c.H, c.W});
        std::copy_n(x.ptr() + t * c.C * HW, c.C * HW, frame.ptr());
        Tensor logits = kernels::conv2d(frame, p.w_s, p.b_s);
        Tensor soft = kernels::softmax(Tensor({c.M, HW}, logits.data()), 1);
        std::copy_n(soft.ptr(), c.M * HW, A_s.ptr() + t * c.M * HW);
    }

    Tensor G_s({c.C, c.M, c.T});
    for (std::size_t t = 0; t < c.T; ++t)
        for (std::size_t m = 0; m < c.M; ++m)
            for (std::size_t ch = 0; ch < c.C; ++ch) {
                const double* a = A_s.ptr() + (t * c.M + m) * HW;
                const double* xv = x.ptr() + (t * c.C + ch) * HW;
                double acc = 0.0;
                for (std::size_t q = 0; q < HW; ++q) acc += a[q] * xv[q];
                G_s[(ch * c.M + m) * c.T + t] = acc;
            }
    A_s = Tensor{};  // release

    Tensor A_t;
    {
        Tensor x_prime({1, c.T});
        const std::size_t block = c.C * HW;
        for (std::size_t t = 0; t < c.T; ++t) {
            double acc = 0.0;
            const double* pv = x.ptr() + t * block;
            for (std::size_t i = 0; i < block; ++i) acc += pv[i];
            x_prime[t] = acc / static_cast<double>(block);
        }
        A_t = kernels::softmax(kernels::conv1d(x_prime, p.w_t, p.b_t), 1);
    }

    Tensor G_st({c.C, c.mn()});
    for (std::size_t ch = 0; ch < c.C; ++ch)
        for (std::size_t m = 0; m < c.M; ++m)
            for (std::size_t n = 0; n < c.N; ++n) {
                double acc = 0.0;
                for (std::size_t t = 0; t < c.T; ++t)
                    acc += G_s[(ch * c.M + m) * c.T + t] * A_t[n * c.T + t];
                G_st[ch * c.mn() + combo_index(m, n, c.N)] = acc;
            }
    G_s = Tensor{};

    Tensor A_p;
    {
        Tensor ref({c.C, c.H, c.W});
        std::copy_n(x.ptr() + c.ref() * c.C * HW, c.C * HW, ref.ptr());
        Tensor logits = kernels::conv2d(ref, p.w_p, p.b_p);
        A_p = kernels::softmax(Tensor({c.mn(), HW}, logits.data()), 0);
    }

    Tensor y_ref = kernels::matmul(G_st, A_p);
    return Tensor({c.C, c.H, c.W}, y_ref.data());
}

}  // namespace fsta
