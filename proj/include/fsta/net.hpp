#pragma once

#include "fsta/cost.hpp"

namespace fsta {

enum class FusionMode { fsta, dense_nonlocal, average, single_frame };

inline const char* fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::fsta: return "fsta";
        case FusionMode::dense_nonlocal: return "dense_nonlocal";
        case FusionMode::average: return "average";
        case FusionMode::single_frame: return "single_frame";
    }
    return "?";
}

inline FusionMode fusion_mode_from(const std::string& s) {
    if (s == "fsta") return FusionMode::fsta;
    if (s == "dense_nonlocal") return FusionMode::dense_nonlocal;
    if (s == "average") return FusionMode::average;
    if (s == "single_frame") return FusionMode::single_frame;
    throw std::invalid_argument("unknown fusion mode: " + s);
}

/// Encoder-decoder restoration net: shared-weight per-frame encoder with
/// dense blocks, one fusion block at the bottleneck, decoder with skip
/// connections from the reference frame, global residual from the blurred
/// reference frame.
struct NetConfig {
    std::size_t base_channels = 16;
    std::size_t depth = 2;         ///< down/up levels; extents must divide 2^depth
    std::size_t growth = 8;        ///< channels added per dense-block layer
    std::size_t dense_layers = 3;
    std::size_t T = 5;
    FusionMode fusion = FusionMode::fsta;
    std::size_t fsta_M = 4, fsta_N = 4;
    std::size_t fsta_kernel = 3;

    std::size_t ref() const { return T / 2; }

    FstaConfig fsta_config(std::size_t h, std::size_t w) const {
        FstaConfig c;
        c.T = T;
        c.M = fsta_M;
        c.N = fsta_N;
        c.C = base_channels;
        c.H = h;
        c.W = w;
        c.k_s = c.k_t = c.k_p = fsta_kernel;
        return c;
    }

    void check_extents(std::size_t h, std::size_t w) const {
        const std::size_t div = std::size_t{1} << depth;
        if (h % div != 0 || w % div != 0)
            throw std::invalid_argument("NetConfig: extents " + std::to_string(h) + "x" +
                                        std::to_string(w) + " not divisible by 2^depth=" +
                                        std::to_string(div));
    }
};

/// Ordered named parameter set; the order fixes checkpoint layout and the
/// optimizer state alignment.
class ParamStore {
public:
    Tensor& add(std::string name, Tensor t) {
        items_.emplace_back(std::move(name), std::move(t));
        return items_.back().second;
    }
    Tensor& at(const std::string& name) {
        for (auto& [n, t] : items_)
            if (n == name) return t;
        throw std::out_of_range("ParamStore: no parameter named " + name);
    }
    const Tensor& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return true;
        return false;
    }
    std::size_t size() const { return items_.size(); }
    NamedTensors& items() { return items_; }
    const NamedTensors& items() const { return items_; }

    void save(const std::string& path) const { save_archive_file(path, items_); }
    static ParamStore load(const std::string& path) {
        ParamStore s;
        s.items_ = load_archive_file(path);
        return s;
    }

private:
    NamedTensors items_;
};

namespace detail {

inline Tensor conv_init(Rng& rng, std::size_t cout, std::size_t cin, std::size_t k) {
    Tensor w({cout, cin, k, k});
    const double lim = std::sqrt(1.0 / static_cast<double>(cin * k * k));
    for (auto& v : w.data()) v = rng.uniform(-lim, lim);
    return w;
}

}  // namespace detail

inline ParamStore init_net_params(const NetConfig& cfg, Rng& rng, bool zero_init = false) {
    ParamStore p;
    const std::size_t B = cfg.base_channels, g = cfg.growth, L = cfg.dense_layers;
    auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
        p.add(name + ".w", zero_init ? Tensor({cout, cin, k, k}) : detail::conv_init(rng, cout, cin, k));
        p.add(name + ".b", Tensor({cout}));
    };
    conv("enc.stem", B, 1, 3);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        conv("enc.down" + std::to_string(l), B, B, 3);
        for (std::size_t j = 0; j < L; ++j)
            conv("enc.db" + std::to_string(l) + ".l" + std::to_string(j), g, B + j * g, 3);
        conv("enc.db" + std::to_string(l) + ".tr", B, B + L * g, 1);
    }
    if (cfg.fusion == FusionMode::fsta) {
        FstaConfig fc = cfg.fsta_config(16, 16);  // extents irrelevant for parameter shapes
        FstaParams fp = zero_init ? FstaParams::zeros(fc) : FstaParams::init(fc, rng);
        for (auto& [name, t] : fp.named()) p.add(name, t);
        // learned 3x3 merge over [reference features | temporal mean | y].
        // Initialized to select the mean exactly, so a fresh net fuses like
        // the average baseline and training opens the other two branches;
        // the small identity on the y block lets the attention parameters
        // receive gradient from the first step. The spatial taps let the
        // merge compensate small inter-frame misalignment at bottleneck
        // scale instead of averaging it away.
        Tensor mw({B, 3 * B, 3, 3});
        if (!zero_init)
            for (std::size_t o = 0; o < B; ++o) {
                mw[(o * 3 * B + B + o) * 9 + 4] = 1.0;
                mw[(o * 3 * B + 2 * B + o) * 9 + 4] = 0.1;
            }
        p.add("fsta.merge.w", std::move(mw));
        p.add("fsta.merge.b", Tensor({B}));
    } else if (cfg.fusion == FusionMode::dense_nonlocal) {
        DenseNonLocalParams np =
            zero_init ? DenseNonLocalParams::zeros(B) : DenseNonLocalParams::init(B, rng);
        for (auto& [name, t] : np.named()) p.add(name, t);
    }
    for (std::size_t l = cfg.depth; l-- > 0;) conv("dec.up" + std::to_string(l), B, B, 3);
    // zero output conv: the global residual makes the fresh net an identity map
    p.add("dec.out.w", Tensor({1, B, 3, 3}));
    p.add("dec.out.b", Tensor({1}));
    return p;
}

/// Parameters lifted onto a tape, looked up by checkpoint name.
struct VarStore {
    const ParamStore* store = nullptr;
    std::vector<Var> vars;

    static VarStore leaves(Tape& tape, const ParamStore& params, bool requires_grad = true) {
        VarStore vs;
        vs.store = &params;
        vs.vars.reserve(params.size());
        for (const auto& [name, t] : params.items()) vs.vars.push_back(tape.leaf(t, requires_grad));
        return vs;
    }

    Var at(const std::string& name) const {
        const auto& items = store->items();
        for (std::size_t i = 0; i < items.size(); ++i)
            if (items[i].first == name) return vars[i];
        throw std::out_of_range("VarStore: no parameter named " + name);
    }
};

namespace detail {

inline Var dense_block(Var x, const VarStore& vs, const NetConfig& cfg, const std::string& prefix) {
    std::vector<Var> feats{x};
    Var cur = x;
    for (std::size_t j = 0; j < cfg.dense_layers; ++j) {
        const std::string name = prefix + ".l" + std::to_string(j);
        Var out = relu(conv2d(cur, vs.at(name + ".w"), vs.at(name + ".b")));
        feats.push_back(out);
        cur = concat0(feats);
    }
    return relu(conv2d(cur, vs.at(prefix + ".tr.w"), vs.at(prefix + ".tr.b")));
}

struct EncodedFrame {
    Var bottleneck;
    std::vector<Var> skips;  ///< one per level, at the pre-downsample resolution
};

inline EncodedFrame encode_frame(Var frame, const VarStore& vs, const NetConfig& cfg) {
    EncodedFrame e;
    Var x = relu(conv2d(frame, vs.at("enc.stem.w"), vs.at("enc.stem.b")));
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        e.skips.push_back(x);
        const std::string dn = "enc.down" + std::to_string(l);
        x = avgpool2(relu(conv2d(x, vs.at(dn + ".w"), vs.at(dn + ".b"))));
        x = dense_block(x, vs, cfg, "enc.db" + std::to_string(l));
    }
    e.bottleneck = x;
    return e;
}

}  // namespace detail

/// Combine T bottleneck feature maps [C,h,w] into one, per fusion mode.
inline Var fuse(const std::vector<Var>& features, FusionMode mode, const VarStore& vs,
                const NetConfig& cfg) {
    const std::size_t T = features.size();
    const std::size_t ref = cfg.ref();
    switch (mode) {
        case FusionMode::single_frame:
            return features[ref];
        case FusionMode::average: {
            Var acc = features[0];
            for (std::size_t t = 1; t < T; ++t) acc = add(acc, features[t]);
            return scale(acc, 1.0 / static_cast<double>(T));
        }
        case FusionMode::fsta: {
            Var x = stack0(features);
            const Shape s = x.shape();
            FstaConfig fc = cfg.fsta_config(s[2], s[3]);
            FstaVars fv{vs.at("fsta.w_s"), vs.at("fsta.b_s"), vs.at("fsta.w_t"),
                        vs.at("fsta.b_t"), vs.at("fsta.w_p"), vs.at("fsta.b_p")};
            FstaVarInter inter = fsta_forward(x, fv, fc);
            // learned 1x1 merge of reference features, temporal mean, and the
            // attention output; starts as the average baseline (see init)
            Var acc = features[0];
            for (std::size_t t = 1; t < T; ++t) acc = add(acc, features[t]);
            Var mean = scale(acc, 1.0 / static_cast<double>(T));
            Var cat = concat0({features[ref], mean, inter.y});
            return conv2d(cat, vs.at("fsta.merge.w"), vs.at("fsta.merge.b"));
        }
        case FusionMode::dense_nonlocal: {
            Var x = stack0(features);
            DenseNonLocalVars nv{vs.at("nl.wq"), vs.at("nl.wk"), vs.at("nl.wv"), vs.at("nl.w_out")};
            return select0(dense_nonlocal_forward(x, nv), ref);
        }
    }
    throw std::logic_error("fuse: unreachable");
}

/// window [T,1,H,W] -> restored [1,H,W]. The network predicts a correction
/// added to the blurred reference frame.
inline Var net_forward(Tape& tape, const Tensor& window, const VarStore& vs, const NetConfig& cfg) {
    if (window.rank() != 4 || window.extent(0) != cfg.T || window.extent(1) != 1)
        throw std::invalid_argument("net_forward: window [T,1,H,W] with T=" + std::to_string(cfg.T) +
                                    " required, got " + shape_str(window.shape()));
    cfg.check_extents(window.extent(2), window.extent(3));

    Var win = tape.constant(window);
    std::vector<Var> bottlenecks;
    bottlenecks.reserve(cfg.T);
    std::vector<Var> ref_skips;
    for (std::size_t t = 0; t < cfg.T; ++t) {
        detail::EncodedFrame e = detail::encode_frame(select0(win, t), vs, cfg);
        bottlenecks.push_back(e.bottleneck);
        if (t == cfg.ref()) ref_skips = e.skips;
    }

    Var cur = fuse(bottlenecks, cfg.fusion, vs, cfg);
    for (std::size_t l = cfg.depth; l-- > 0;) {
        const std::string up = "dec.up" + std::to_string(l);
        cur = relu(conv2d(upsample2(cur), vs.at(up + ".w"), vs.at(up + ".b")));
        cur = add(cur, ref_skips[l]);
    }
    Var correction = conv2d(cur, vs.at("dec.out.w"), vs.at("dec.out.b"));
    return add(correction, select0(win, cfg.ref()));
}

/// Inference convenience: forward on a throwaway tape without gradients.
inline Tensor net_restore(const Tensor& window, const ParamStore& params, const NetConfig& cfg) {
    Tape tape;
    VarStore vs = VarStore::leaves(tape, params, false);
    return net_forward(tape, window, vs, cfg).val();
}

}  // namespace fsta
