#pragma once

#include "fsta/tensor.hpp"

namespace fsta {

struct SynthConfig {
    std::uint64_t seed = 0;
    std::size_t F = 12;           ///< number of frames
    std::size_t H = 64, W = 64;
    std::size_t num_objects = 6;
    double vmax = 3.0;            ///< max speed, px/frame
    std::size_t E = 9;            ///< exposure samples per frame

    void validate() const {
        if (F < 1 || H < 1 || W < 1 || E < 1)
            throw std::invalid_argument("SynthConfig: F, H, W, E must be >= 1");
        if (vmax < 0.0) throw std::invalid_argument("SynthConfig: vmax must be >= 0");
    }
};

struct SyntheticSequence {
    Tensor sharp;    ///< [F,1,H,W], values in [0,1]
    Tensor blurred;  ///< [F,1,H,W]
    SynthConfig meta;
};

namespace detail {

struct MovingObject {
    bool is_disc;
    double cx, cy;    ///< center at time 0
    double vx, vy;    ///< px per frame
    double size;      ///< radius (disc) or half-extent (rect)
    double intensity;
};

/// Anti-aliased render of all objects at continuous time tau.
inline void render_scene(const std::vector<MovingObject>& objs, double tau, std::size_t H,
                         std::size_t W, double* out) {
    std::fill(out, out + H * W, 0.0);
    for (const auto& o : objs) {
        const double cx = o.cx + o.vx * tau;
        const double cy = o.cy + o.vy * tau;
        const double s = o.size;
        const long y0 = std::max(0L, static_cast<long>(std::floor(cy - s - 1.0)));
        const long y1 = std::min(static_cast<long>(H) - 1, static_cast<long>(std::ceil(cy + s + 1.0)));
        const long x0 = std::max(0L, static_cast<long>(std::floor(cx - s - 1.0)));
        const long x1 = std::min(static_cast<long>(W) - 1, static_cast<long>(std::ceil(cx + s + 1.0)));
        for (long y = y0; y <= y1; ++y)
            for (long x = x0; x <= x1; ++x) {
                double cov;
                if (o.is_disc) {
                    const double dx = static_cast<double>(x) - cx;
                    const double dy = static_cast<double>(y) - cy;
                    cov = std::clamp(s - std::sqrt(dx * dx + dy * dy) + 0.5, 0.0, 1.0);
                } else {
                    const double ox = std::clamp(std::min(x + 0.5, cx + s) - std::max(x - 0.5, cx - s), 0.0, 1.0);
                    const double oy = std::clamp(std::min(y + 0.5, cy + s) - std::max(y - 0.5, cy - s), 0.0, 1.0);
                    cov = ox * oy;
                }
                double& v = out[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
                v = std::min(1.0, v + o.intensity * cov);
            }
    }
}

}  // namespace detail

/// Renders moving anti-aliased rectangles and discs with random linear
/// motion. The sharp frame is the exposure-center render; the blurred frame
/// is the mean over E renders spanning one frame interval of exposure.
inline SyntheticSequence generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);

    std::vector<detail::MovingObject> objs;
    objs.reserve(cfg.num_objects);
    for (std::size_t i = 0; i < cfg.num_objects; ++i) {
        detail::MovingObject o;
        o.is_disc = (i % 2 == 0);
        o.cx = rng.uniform(0.0, static_cast<double>(cfg.W));
        o.cy = rng.uniform(0.0, static_cast<double>(cfg.H));
        const double angle = rng.uniform(0.0, 6.283185307179586);
        const double speed = cfg.vmax * rng.uniform(0.25, 1.0);
        o.vx = speed * std::cos(angle);
        o.vy = speed * std::sin(angle);
        o.size = rng.uniform(static_cast<double>(cfg.H) / 12.0, static_cast<double>(cfg.H) / 5.0);
        o.intensity = rng.uniform(0.3, 1.0);
        objs.push_back(o);
    }

    SyntheticSequence seq;
    seq.meta = cfg;
    seq.sharp = Tensor({cfg.F, 1, cfg.H, cfg.W});
    seq.blurred = Tensor({cfg.F, 1, cfg.H, cfg.W});

    const std::size_t px = cfg.H * cfg.W;
    std::vector<double> sample(px);
    for (std::size_t f = 0; f < cfg.F; ++f) {
        double* sharp = seq.sharp.ptr() + f * px;
        double* blur = seq.blurred.ptr() + f * px;
        detail::render_scene(objs, static_cast<double>(f), cfg.H, cfg.W, sharp);

        // blurred = first sample + mean of deltas, so identical samples
        // (E=1 or a static scene) reproduce the sharp frame bit-exactly
        const double tau0 = static_cast<double>(f) + (0.5 / static_cast<double>(cfg.E)) - 0.5;
        detail::render_scene(objs, tau0, cfg.H, cfg.W, blur);
        if (cfg.E > 1) {
            std::vector<double> delta(px, 0.0);
            for (std::size_t e = 1; e < cfg.E; ++e) {
                const double tau = static_cast<double>(f) +
                                   ((e + 0.5) / static_cast<double>(cfg.E)) - 0.5;
                detail::render_scene(objs, tau, cfg.H, cfg.W, sample.data());
                for (std::size_t i = 0; i < px; ++i) delta[i] += sample[i] - blur[i];
            }
            for (std::size_t i = 0; i < px; ++i)
                blur[i] = std::clamp(blur[i] + delta[i] / static_cast<double>(cfg.E), 0.0, 1.0);
        }
        if (cfg.E == 1) std::copy_n(sharp, px, blur);  // single sample is the center render
    }
    return seq;
}

/// T consecutive blurred frames with frame `center_index` at the reference
/// slot floor(T/2). Throws if the window leaves [0, F).
inline Tensor window(const SyntheticSequence& seq, std::size_t center_index, std::size_t T) {
    const std::size_t F = seq.blurred.extent(0);
    const std::size_t ref = T / 2;
    if (center_index < ref || center_index - ref + T > F)
        throw std::out_of_range("window: frames [" + std::to_string(static_cast<long>(center_index) -
                                                                     static_cast<long>(ref)) +
                                ", +" + std::to_string(T) + ") not inside [0," + std::to_string(F) + ")");
    const std::size_t start = center_index - ref;
    const std::size_t H = seq.blurred.extent(2), W = seq.blurred.extent(3);
    Tensor out({T, 1, H, W});
    std::copy_n(seq.blurred.ptr() + start * H * W, T * H * W, out.ptr());
    return out;
}

/// Binary P5 PGM, maxval 255, for quick visual inspection.
inline void write_pgm(const std::string& path, const double* img, std::size_t H, std::size_t W) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "P5\n" << W << " " << H << "\n255\n";
    for (std::size_t i = 0; i < H * W; ++i) {
        const double v = std::clamp(img[i], 0.0, 1.0);
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

}  // namespace fsta
