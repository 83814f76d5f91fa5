#pragma once

#include <cstdlib>
#include <thread>

#include "fsta/metrics.hpp"
#include "fsta/net.hpp"
#include "fsta/synth.hpp"

namespace fsta {

/// Worker count for batch-parallel gradient evaluation. FSTA_THREADS caps it;
/// results are reduced in batch order so the count never changes the numbers.
inline std::size_t num_threads() {
    if (const char* env = std::getenv("FSTA_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : hc;
}

enum class LossKind { l2, charbonnier };

struct TrainConfig {
    std::size_t patch = 64;
    std::size_t batch = 4;
    double lr = 1e-4;
    std::size_t lr_halve_every = 0;  ///< 0: derive from 200 passes over the window list
    std::size_t steps = 2000;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::charbonnier;
    double charbonnier_eps = 1e-3;

    void validate(const NetConfig& net) const {
        if (lr < 0.0) throw std::invalid_argument("TrainConfig: lr must be >= 0");
        net.check_extents(patch, patch);
    }
};

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t t = 0;
    std::vector<Tensor> m, v;

    void init(const ParamStore& params) {
        m.clear();
        v.clear();
        for (const auto& [name, p] : params.items()) {
            m.push_back(Tensor(p.shape()));
            v.push_back(Tensor(p.shape()));
        }
    }

    void step(ParamStore& params, const std::vector<Tensor>& grads, double lr) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < grads.size(); ++i) {
            Tensor& p = params.items()[i].second;
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double g = grads[i][j];
                m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
                v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
                p[j] -= lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps);
            }
        }
    }
};

namespace detail {

struct WindowRef {
    std::size_t seq;
    std::size_t center;
};

struct Sample {
    Tensor window;  ///< [T,1,patch,patch] blurred crop
    Tensor target;  ///< [1,patch,patch] sharp reference crop
};

inline Sample crop_sample(const SyntheticSequence& seq, std::size_t center, std::size_t T,
                          std::size_t patch, std::size_t oy, std::size_t ox) {
    const std::size_t H = seq.blurred.extent(2), W = seq.blurred.extent(3);
    const std::size_t start = center - T / 2;
    Sample s;
    s.window = Tensor({T, 1, patch, patch});
    for (std::size_t t = 0; t < T; ++t) {
        const double* src = seq.blurred.ptr() + (start + t) * H * W;
        double* dst = s.window.ptr() + t * patch * patch;
        for (std::size_t y = 0; y < patch; ++y)
            std::copy_n(src + (oy + y) * W + ox, patch, dst + y * patch);
    }
    s.target = Tensor({1, patch, patch});
    const double* src = seq.sharp.ptr() + center * H * W;
    for (std::size_t y = 0; y < patch; ++y)
        std::copy_n(src + (oy + y) * W + ox, patch, s.target.ptr() + y * patch);
    return s;
}

/// Forward + backward for one window on its own tape. Returns the loss and
/// appends this sample's parameter gradients.
inline double sample_grads(const Sample& s, const ParamStore& params, const NetConfig& net_cfg,
                           const TrainConfig& tc, std::vector<Tensor>& grads_out) {
    Tape tape;
    VarStore vs = VarStore::leaves(tape, params, true);
    Var restored = net_forward(tape, s.window, vs, net_cfg);
    Var target = tape.constant(s.target);
    Var loss = tc.loss == LossKind::charbonnier
                   ? charbonnier_loss(restored, target, tc.charbonnier_eps)
                   : l2_loss(restored, target);
    tape.backward(loss);
    grads_out.clear();
    grads_out.reserve(vs.vars.size());
    for (const Var& v : vs.vars) grads_out.push_back(v.grad());
    return loss.val()[0];
}

}  // namespace detail

struct TrainResult {
    ParamStore params;
    std::vector<double> loss_curve;  ///< mean batch loss per step
    std::vector<double> lr_curve;
};

/// Deterministic ADAM training on random crops/windows from a seeded stream.
inline TrainResult train(const NetConfig& net_cfg, const TrainConfig& tc,
                         const std::vector<SyntheticSequence>& data) {
    tc.validate(net_cfg);
    if (data.empty()) throw std::invalid_argument("train: no data");

    std::vector<detail::WindowRef> windows;
    for (std::size_t si = 0; si < data.size(); ++si) {
        const std::size_t F = data[si].blurred.extent(0);
        const std::size_t ref = net_cfg.T / 2;
        if (F < net_cfg.T)
            throw std::invalid_argument("train: sequence shorter than the frame window");
        if (data[si].blurred.extent(2) < tc.patch || data[si].blurred.extent(3) < tc.patch)
            throw std::invalid_argument("train: frames smaller than the training patch");
        for (std::size_t c = ref; c + (net_cfg.T - 1 - ref) < F; ++c) windows.push_back({si, c});
    }

    Rng init_rng(tc.seed);
    TrainResult result;
    result.params = init_net_params(net_cfg, init_rng);
    AdamState adam;
    adam.init(result.params);

    std::size_t halve_every = tc.lr_halve_every;
    if (halve_every == 0) {
        // one "epoch" is one pass over the window list; halve after 200 of them
        halve_every = std::max<std::size_t>(1, 200 * windows.size() / std::max<std::size_t>(1, tc.batch));
    }

    Rng sample_rng(tc.seed + 0x9e3779b97f4a7c15ULL);
    const std::size_t workers = std::min(num_threads(), tc.batch);

    for (std::size_t step = 0; step < tc.steps; ++step) {
        const double lr = tc.lr * std::pow(0.5, static_cast<double>(step / halve_every));

        std::vector<detail::Sample> batch;
        batch.reserve(tc.batch);
        for (std::size_t b = 0; b < tc.batch; ++b) {
            const auto& wref = windows[sample_rng.index(windows.size())];
            const std::size_t H = data[wref.seq].blurred.extent(2);
            const std::size_t W = data[wref.seq].blurred.extent(3);
            const std::size_t oy = H == tc.patch ? 0 : sample_rng.index(H - tc.patch + 1);
            const std::size_t ox = W == tc.patch ? 0 : sample_rng.index(W - tc.patch + 1);
            batch.push_back(detail::crop_sample(data[wref.seq], wref.center, net_cfg.T, tc.patch,
                                                oy, ox));
        }

        std::vector<std::vector<Tensor>> grads(tc.batch);
        std::vector<double> losses(tc.batch, 0.0);
        auto work = [&](std::size_t begin, std::size_t end) {
            for (std::size_t b = begin; b < end; ++b)
                losses[b] = detail::sample_grads(batch[b], result.params, net_cfg, tc, grads[b]);
        };
        if (workers <= 1) {
            work(0, tc.batch);
        } else {
            std::vector<std::thread> pool;
            const std::size_t per = (tc.batch + workers - 1) / workers;
            for (std::size_t w = 0; w < workers; ++w) {
                const std::size_t begin = w * per, end = std::min(tc.batch, begin + per);
                if (begin < end) pool.emplace_back(work, begin, end);
            }
            for (auto& th : pool) th.join();
        }

        // serial reduction in batch order keeps the update deterministic
        std::vector<Tensor> avg = std::move(grads[0]);
        for (std::size_t b = 1; b < tc.batch; ++b)
            for (std::size_t i = 0; i < avg.size(); ++i)
                for (std::size_t j = 0; j < avg[i].size(); ++j) avg[i][j] += grads[b][i][j];
        const double inv = 1.0 / static_cast<double>(tc.batch);
        for (auto& g : avg)
            for (auto& v : g.data()) v *= inv;

        double mean_loss = 0.0;
        for (double l : losses) mean_loss += l;
        mean_loss *= inv;
        if (!std::isfinite(mean_loss))
            throw std::runtime_error("train: loss diverged to non-finite at step " +
                                     std::to_string(step));

        adam.step(result.params, avg, lr);
        result.loss_curve.push_back(mean_loss);
        result.lr_curve.push_back(lr);
    }
    return result;
}

struct SequenceEval {
    double psnr_in = 0.0, psnr_out = 0.0;
    double ssim_in = 0.0, ssim_out = 0.0;
    std::size_t frames = 0;
};

struct EvalReport {
    double psnr_in = 0.0, psnr_out = 0.0;
    double ssim_in = 0.0, ssim_out = 0.0;
    std::vector<SequenceEval> per_sequence;
};

/// Full-frame restoration over every frame with a complete window; frames
/// whose window would leave the sequence are skipped, not padded.
inline EvalReport evaluate(const ParamStore& params, const NetConfig& cfg,
                           const std::vector<SyntheticSequence>& data) {
    EvalReport report;
    double sum_pin = 0, sum_pout = 0, sum_sin = 0, sum_sout = 0;
    std::size_t total = 0;
    for (const auto& seq : data) {
        const std::size_t F = seq.blurred.extent(0);
        const std::size_t H = seq.blurred.extent(2), W = seq.blurred.extent(3);
        const std::size_t ref = cfg.T / 2;
        SequenceEval se;
        for (std::size_t c = ref; c + (cfg.T - 1 - ref) < F; ++c) {
            Tensor win = window(seq, c, cfg.T);
            Tensor restored = net_restore(win, params, cfg);
            Tensor sharp({1, H, W});
            std::copy_n(seq.sharp.ptr() + c * H * W, H * W, sharp.ptr());
            Tensor blurred({1, H, W});
            std::copy_n(seq.blurred.ptr() + c * H * W, H * W, blurred.ptr());

            se.psnr_in += psnr(blurred, sharp);
            se.psnr_out += psnr(restored, sharp);
            se.ssim_in += ssim(blurred, sharp);
            se.ssim_out += ssim(restored, sharp);
            ++se.frames;
        }
        if (se.frames > 0) {
            sum_pin += se.psnr_in;
            sum_pout += se.psnr_out;
            sum_sin += se.ssim_in;
            sum_sout += se.ssim_out;
            total += se.frames;
            const double inv = 1.0 / static_cast<double>(se.frames);
            se.psnr_in *= inv;
            se.psnr_out *= inv;
            se.ssim_in *= inv;
            se.ssim_out *= inv;
        }
        report.per_sequence.push_back(se);
    }
    if (total > 0) {
        const double inv = 1.0 / static_cast<double>(total);
        report.psnr_in = sum_pin * inv;
        report.psnr_out = sum_pout * inv;
        report.ssim_in = sum_sin * inv;
        report.ssim_out = sum_sout * inv;
    }
    return report;
}

}  // namespace fsta
