#pragma once

#include "fsta/gradcheck.hpp"
#include "fsta/net.hpp"

namespace fsta {

struct NamedCheck {
    std::string name;
    GradCheckReport report;
};

inline bool all_pass(const std::vector<NamedCheck>& checks) {
    for (const auto& c : checks)
        if (!c.report.pass) return false;
    return true;
}

/// Finite-difference checks for every differentiable primitive.
inline std::vector<NamedCheck> gradcheck_primitives(std::uint64_t seed,
                                                    std::size_t probes = 25) {
    Rng rng(seed);
    std::vector<NamedCheck> out;
    auto run = [&](const std::string& name, std::vector<Tensor> inputs,
                   std::function<Var(Tape&, std::vector<Var>&)> build) {
        out.push_back({name, grad_check(inputs, build, seed, probes)});
    };

    run("add", {rng.tensor_normal({3, 4}), rng.tensor_normal({3, 4})},
        [](Tape&, std::vector<Var>& v) { return sum_all(add(v[0], v[1])); });
    run("sub", {rng.tensor_normal({3, 4}), rng.tensor_normal({3, 4})},
        [](Tape&, std::vector<Var>& v) { return sum_all(elementwise_mul(sub(v[0], v[1]), sub(v[0], v[1]))); });
    run("elementwise_mul", {rng.tensor_normal({2, 5}), rng.tensor_normal({2, 5})},
        [](Tape&, std::vector<Var>& v) { return sum_all(elementwise_mul(v[0], v[1])); });
    run("scale_relu", {rng.tensor_normal({4, 4})},
        [](Tape&, std::vector<Var>& v) { return sum_all(relu(scale(v[0], 1.7))); });
    run("matmul", {rng.tensor_normal({3, 5}), rng.tensor_normal({5, 2})},
        [](Tape&, std::vector<Var>& v) { return sum_all(elementwise_mul(matmul(v[0], v[1]), matmul(v[0], v[1]))); });
    run("transpose2d", {rng.tensor_normal({3, 4})},
        [](Tape&, std::vector<Var>& v) { return sum_all(elementwise_mul(transpose2d(v[0]), transpose2d(v[0]))); });
    run("softmax", {rng.tensor_normal({3, 6})}, [](Tape& t, std::vector<Var>& v) {
        Tensor w({3, 6});
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.1 * static_cast<double>(i);
        return sum_all(elementwise_mul(softmax(v[0], 1), t.constant(w)));
    });
    run("conv2d", {rng.tensor_normal({2, 5, 5}), rng.tensor_normal({3, 2, 3, 3}), rng.tensor_normal({3})},
        [](Tape&, std::vector<Var>& v) {
            Var y = conv2d(v[0], v[1], v[2]);
            return sum_all(elementwise_mul(y, y));
        });
    run("conv1d", {rng.tensor_normal({2, 7}), rng.tensor_normal({3, 2, 3}), rng.tensor_normal({3})},
        [](Tape&, std::vector<Var>& v) {
            Var y = conv1d(v[0], v[1], v[2]);
            return sum_all(elementwise_mul(y, y));
        });
    run("reduce_sum", {rng.tensor_normal({3, 4, 2})},
        [](Tape&, std::vector<Var>& v) {
            Var y = reduce_sum(v[0], 1);
            return sum_all(elementwise_mul(y, y));
        });
    run("mean_pool_spatial", {rng.tensor_normal({2, 4, 4})},
        [](Tape&, std::vector<Var>& v) {
            Var y = mean_pool_spatial(v[0]);
            return sum_all(elementwise_mul(y, y));
        });
    run("avgpool2_upsample2", {rng.tensor_normal({2, 4, 4})},
        [](Tape&, std::vector<Var>& v) {
            Var y = upsample2(avgpool2(v[0]));
            return sum_all(elementwise_mul(y, y));
        });
    run("select0_stack0_concat0", {rng.tensor_normal({3, 2, 2}), rng.tensor_normal({3, 2, 2})},
        [](Tape&, std::vector<Var>& v) {
            Var s = stack0({select0(v[0], 1), select0(v[1], 2)});
            Var c = concat0({v[0], v[1]});
            return add(sum_all(elementwise_mul(s, s)), sum_all(elementwise_mul(c, c)));
        });
    run("frame_mean", {rng.tensor_normal({3, 2, 2, 2})},
        [](Tape&, std::vector<Var>& v) {
            Var y = frame_mean(v[0]);
            return sum_all(elementwise_mul(y, y));
        });
    run("reshape", {rng.tensor_normal({2, 6})},
        [](Tape&, std::vector<Var>& v) {
            Var y = reshape(v[0], {3, 4});
            return sum_all(elementwise_mul(y, y));
        });
    run("spatial_squeeze", {rng.tensor_normal({2, 2, 3, 3}), rng.tensor_normal({2, 2, 9})},
        [](Tape&, std::vector<Var>& v) {
            Var y = spatial_squeeze(v[0], softmax(v[1], 2));
            return sum_all(elementwise_mul(y, y));
        });
    run("temporal_squeeze", {rng.tensor_normal({2, 3, 4}), rng.tensor_normal({2, 4})},
        [](Tape&, std::vector<Var>& v) {
            Var y = temporal_squeeze(v[0], softmax(v[1], 1));
            return sum_all(elementwise_mul(y, y));
        });
    run("charbonnier_loss", {rng.tensor_normal({3, 3}), rng.tensor_normal({3, 3})},
        [](Tape&, std::vector<Var>& v) { return charbonnier_loss(v[0], v[1], 1e-3); });
    run("l2_loss", {rng.tensor_normal({3, 3}), rng.tensor_normal({3, 3})},
        [](Tape&, std::vector<Var>& v) { return l2_loss(v[0], v[1]); });
    return out;
}

/// Gradients of sum(y_ref) w.r.t. the input window and all parameters.
inline std::vector<NamedCheck> gradcheck_fsta(std::uint64_t seed) {
    FstaConfig c;
    c.T = 3;
    c.M = 2;
    c.N = 2;
    c.C = 2;
    c.H = 4;
    c.W = 4;
    Rng rng(seed);
    FstaParams p = FstaParams::init(c, rng);
    Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, -1.0, 1.0);

    std::vector<Tensor> inputs{x, p.w_s, p.b_s, p.w_t, p.b_t, p.w_p, p.b_p};
    auto build = [c](Tape&, std::vector<Var>& v) {
        FstaVars pv{v[1], v[2], v[3], v[4], v[5], v[6]};
        return sum_all(fsta_forward(v[0], pv, c).y_ref);
    };
    return {{"fsta_forward", grad_check(inputs, build, seed, 12)}};
}

/// End-to-end network gradcheck at 16x16 with T=3, one per fusion mode.
inline std::vector<NamedCheck> gradcheck_net(std::uint64_t seed) {
    std::vector<NamedCheck> out;
    for (FusionMode mode : {FusionMode::fsta, FusionMode::dense_nonlocal, FusionMode::average,
                            FusionMode::single_frame}) {
        NetConfig cfg;
        cfg.T = 3;
        cfg.base_channels = 4;
        cfg.growth = 2;
        cfg.dense_layers = 2;
        cfg.fsta_M = 2;
        cfg.fsta_N = 2;
        cfg.fusion = mode;
        Rng rng(seed);
        ParamStore params = init_net_params(cfg, rng);
        // open the merge so every fusion branch's gradients are exercised
        if (mode == FusionMode::fsta) {
            Tensor& mw = params.at("fsta.merge.w");
            Rng mix(seed + 1);
            for (auto& v : mw.data()) v += mix.uniform(-0.3, 0.3);
        }
        Tensor window = rng.tensor_uniform({cfg.T, 1, 16, 16}, 0.0, 1.0);
        Tensor target = rng.tensor_uniform({1, 16, 16}, 0.0, 1.0);

        std::vector<Tensor> inputs;
        for (const auto& [name, t] : params.items()) inputs.push_back(t);
        auto build = [&](Tape& tape, std::vector<Var>& v) {
            VarStore vs;
            vs.store = &params;
            vs.vars = v;
            Var restored = net_forward(tape, window, vs, cfg);
            return charbonnier_loss(restored, tape.constant(target), 1e-3);
        };
        out.push_back({std::string("net_") + fusion_mode_name(mode),
                       grad_check(inputs, build, seed, 6)});
    }
    return out;
}

}  // namespace fsta
