#include <doctest.h>

#include <cstdio>

#include "fsta/net.hpp"

using namespace fsta;

namespace {

NetConfig tiny(FusionMode mode, std::size_t T = 3) {
    NetConfig c;
    c.base_channels = 4;
    c.growth = 2;
    c.dense_layers = 2;
    c.T = T;
    c.fusion = mode;
    c.fsta_M = 2;
    c.fsta_N = 2;
    return c;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.ptr(), b.ptr(), sizeof(double) * a.size()) == 0;
}

}  // namespace

TEST_CASE("zero weights: restored equals the blurred reference frame") {
    for (FusionMode mode : {FusionMode::fsta, FusionMode::average, FusionMode::single_frame,
                            FusionMode::dense_nonlocal}) {
        NetConfig c = tiny(mode);
        Rng rng(1);
        ParamStore params = init_net_params(c, rng, /*zero_init=*/true);
        Tensor win = rng.tensor_uniform({c.T, 1, 16, 16}, 0, 1);
        Tensor out = net_restore(win, params, c);
        Tensor ref({1, 16, 16});
        std::copy_n(win.ptr() + c.ref() * 16 * 16, 16 * 16, ref.ptr());
        CHECK(bit_equal(out, ref));
    }
}

TEST_CASE("default init is still an identity map (zero output conv)") {
    NetConfig c = tiny(FusionMode::fsta);
    Rng rng(2);
    ParamStore params = init_net_params(c, rng);
    Tensor win = rng.tensor_uniform({c.T, 1, 16, 16}, 0, 1);
    Tensor out = net_restore(win, params, c);
    Tensor ref({1, 16, 16});
    std::copy_n(win.ptr() + c.ref() * 16 * 16, 16 * 16, ref.ptr());
    CHECK(bit_equal(out, ref));
}

TEST_CASE("single_frame with T=1 equals average with T=1 bit-identically") {
    Rng rng(3);
    NetConfig a = tiny(FusionMode::single_frame, 1);
    NetConfig b = tiny(FusionMode::average, 1);
    Rng ra(7), rb(7);
    ParamStore pa = init_net_params(a, ra);
    ParamStore pb = init_net_params(b, rb);
    Tensor win = rng.tensor_uniform({1, 1, 16, 16}, 0, 1);
    CHECK(bit_equal(net_restore(win, pa, a), net_restore(win, pb, b)));
}

TEST_CASE("single_frame ignores non-reference frames bitwise") {
    NetConfig c = tiny(FusionMode::single_frame);
    Rng rng(4);
    ParamStore params = init_net_params(c, rng);
    // make the correction path non-trivial so the check is meaningful
    for (auto& v : params.at("dec.out.w").data()) v = rng.uniform(-0.3, 0.3);

    Tensor win = rng.tensor_uniform({c.T, 1, 16, 16}, 0, 1);
    Tensor base = net_restore(win, params, c);

    Tensor perturbed = win;
    for (std::size_t t = 0; t < c.T; ++t) {
        if (t == c.ref()) continue;
        for (std::size_t i = 0; i < 16 * 16; ++i)
            perturbed[ (t * 16 * 16) + i] = rng.uniform(0, 1);
    }
    CHECK(bit_equal(net_restore(perturbed, params, c), base));
}

TEST_CASE("average fusion of identical frames matches single_frame") {
    Rng rng(5);
    NetConfig avg = tiny(FusionMode::average);
    NetConfig sf = tiny(FusionMode::single_frame);
    Rng ra(9), rb(9);
    ParamStore pa = init_net_params(avg, ra);
    ParamStore pb = init_net_params(sf, rb);
    for (auto& v : pa.at("dec.out.w").data()) v = 0.1;
    for (auto& v : pb.at("dec.out.w").data()) v = 0.1;

    Tensor frame = rng.tensor_uniform({1, 1, 16, 16}, 0, 1);
    Tensor win({3, 1, 16, 16});
    for (std::size_t t = 0; t < 3; ++t) std::copy_n(frame.ptr(), 16 * 16, win.ptr() + t * 16 * 16);

    Tensor ya = net_restore(win, pa, avg);
    Tensor yb = net_restore(win, pb, sf);
    for (std::size_t i = 0; i < ya.size(); ++i) CHECK(std::abs(ya[i] - yb[i]) < 1e-12);
}

TEST_CASE("output extents equal input extents for all modes") {
    Rng rng(6);
    for (FusionMode mode : {FusionMode::fsta, FusionMode::average, FusionMode::single_frame,
                            FusionMode::dense_nonlocal}) {
        NetConfig c = tiny(mode);
        ParamStore params = init_net_params(c, rng);
        Tensor win = rng.tensor_uniform({c.T, 1, 16, 24}, 0, 1);
        Tensor out = net_restore(win, params, c);
        CHECK(out.shape() == Shape{1, 16, 24});
        CHECK(out.all_finite());
    }
}

TEST_CASE("extent divisibility is enforced") {
    NetConfig c = tiny(FusionMode::average);
    Rng rng(7);
    ParamStore params = init_net_params(c, rng);
    Tensor win = rng.tensor_uniform({c.T, 1, 18, 18}, 0, 1);  // 18 % 4 != 0
    CHECK_THROWS_AS(net_restore(win, params, c), std::invalid_argument);
}

TEST_CASE("checkpoint round-trip reproduces the forward pass bitwise") {
    NetConfig c = tiny(FusionMode::fsta);
    Rng rng(8);
    ParamStore params = init_net_params(c, rng);
    for (auto& v : params.at("dec.out.w").data()) v = rng.uniform(-0.2, 0.2);
    Tensor win = rng.tensor_uniform({c.T, 1, 16, 16}, 0, 1);
    Tensor before = net_restore(win, params, c);

    const char* path = "test_net_ckpt.fstac";
    params.save(path);
    ParamStore loaded = ParamStore::load(path);
    std::remove(path);
    CHECK(bit_equal(net_restore(win, loaded, c), before));
}
