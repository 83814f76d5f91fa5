#include <doctest.h>

#include <cstdlib>

#include "fsta/train.hpp"

using namespace fsta;

namespace {

NetConfig tiny_net(FusionMode mode = FusionMode::fsta) {
    NetConfig c;
    c.base_channels = 4;
    c.growth = 2;
    c.dense_layers = 2;
    c.T = 3;
    c.fusion = mode;
    c.fsta_M = 2;
    c.fsta_N = 2;
    return c;
}

std::vector<SyntheticSequence> tiny_data(std::uint64_t seed, std::size_t count = 2,
                                         std::size_t hw = 32) {
    std::vector<SyntheticSequence> out;
    for (std::size_t i = 0; i < count; ++i) {
        SynthConfig c;
        c.seed = seed + i;
        c.F = 6;
        c.H = c.W = hw;
        out.push_back(generate(c));
    }
    return out;
}

TrainConfig tiny_train(std::size_t steps) {
    TrainConfig t;
    t.patch = 32;
    t.batch = 2;
    t.steps = steps;
    t.seed = 11;
    return t;
}

bool params_equal(const ParamStore& a, const ParamStore& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Tensor& ta = a.items()[i].second;
        const Tensor& tb = b.items()[i].second;
        if (a.items()[i].first != b.items()[i].first) return false;
        if (std::memcmp(ta.ptr(), tb.ptr(), sizeof(double) * ta.size()) != 0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("lr=0 leaves parameters at their initialization") {
    NetConfig net = tiny_net();
    TrainConfig tc = tiny_train(4);
    tc.lr = 0.0;
    auto data = tiny_data(100);
    TrainResult r = train(net, tc, data);
    Rng rng(tc.seed);
    ParamStore init = init_net_params(net, rng);
    CHECK(params_equal(r.params, init));
}

TEST_CASE("fixed seed: identical loss curves and parameters") {
    NetConfig net = tiny_net();
    TrainConfig tc = tiny_train(5);
    auto data = tiny_data(200);
    TrainResult a = train(net, tc, data);
    TrainResult b = train(net, tc, data);
    REQUIRE(a.loss_curve.size() == b.loss_curve.size());
    for (std::size_t i = 0; i < a.loss_curve.size(); ++i)
        CHECK(a.loss_curve[i] == b.loss_curve[i]);
    CHECK(params_equal(a.params, b.params));
}

TEST_CASE("thread count does not change the numbers") {
    NetConfig net = tiny_net();
    TrainConfig tc = tiny_train(3);
    auto data = tiny_data(300);

    setenv("FSTA_THREADS", "1", 1);
    TrainResult serial = train(net, tc, data);
    setenv("FSTA_THREADS", "2", 1);
    TrainResult parallel = train(net, tc, data);
    unsetenv("FSTA_THREADS");

    for (std::size_t i = 0; i < serial.loss_curve.size(); ++i)
        CHECK(serial.loss_curve[i] == parallel.loss_curve[i]);
    CHECK(params_equal(serial.params, parallel.params));
}

TEST_CASE("learning-rate schedule halves on the configured period") {
    NetConfig net = tiny_net(FusionMode::average);
    TrainConfig tc = tiny_train(6);
    tc.lr_halve_every = 2;
    auto data = tiny_data(400);
    TrainResult r = train(net, tc, data);
    CHECK(r.lr_curve[0] == tc.lr);
    CHECK(r.lr_curve[1] == tc.lr);
    CHECK(r.lr_curve[2] == tc.lr * 0.5);
    CHECK(r.lr_curve[4] == tc.lr * 0.25);
}

TEST_CASE("training reduces the loss over 500 steps") {
    NetConfig net = tiny_net();
    TrainConfig tc = tiny_train(500);
    tc.lr = 1e-3;  // tiny net trains faster with a larger step
    auto data = tiny_data(500);
    TrainResult r = train(net, tc, data);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 50; ++i) {
        first += r.loss_curve[i];
        last += r.loss_curve[r.loss_curve.size() - 1 - i];
    }
    CHECK(last < first);
}

TEST_CASE("training rejects incompatible data") {
    NetConfig net = tiny_net();
    TrainConfig tc = tiny_train(1);
    CHECK_THROWS_AS(train(net, tc, {}), std::invalid_argument);

    auto small = tiny_data(600, 1, 16);  // frames smaller than the 32px patch
    CHECK_THROWS_AS(train(net, tc, small), std::invalid_argument);
}

TEST_CASE("evaluate: zero-init params give psnr_out == psnr_in exactly") {
    NetConfig net = tiny_net();
    Rng rng(1);
    ParamStore params = init_net_params(net, rng, /*zero_init=*/true);
    auto data = tiny_data(700);
    EvalReport rep = evaluate(params, net, data);
    CHECK(rep.psnr_out == rep.psnr_in);
    CHECK(rep.ssim_out == rep.ssim_in);
    REQUIRE(rep.per_sequence.size() == 2);
    CHECK(rep.per_sequence[0].frames == 4);  // F=6, T=3 -> centers 1..4
}
