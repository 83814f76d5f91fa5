#include <doctest.h>

#include <sstream>

#include "fsta/attention.hpp"

using namespace fsta;

namespace {

FstaConfig small_cfg(std::size_t T = 3, std::size_t M = 2, std::size_t N = 2, std::size_t C = 1,
                     std::size_t H = 4, std::size_t W = 4) {
    FstaConfig c;
    c.T = T;
    c.M = M;
    c.N = N;
    c.C = C;
    c.H = H;
    c.W = W;
    return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("spatial_attention: zero params give uniform maps, rows sum to 1") {
    FstaConfig c = small_cfg();
    Rng rng(1);
    Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, -1, 1);

    FstaIntermediates zero = fsta_forward(x, FstaParams::zeros(c), c);
    for (std::size_t i = 0; i < zero.A_s.size(); ++i)
        CHECK(zero.A_s[i] == doctest::Approx(1.0 / static_cast<double>(c.hw())));

    FstaIntermediates rnd = fsta_forward(x, FstaParams::init(c, rng), c);
    for (std::size_t tm = 0; tm < c.T * c.M; ++tm) {
        double sum = 0;
        for (std::size_t q = 0; q < c.hw(); ++q) sum += rnd.A_s[tm * c.hw() + q];
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("spatial_attention concentrates on a hot pixel") {
    FstaConfig c = small_cfg(1, 1, 1, 1, 3, 3);
    c.k_s = 1;
    FstaParams p = FstaParams::zeros(c);
    p.w_s[0] = 1.0;  // 1x1 identity logit map
    Tensor x = Tensor::zeros({1, 1, 3, 3});
    x[5] = 1.0;
    FstaIntermediates r = fsta_forward(x, p, c);
    std::size_t argmax = 0;
    for (std::size_t q = 1; q < 9; ++q)
        if (r.A_s[q] > r.A_s[argmax]) argmax = q;
    CHECK(argmax == 5);
}

TEST_CASE("spatial_squeeze: uniform mean, one-hot pick, loop oracle") {
    FstaConfig c = small_cfg(2, 2, 1, 2, 3, 3);
    Rng rng(2);
    Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, -1, 1);

    Tape tape;
    Var xv = tape.leaf(x, false);

    // uniform attention -> spatial mean per frame/channel
    Var a_uni = tape.constant(Tensor::full({c.T, c.M, c.hw()}, 1.0 / static_cast<double>(c.hw())));
    Tensor g = spatial_squeeze(xv, a_uni).val();
    for (std::size_t t = 0; t < c.T; ++t)
        for (std::size_t ch = 0; ch < c.C; ++ch) {
            double mean = 0;
            for (std::size_t q = 0; q < c.hw(); ++q) mean += x[(t * c.C + ch) * c.hw() + q];
            mean /= static_cast<double>(c.hw());
            for (std::size_t m = 0; m < c.M; ++m)
                CHECK(g[(ch * c.M + m) * c.T + t] == doctest::Approx(mean));
        }

    // one-hot attention at pixel 4 -> exact selection
    Tensor onehot = Tensor::zeros({c.T, c.M, c.hw()});
    for (std::size_t tm = 0; tm < c.T * c.M; ++tm) onehot[tm * c.hw() + 4] = 1.0;
    Tensor gh = spatial_squeeze(xv, tape.constant(onehot)).val();
    for (std::size_t t = 0; t < c.T; ++t)
        for (std::size_t ch = 0; ch < c.C; ++ch)
            for (std::size_t m = 0; m < c.M; ++m)
                CHECK(gh[(ch * c.M + m) * c.T + t] == x[(t * c.C + ch) * c.hw() + 4]);

    // random attention vs. double-loop oracle
    Tensor ar = rng.tensor_uniform({c.T, c.M, c.hw()}, 0, 1);
    Tensor gr = spatial_squeeze(xv, tape.constant(ar)).val();
    for (std::size_t t = 0; t < c.T; ++t)
        for (std::size_t m = 0; m < c.M; ++m)
            for (std::size_t ch = 0; ch < c.C; ++ch) {
                double acc = 0;
                for (std::size_t q = 0; q < c.hw(); ++q)
                    acc += ar[(t * c.M + m) * c.hw() + q] * x[(t * c.C + ch) * c.hw() + q];
                CHECK(std::abs(gr[(ch * c.M + m) * c.T + t] - acc) < 1e-12);
            }
}

TEST_CASE("temporal_attention: uniform on zero params, rows sum to 1, logistic identity") {
    FstaConfig c = small_cfg(4, 2, 3);
    Rng rng(3);
    Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, 0, 1);
    FstaIntermediates z = fsta_forward(x, FstaParams::zeros(c), c);
    for (std::size_t i = 0; i < z.A_t.size(); ++i)
        CHECK(z.A_t[i] == doctest::Approx(1.0 / static_cast<double>(c.T)));

    FstaIntermediates r = fsta_forward(x, FstaParams::init(c, rng), c);
    for (std::size_t n = 0; n < c.N; ++n) {
        double sum = 0;
        for (std::size_t t = 0; t < c.T; ++t) sum += r.A_t[n * c.T + t];
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }

    // T=2: logits (a, a+delta) -> weights (sigmoid(-delta), sigmoid(delta))
    const double delta = 0.7;
    Tensor logits({1, 2}, {1.3, 1.3 + delta});
    Tensor soft = kernels::softmax(logits, 1);
    const double sig = 1.0 / (1.0 + std::exp(-delta));
    CHECK(soft[0] == doctest::Approx(1.0 - sig));
    CHECK(soft[1] == doctest::Approx(sig));
}

TEST_CASE("temporal_squeeze: uniform mean, one-hot select, loop oracle") {
    Rng rng(4);
    const std::size_t C = 2, M = 3, T = 4, N = 2;
    Tensor gs = rng.tensor_normal({C, M, T});
    Tape tape;
    Var gv = tape.leaf(gs, false);

    Tensor at_uni = Tensor::full({1, T}, 1.0 / static_cast<double>(T));
    Tensor mean = temporal_squeeze(gv, tape.constant(at_uni)).val();
    for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t m = 0; m < M; ++m) {
            double acc = 0;
            for (std::size_t t = 0; t < T; ++t) acc += gs[(ch * M + m) * T + t];
            CHECK(mean[ch * M + m] == doctest::Approx(acc / static_cast<double>(T)));
        }

    Tensor at_hot = Tensor::zeros({N, T});
    at_hot[0 * T + 2] = 1.0;  // n=0 selects frame 2
    at_hot[1 * T + 0] = 1.0;  // n=1 selects frame 0
    Tensor sel = temporal_squeeze(gv, tape.constant(at_hot)).val();
    for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t m = 0; m < M; ++m) {
            CHECK(sel[ch * M * N + combo_index(m, 0, N)] == gs[(ch * M + m) * T + 2]);
            CHECK(sel[ch * M * N + combo_index(m, 1, N)] == gs[(ch * M + m) * T + 0]);
        }

    Tensor at_r = rng.tensor_uniform({N, T}, 0, 1);
    Tensor out = temporal_squeeze(gv, tape.constant(at_r)).val();
    for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t n = 0; n < N; ++n) {
                double acc = 0;
                for (std::size_t t = 0; t < T; ++t)
                    acc += gs[(ch * M + m) * T + t] * at_r[n * T + t];
                CHECK(std::abs(out[ch * M * N + combo_index(m, n, N)] - acc) < 1e-12);
            }
}

TEST_CASE("pixel_distribution: uniform, column sums, single-class") {
    FstaConfig c = small_cfg();
    Rng rng(5);
    Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, -1, 1);
    FstaIntermediates z = fsta_forward(x, FstaParams::zeros(c), c);
    for (std::size_t i = 0; i < z.A_p.size(); ++i)
        CHECK(z.A_p[i] == doctest::Approx(1.0 / static_cast<double>(c.mn())));

    FstaIntermediates r = fsta_forward(x, FstaParams::init(c, rng), c);
    for (std::size_t q = 0; q < c.hw(); ++q) {
        double sum = 0;
        for (std::size_t k = 0; k < c.mn(); ++k) sum += r.A_p[k * c.hw() + q];
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }

    FstaConfig c1 = small_cfg(2, 1, 1);
    Tensor x1 = rng.tensor_uniform({c1.T, c1.C, c1.H, c1.W}, -1, 1);
    FstaIntermediates one = fsta_forward(x1, FstaParams::init(c1, rng), c1);
    for (std::size_t i = 0; i < one.A_p.size(); ++i) CHECK(one.A_p[i] == doctest::Approx(1.0));
}

TEST_CASE("distribute: rank-1 broadcast, one-hot select, loop oracle") {
    Rng rng(6);
    const std::size_t C = 2, K = 4, HW = 6;
    Tensor gst = rng.tensor_normal({C, K});
    Tape tape;
    Var gv = tape.leaf(gst, false);

    // one-hot A_p selecting combination k at pixel p
    Tensor ap = Tensor::zeros({K, HW});
    for (std::size_t q = 0; q < HW; ++q) ap[(q % K) * HW + q] = 1.0;
    Tensor y = distribute(gv, tape.constant(ap)).val();
    for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t q = 0; q < HW; ++q) CHECK(y[ch * HW + q] == gst[ch * K + q % K]);

    // K=1: every pixel equals the single global scalar
    Tensor g1 = rng.tensor_normal({C, 1});
    Tensor out = distribute(tape.leaf(g1, false), tape.constant(Tensor::ones({1, HW}))).val();
    for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t q = 0; q < HW; ++q) CHECK(out[ch * HW + q] == doctest::Approx(g1[ch]));

    Tensor apr = rng.tensor_uniform({K, HW}, 0, 1);
    Tensor yr = distribute(gv, tape.constant(apr)).val();
    for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t q = 0; q < HW; ++q) {
            double acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += gst[ch * K + k] * apr[k * HW + q];
            CHECK(std::abs(yr[ch * HW + q] - acc) < 1e-12);
        }
}

TEST_CASE("fsta_forward: zero params give the mean of frame means") {
    FstaConfig c = small_cfg(3, 2, 2, 2, 4, 4);
    Rng rng(7);
    Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, -1, 1);
    FstaIntermediates r = fsta_forward(x, FstaParams::zeros(c), c);
    for (std::size_t ch = 0; ch < c.C; ++ch) {
        double expected = 0;
        for (std::size_t t = 0; t < c.T; ++t) {
            double frame_mean = 0;
            for (std::size_t q = 0; q < c.hw(); ++q) frame_mean += x[(t * c.C + ch) * c.hw() + q];
            expected += frame_mean / static_cast<double>(c.hw());
        }
        expected /= static_cast<double>(c.T);
        for (std::size_t q = 0; q < c.hw(); ++q)
            CHECK(r.y_ref[ch * c.hw() + q] == doctest::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("fsta_forward: T=M=N=1 zero params give the spatial mean") {
    FstaConfig c = small_cfg(1, 1, 1, 1, 3, 5);
    Rng rng(8);
    Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, 0, 1);
    FstaIntermediates r = fsta_forward(x, FstaParams::zeros(c), c);
    double mean = 0;
    for (std::size_t q = 0; q < c.hw(); ++q) mean += x[q];
    mean /= static_cast<double>(c.hw());
    for (std::size_t q = 0; q < c.hw(); ++q) CHECK(r.y_ref[q] == doctest::Approx(mean));
}

TEST_CASE("convexity: y_ref lies within the input range, 100 random instances") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        FstaConfig c = small_cfg(1 + rng.index(4), 1 + rng.index(3), 1 + rng.index(3),
                                 1 + rng.index(2), 2 + rng.index(4), 2 + rng.index(4));
        Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, -2, 2);
        FstaParams p = FstaParams::init(c, rng);
        FstaIntermediates r = fsta_forward(x, p, c);
        for (std::size_t ch = 0; ch < c.C; ++ch) {
            double lo = x[ch * c.hw()], hi = lo;
            for (std::size_t t = 0; t < c.T; ++t)
                for (std::size_t q = 0; q < c.hw(); ++q) {
                    const double v = x[(t * c.C + ch) * c.hw() + q];
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
            for (std::size_t q = 0; q < c.hw(); ++q) {
                CHECK(r.y_ref[ch * c.hw() + q] >= lo - 1e-12);
                CHECK(r.y_ref[ch * c.hw() + q] <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("shift invariance: constant logit offsets leave the output unchanged") {
    FstaConfig c = small_cfg(3, 2, 2, 1, 4, 4);
    Rng rng(10);
    Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, -1, 1);
    FstaParams p = FstaParams::init(c, rng);
    FstaIntermediates base = fsta_forward(x, p, c);

    FstaParams shifted = p;
    for (auto& v : shifted.b_s.data()) v += 17.0;
    for (auto& v : shifted.b_t.data()) v -= 3.5;
    for (auto& v : shifted.b_p.data()) v += 0.25;
    FstaIntermediates sh = fsta_forward(x, shifted, c);
    CHECK(max_abs_diff(base.A_s, sh.A_s) < 1e-9);
    CHECK(max_abs_diff(base.A_t, sh.A_t) < 1e-9);
    CHECK(max_abs_diff(base.A_p, sh.A_p) < 1e-9);
    CHECK(max_abs_diff(base.y_ref, sh.y_ref) < 1e-9);
}

TEST_CASE("fsta_forward is deterministic and matches the lean path") {
    FstaConfig c = small_cfg(4, 3, 2, 2, 5, 5);
    Rng rng(11);
    Tensor x = rng.tensor_uniform({c.T, c.C, c.H, c.W}, -1, 1);
    FstaParams p = FstaParams::init(c, rng);
    FstaIntermediates a = fsta_forward(x, p, c);
    FstaIntermediates b = fsta_forward(x, p, c);
    CHECK(std::memcmp(a.y_ref.ptr(), b.y_ref.ptr(), sizeof(double) * a.y_ref.size()) == 0);
    CHECK(std::memcmp(a.A_p.ptr(), b.A_p.ptr(), sizeof(double) * a.A_p.size()) == 0);

    Tensor lean = fsta_forward_lean(x, p, c);
    CHECK(max_abs_diff(lean, a.y) < 1e-12);
}

TEST_CASE("config and shape validation") {
    FstaConfig c = small_cfg();
    c.k_s = 2;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.k_s = 3;
    c.ref_index = 7;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    FstaConfig good = small_cfg();
    Rng rng(12);
    FstaParams p = FstaParams::init(good, rng);
    Tensor bad = rng.tensor_uniform({good.T, good.C, good.H, good.W + 1}, 0, 1);
    CHECK_THROWS_AS(fsta_forward(bad, p, good), std::invalid_argument);
}

TEST_CASE("checkpoint names round-trip through the archive") {
    FstaConfig c = small_cfg();
    Rng rng(13);
    FstaParams p = FstaParams::init(c, rng);
    std::stringstream ss;
    save_archive(ss, p.named());
    FstaParams back = FstaParams::from_named(load_archive(ss));
    CHECK(max_abs_diff(back.w_s, p.w_s) == 0.0);
    CHECK(max_abs_diff(back.w_p, p.w_p) == 0.0);
}
