#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>

#include "fsta/tensor.hpp"

namespace fsta {

// ---------------------------------------------------------------------------
// Raw kernels: plain tensor-in / tensor-out math shared by the tape ops and
// by the instrumented (no-tape) forward paths.
// ---------------------------------------------------------------------------
namespace kernels {

/// 2D cross-correlation, stride 1, zero padding (k-1)/2 so extents are kept.
/// input [Cin,H,W], weight [Cout,Cin,k,k], bias [Cout] -> [Cout,H,W].
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.rank() != 3 || weight.rank() != 4 || bias.rank() != 1)
        throw std::invalid_argument("conv2d: expected input rank 3, weight rank 4, bias rank 1");
    const std::size_t cin = input.extent(0), h = input.extent(1), w = input.extent(2);
    const std::size_t cout = weight.extent(0), k = weight.extent(2);
    if (weight.extent(1) != cin)
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(weight.extent(1)) +
                                    " input channels, input has " + std::to_string(cin));
    if (weight.extent(3) != k || k % 2 == 0)
        throw std::invalid_argument("conv2d: kernel must be square with odd extent, got " +
                                    shape_str(weight.shape()));
    if (bias.extent(0) != cout)
        throw std::invalid_argument("conv2d: bias length mismatch");
    const std::size_t pad = (k - 1) / 2;
    const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;

    // zero-pad once so the hot loops are branch-free, full-width, and vectorize
    std::vector<double> padded(cin * hp * wp, 0.0);
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(input.ptr() + (ci * h + y) * w, w,
                        padded.data() + ci * hp * wp + (y + pad) * wp + pad);

    Tensor out({cout, h, w});
    for (std::size_t co = 0; co < cout; ++co) {
        double* outc = out.ptr() + co * h * w;
        const double bv = bias[co];
        for (std::size_t i = 0; i < h * w; ++i) outc[i] = bv;
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* pc = padded.data() + ci * hp * wp;
            const double* wrow = weight.ptr() + ((co * cin + ci) * k) * k;
            if (k == 3) {  // dominant case: one fused pass per output row
                const double w00 = wrow[0], w01 = wrow[1], w02 = wrow[2];
                const double w10 = wrow[3], w11 = wrow[4], w12 = wrow[5];
                const double w20 = wrow[6], w21 = wrow[7], w22 = wrow[8];
                for (std::size_t y = 0; y < h; ++y) {
                    double* __restrict orow = outc + y * w;
                    const double* __restrict r0 = pc + y * wp;
                    const double* __restrict r1 = r0 + wp;
                    const double* __restrict r2 = r1 + wp;
                    for (std::size_t x = 0; x < w; ++x)
                        orow[x] += w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2] +
                                   w10 * r1[x] + w11 * r1[x + 1] + w12 * r1[x + 2] +
                                   w20 * r2[x] + w21 * r2[x + 1] + w22 * r2[x + 2];
                }
                continue;
            }
            for (std::size_t y = 0; y < h; ++y) {
                double* __restrict orow = outc + y * w;
                for (std::size_t kh = 0; kh < k; ++kh)
                    for (std::size_t kw = 0; kw < k; ++kw) {
                        const double wv = wrow[kh * k + kw];
                        if (wv == 0.0) continue;
                        const double* __restrict irow = pc + (y + kh) * wp + kw;
                        for (std::size_t x = 0; x < w; ++x) orow[x] += wv * irow[x];
                    }
            }
        }
    }
    return out;
}

inline void conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& gout,
                            Tensor* gin, Tensor* gweight, Tensor* gbias) {
    const std::size_t cin = input.extent(0), h = input.extent(1), w = input.extent(2);
    const std::size_t cout = weight.extent(0), k = weight.extent(2);
    const std::size_t pad = (k - 1) / 2;
    const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;

    // pad the tensors the hot loops slide over, as in the forward pass
    std::vector<double> pin;
    if (gweight) {
        pin.assign(cin * hp * wp, 0.0);
        for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t y = 0; y < h; ++y)
                std::copy_n(input.ptr() + (ci * h + y) * w, w,
                            pin.data() + ci * hp * wp + (y + pad) * wp + pad);
    }
    std::vector<double> pgout;
    if (gin) {
        pgout.assign(cout * hp * wp, 0.0);
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t y = 0; y < h; ++y)
                std::copy_n(gout.ptr() + (co * h + y) * w, w,
                            pgout.data() + co * hp * wp + (y + pad) * wp + pad);
    }

    for (std::size_t co = 0; co < cout; ++co) {
        const double* gc = gout.ptr() + co * h * w;
        if (gbias) {
            double acc = 0.0;
            for (std::size_t i = 0; i < h * w; ++i) acc += gc[i];
            (*gbias)[co] += acc;
        }
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const std::size_t wbase = (co * cin + ci) * k * k;
            if (gweight) {
                const double* pc = pin.data() + ci * hp * wp;
                if (k == 3) {  // one fused pass with nine accumulators
                    double a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0,
                           a21 = 0, a22 = 0;
                    for (std::size_t y = 0; y < h; ++y) {
                        const double* __restrict grow = gc + y * w;
                        const double* __restrict r0 = pc + y * wp;
                        const double* __restrict r1 = r0 + wp;
                        const double* __restrict r2 = r1 + wp;
                        for (std::size_t x = 0; x < w; ++x) {
                            const double g = grow[x];
                            a00 += g * r0[x];
                            a01 += g * r0[x + 1];
                            a02 += g * r0[x + 2];
                            a10 += g * r1[x];
                            a11 += g * r1[x + 1];
                            a12 += g * r1[x + 2];
                            a20 += g * r2[x];
                            a21 += g * r2[x + 1];
                            a22 += g * r2[x + 2];
                        }
                    }
                    double* gw = gweight->ptr() + wbase;
                    gw[0] += a00, gw[1] += a01, gw[2] += a02;
                    gw[3] += a10, gw[4] += a11, gw[5] += a12;
                    gw[6] += a20, gw[7] += a21, gw[8] += a22;
                } else {
                    for (std::size_t kh = 0; kh < k; ++kh)
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            double acc = 0.0;
                            for (std::size_t y = 0; y < h; ++y) {
                                const double* __restrict grow = gc + y * w;
                                const double* __restrict irow = pc + (y + kh) * wp + kw;
                                for (std::size_t x = 0; x < w; ++x) acc += grow[x] * irow[x];
                            }
                            (*gweight)[wbase + kh * k + kw] += acc;
                        }
                }
            }
            if (gin) {
                // dL/dx is the correlation of gout with the flipped kernel
                double* ginc = gin->ptr() + ci * h * w;
                const double* gp = pgout.data() + co * hp * wp;
                if (k == 3) {
                    const double* wf = weight.ptr() + wbase;
                    const double w00 = wf[8], w01 = wf[7], w02 = wf[6];
                    const double w10 = wf[5], w11 = wf[4], w12 = wf[3];
                    const double w20 = wf[2], w21 = wf[1], w22 = wf[0];
                    for (std::size_t y = 0; y < h; ++y) {
                        double* __restrict grow = ginc + y * w;
                        const double* __restrict r0 = gp + y * wp;
                        const double* __restrict r1 = r0 + wp;
                        const double* __restrict r2 = r1 + wp;
                        for (std::size_t x = 0; x < w; ++x)
                            grow[x] += w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2] +
                                       w10 * r1[x] + w11 * r1[x + 1] + w12 * r1[x + 2] +
                                       w20 * r2[x] + w21 * r2[x + 1] + w22 * r2[x + 2];
                    }
                    continue;
                }
                for (std::size_t y = 0; y < h; ++y) {
                    double* __restrict grow = ginc + y * w;
                    for (std::size_t kh = 0; kh < k; ++kh)
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const double wv = weight[wbase + kh * k + kw];
                            if (wv == 0.0) continue;
                            const double* __restrict prow =
                                gp + (y + k - 1 - kh) * wp + (k - 1 - kw);
                            for (std::size_t x = 0; x < w; ++x) grow[x] += wv * prow[x];
                        }
                }
            }
        }
    }
}

/// 1D cross-correlation with zero padding keeping T. input [Cin,T],
/// weight [Cout,Cin,k], bias [Cout] -> [Cout,T].
inline Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.rank() != 2 || weight.rank() != 3 || bias.rank() != 1)
        throw std::invalid_argument("conv1d: expected input rank 2, weight rank 3, bias rank 1");
    const std::size_t cin = input.extent(0), T = input.extent(1);
    const std::size_t cout = weight.extent(0), k = weight.extent(2);
    if (weight.extent(1) != cin || k % 2 == 0)
        throw std::invalid_argument("conv1d: weight shape mismatch or even kernel, " +
                                    shape_str(weight.shape()));
    if (bias.extent(0) != cout) throw std::invalid_argument("conv1d: bias length mismatch");
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k - 1) / 2;
    const std::ptrdiff_t N = static_cast<std::ptrdiff_t>(T);

    Tensor out({cout, T});
    for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t t = 0; t < T; ++t) {
            double acc = bias[co];
            for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) +
                                               static_cast<std::ptrdiff_t>(kk) - pad;
                    if (src < 0 || src >= N) continue;
                    acc += weight[(co * cin + ci) * k + kk] * input[ci * T + src];
                }
            out[co * T + t] = acc;
        }
    }
    return out;
}

inline void conv1d_backward(const Tensor& input, const Tensor& weight, const Tensor& gout,
                            Tensor* gin, Tensor* gweight, Tensor* gbias) {
    const std::size_t cin = input.extent(0), T = input.extent(1);
    const std::size_t cout = weight.extent(0), k = weight.extent(2);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k - 1) / 2;
    const std::ptrdiff_t N = static_cast<std::ptrdiff_t>(T);
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t t = 0; t < T; ++t) {
            const double g = gout[co * T + t];
            if (gbias) (*gbias)[co] += g;
            for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) +
                                               static_cast<std::ptrdiff_t>(kk) - pad;
                    if (src < 0 || src >= N) continue;
                    if (gweight) (*gweight)[(co * cin + ci) * k + kk] += g * input[ci * T + src];
                    if (gin) (*gin)[ci * T + src] += g * weight[(co * cin + ci) * k + kk];
                }
        }
}

inline void softmax_strides(const Shape& shape, std::size_t axis, std::size_t& outer,
                            std::size_t& n, std::size_t& inner) {
    if (axis >= shape.size())
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for " + shape_str(shape));
    outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    n = shape[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

/// Numerically stable softmax along `axis` (max subtraction).
inline Tensor softmax(const Tensor& input, std::size_t axis) {
    std::size_t outer, n, inner;
    softmax_strides(input.shape(), axis, outer, n, inner);
    Tensor out(input.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, input[base + j * inner]);
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(input[base + j * inner] - mx);
                out[base + j * inner] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= sum;
        }
    return out;
}

inline Tensor softmax_backward(const Tensor& y, const Tensor& gout, std::size_t axis) {
    std::size_t outer, n, inner;
    softmax_strides(y.shape(), axis, outer, n, inner);
    Tensor gin(y.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                dot += gout[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < n; ++j)
                gin[base + j * inner] = y[base + j * inner] * (gout[base + j * inner] - dot);
        }
    return gin;
}

/// [P,Q] x [Q,R] -> [P,R].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    const std::size_t P = a.extent(0), Q = a.extent(1), R = b.extent(1);
    Tensor out({P, R});
    for (std::size_t p = 0; p < P; ++p) {
        double* orow = out.ptr() + p * R;
        for (std::size_t q = 0; q < Q; ++q) {
            const double av = a[p * Q + q];
            if (av == 0.0) continue;
            const double* brow = b.ptr() + q * R;
            for (std::size_t r = 0; r < R; ++r) orow[r] += av * brow[r];
        }
    }
    return out;
}

inline Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose2d: rank 2 required");
    const std::size_t P = a.extent(0), Q = a.extent(1);
    Tensor out({Q, P});
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t q = 0; q < Q; ++q) out[q * P + p] = a[p * Q + q];
    return out;
}

/// Removes `axis` by summation.
inline Tensor reduce_sum(const Tensor& input, std::size_t axis) {
    std::size_t outer, n, inner;
    softmax_strides(input.shape(), axis, outer, n, inner);
    Shape oshape;
    for (std::size_t i = 0; i < input.rank(); ++i)
        if (i != axis) oshape.push_back(input.extent(i));
    if (oshape.empty()) oshape = {1};
    Tensor out(oshape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += input[(o * n + j) * inner + i];
            out[o * inner + i] = acc;
        }
    return out;
}

/// Mean over the trailing two (spatial) axes.
inline Tensor mean_pool_spatial(const Tensor& input) {
    if (input.rank() < 2) throw std::invalid_argument("mean_pool_spatial: rank >= 2 required");
    const std::size_t w = input.extent(input.rank() - 1);
    const std::size_t h = input.extent(input.rank() - 2);
    Shape oshape(input.shape().begin(), input.shape().end() - 2);
    if (oshape.empty()) oshape = {1};
    Tensor out(oshape);
    const double inv = 1.0 / static_cast<double>(h * w);
    for (std::size_t o = 0; o < out.size(); ++o) {
        double acc = 0.0;
        const double* p = input.ptr() + o * h * w;
        for (std::size_t i = 0; i < h * w; ++i) acc += p[i];
        out[o] = acc * inv;
    }
    return out;
}

inline Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("elementwise_mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Reverse-mode tape. Nodes are appended in program order, which is a
// topological order of the graph; the backward pass walks indices in reverse
// and accumulates adjoints by addition in that fixed order.
// ---------------------------------------------------------------------------

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
    const Tensor& grad() const;
    const Shape& shape() const { return val().shape(); }
};

class Tape {
public:
    using BackFn = std::function<void(Tape&)>;

    int push(Tensor value, bool requires_grad, BackFn back = {}) {
        nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    Var leaf(Tensor value, bool requires_grad = true) {
        return Var{this, push(std::move(value), requires_grad)};
    }
    Var constant(Tensor value) { return Var{this, push(std::move(value), false)}; }

    Tensor& value(int id) { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

    Tensor& grad(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
    void backward(const Var& loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: variable from another tape");
        if (value(loss.id).size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(value(loss.id).shape()));
        for (auto& n : nodes_) n.grad = Tensor{};
        grad(loss.id)[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && n.requires_grad && n.grad.size() != 0) n.back(*this);
        }
    }

    std::size_t size() const { return nodes_.size(); }

    void set_back(int id, BackFn back) { nodes_[static_cast<std::size_t>(id)].back = std::move(back); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad;
        BackFn back;
    };
    // deque keeps node references stable while later ops push onto the tape,
    // so a Tensor&/Shape& obtained from a Var stays valid for the Var's lifetime
    std::deque<Node> nodes_;
};

inline const Tensor& Var::val() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return const_cast<Tape*>(tape)->grad(id); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw std::invalid_argument("op: variables must live on the same tape");
    return *a.tape;
}

inline void accumulate(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

namespace detail {

template <class MakeBack>
inline Var emit(Tape& t, Tensor out, bool rg, MakeBack&& make_back) {
    int id = t.push(std::move(out), rg);
    if (rg) t.set_back(id, make_back(id));
    return Var{&t, id};
}

}  // namespace detail

// -- elementwise ------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    if (!a.val().same_shape(b.val()))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.val()[i];
    const int ia = a.id, ib = b.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](int id) {
        return [id, ia, ib](Tape& tp) {
            const Tensor& g = tp.grad(id);
            if (tp.needs_grad(ia)) detail::accumulate(tp.grad(ia), g);
            if (tp.needs_grad(ib)) detail::accumulate(tp.grad(ib), g);
        };
    });
}

inline Var sub(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    if (!a.val().same_shape(b.val()))
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.val()[i];
    const int ia = a.id, ib = b.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](int id) {
        return [id, ia, ib](Tape& tp) {
            const Tensor& g = tp.grad(id);
            if (tp.needs_grad(ia)) detail::accumulate(tp.grad(ia), g);
            if (tp.needs_grad(ib)) {
                Tensor& gb = tp.grad(ib);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
            }
        };
    });
}

/// Hadamard product; extents must match exactly (no broadcasting).
inline Var elementwise_mul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    Tensor out = kernels::elementwise_mul(a.val(), b.val());
    const int ia = a.id, ib = b.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](int id) {
        return [id, ia, ib](Tape& tp) {
            const Tensor& g = tp.grad(id);
            if (tp.needs_grad(ia)) {
                Tensor& ga = tp.grad(ia);
                const Tensor& bv = tp.value(ib);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (tp.needs_grad(ib)) {
                Tensor& gb = tp.grad(ib);
                const Tensor& av = tp.value(ia);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
            }
        };
    });
}

inline Var scale(const Var& a, double c) {
    Tape& t = *a.tape;
    Tensor out = a.val();
    for (auto& v : out.data()) v *= c;
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia, c](int id) {
        return [id, ia, c](Tape& tp) {
            const Tensor& g = tp.grad(id);
            Tensor& ga = tp.grad(ia);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * g[i];
        };
    });
}

inline Var relu(const Var& a) {
    Tape& t = *a.tape;
    Tensor out = a.val();
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia](int id) {
        return [id, ia](Tape& tp) {
            const Tensor& g = tp.grad(id);
            const Tensor& av = tp.value(ia);
            Tensor& ga = tp.grad(ia);
            for (std::size_t i = 0; i < ga.size(); ++i)
                if (av[i] > 0.0) ga[i] += g[i];
        };
    });
}

// -- shape ops --------------------------------------------------------------

inline Var reshape(const Var& a, Shape shape) {
    Tape& t = *a.tape;
    if (shape_numel(shape) != a.val().size())
        throw std::invalid_argument("reshape: element count mismatch, " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape));
    Tensor out(shape, a.val().data());
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia](int id) {
        return [id, ia](Tape& tp) { detail::accumulate(tp.grad(ia), tp.grad(id)); };
    });
}

/// Slice index `i` of axis 0: [D0, rest...] -> [rest...].
inline Var select0(const Var& a, std::size_t i) {
    Tape& t = *a.tape;
    const Shape& s = a.shape();
    if (s.empty() || i >= s[0]) throw std::out_of_range("select0: index out of range");
    Shape oshape(s.begin() + 1, s.end());
    if (oshape.empty()) oshape = {1};
    const std::size_t block = shape_numel(oshape);
    Tensor out(oshape);
    std::copy_n(a.val().ptr() + i * block, block, out.ptr());
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia, i, block](int id) {
        return [id, ia, i, block](Tape& tp) {
            const Tensor& g = tp.grad(id);
            double* dst = tp.grad(ia).ptr() + i * block;
            for (std::size_t j = 0; j < block; ++j) dst[j] += g[j];
        };
    });
}

/// Stack equal-shaped parts along a new leading axis.
inline Var stack0(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("stack0: empty input");
    Tape& t = *parts[0].tape;
    const Shape inner = parts[0].shape();
    const std::size_t block = shape_numel(inner);
    Shape oshape;
    oshape.push_back(parts.size());
    oshape.insert(oshape.end(), inner.begin(), inner.end());
    Tensor out(oshape);
    bool rg = false;
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        if (parts[p].tape != &t) throw std::invalid_argument("stack0: mixed tapes");
        if (parts[p].shape() != inner) throw std::invalid_argument("stack0: ragged shapes");
        std::copy_n(parts[p].val().ptr(), block, out.ptr() + p * block);
        rg = rg || t.needs_grad(parts[p].id);
        ids.push_back(parts[p].id);
    }
    return detail::emit(t, std::move(out), rg, [ids, block](int id) {
        return [id, ids, block](Tape& tp) {
            const Tensor& g = tp.grad(id);
            for (std::size_t p = 0; p < ids.size(); ++p) {
                if (!tp.needs_grad(ids[p])) continue;
                double* dst = tp.grad(ids[p]).ptr();
                const double* src = g.ptr() + p * block;
                for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
            }
        };
    });
}

/// Concatenate along axis 0; trailing extents must agree.
inline Var concat0(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat0: empty input");
    Tape& t = *parts[0].tape;
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t d0 = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p.tape != &t) throw std::invalid_argument("concat0: mixed tapes");
        Shape ptail(p.shape().begin() + 1, p.shape().end());
        if (ptail != tail) throw std::invalid_argument("concat0: trailing extents differ");
        d0 += p.shape()[0];
        rg = rg || t.needs_grad(p.id);
    }
    Shape oshape;
    oshape.push_back(d0);
    oshape.insert(oshape.end(), tail.begin(), tail.end());
    Tensor out(oshape);
    std::vector<int> ids;
    std::vector<std::size_t> offsets, sizes;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t n = p.val().size();
        std::copy_n(p.val().ptr(), n, out.ptr() + off);
        ids.push_back(p.id);
        offsets.push_back(off);
        sizes.push_back(n);
        off += n;
    }
    return detail::emit(t, std::move(out), rg, [ids, offsets, sizes](int id) {
        return [id, ids, offsets, sizes](Tape& tp) {
            const Tensor& g = tp.grad(id);
            for (std::size_t p = 0; p < ids.size(); ++p) {
                if (!tp.needs_grad(ids[p])) continue;
                double* dst = tp.grad(ids[p]).ptr();
                const double* src = g.ptr() + offsets[p];
                for (std::size_t j = 0; j < sizes[p]; ++j) dst[j] += src[j];
            }
        };
    });
}

// -- linear algebra ---------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    Tensor out = kernels::matmul(a.val(), b.val());
    const int ia = a.id, ib = b.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](int id) {
        return [id, ia, ib](Tape& tp) {
            const Tensor& g = tp.grad(id);
            if (tp.needs_grad(ia))
                detail::accumulate(tp.grad(ia), kernels::matmul(g, kernels::transpose2d(tp.value(ib))));
            if (tp.needs_grad(ib))
                detail::accumulate(tp.grad(ib), kernels::matmul(kernels::transpose2d(tp.value(ia)), g));
        };
    });
}

inline Var transpose2d(const Var& a) {
    Tape& t = *a.tape;
    Tensor out = kernels::transpose2d(a.val());
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia](int id) {
        return [id, ia](Tape& tp) {
            detail::accumulate(tp.grad(ia), kernels::transpose2d(tp.grad(id)));
        };
    });
}

// -- reductions -------------------------------------------------------------

inline Var reduce_sum(const Var& a, std::size_t axis) {
    Tape& t = *a.tape;
    Tensor out = kernels::reduce_sum(a.val(), axis);
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia, axis](int id) {
        return [id, ia, axis](Tape& tp) {
            std::size_t outer, n, inner;
            kernels::softmax_strides(tp.value(ia).shape(), axis, outer, n, inner);
            const Tensor& g = tp.grad(id);
            Tensor& ga = tp.grad(ia);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < inner; ++i)
                        ga[(o * n + j) * inner + i] += g[o * inner + i];
        };
    });
}

inline Var sum_all(const Var& a) {
    Tape& t = *a.tape;
    double acc = 0.0;
    for (double v : a.val().data()) acc += v;
    const int ia = a.id;
    return detail::emit(t, Tensor::scalar(acc), t.needs_grad(ia), [ia](int id) {
        return [id, ia](Tape& tp) {
            const double g = tp.grad(id)[0];
            Tensor& ga = tp.grad(ia);
            for (auto& v : ga.data()) v += g;
        };
    });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.val().size())); }

inline Var mean_pool_spatial(const Var& a) {
    Tape& t = *a.tape;
    Tensor out = kernels::mean_pool_spatial(a.val());
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia](int id) {
        return [id, ia](Tape& tp) {
            const Tensor& av = tp.value(ia);
            const std::size_t hw = av.extent(av.rank() - 1) * av.extent(av.rank() - 2);
            const double inv = 1.0 / static_cast<double>(hw);
            const Tensor& g = tp.grad(id);
            Tensor& ga = tp.grad(ia);
            for (std::size_t o = 0; o < g.size(); ++o) {
                const double gv = g[o] * inv;
                double* dst = ga.ptr() + o * hw;
                for (std::size_t i = 0; i < hw; ++i) dst[i] += gv;
            }
        };
    });
}

// -- neural primitives ------------------------------------------------------

inline Var softmax(const Var& a, std::size_t axis) {
    Tape& t = *a.tape;
    Tensor out = kernels::softmax(a.val(), axis);
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia, axis](int id) {
        return [id, ia, axis](Tape& tp) {
            detail::accumulate(tp.grad(ia),
                               kernels::softmax_backward(tp.value(id), tp.grad(id), axis));
        };
    });
}

inline Var conv2d(const Var& input, const Var& weight, const Var& bias) {
    Tape& t = detail::same_tape(input, weight);
    if (bias.tape != &t) throw std::invalid_argument("conv2d: bias on another tape");
    Tensor out = kernels::conv2d(input.val(), weight.val(), bias.val());
    const int ii = input.id, iw = weight.id, ib = bias.id;
    const bool rg = t.needs_grad(ii) || t.needs_grad(iw) || t.needs_grad(ib);
    return detail::emit(t, std::move(out), rg, [ii, iw, ib](int id) {
        return [id, ii, iw, ib](Tape& tp) {
            kernels::conv2d_backward(tp.value(ii), tp.value(iw), tp.grad(id),
                                     tp.needs_grad(ii) ? &tp.grad(ii) : nullptr,
                                     tp.needs_grad(iw) ? &tp.grad(iw) : nullptr,
                                     tp.needs_grad(ib) ? &tp.grad(ib) : nullptr);
        };
    });
}

inline Var conv1d(const Var& input, const Var& weight, const Var& bias) {
    Tape& t = detail::same_tape(input, weight);
    if (bias.tape != &t) throw std::invalid_argument("conv1d: bias on another tape");
    Tensor out = kernels::conv1d(input.val(), weight.val(), bias.val());
    const int ii = input.id, iw = weight.id, ib = bias.id;
    const bool rg = t.needs_grad(ii) || t.needs_grad(iw) || t.needs_grad(ib);
    return detail::emit(t, std::move(out), rg, [ii, iw, ib](int id) {
        return [id, ii, iw, ib](Tape& tp) {
            kernels::conv1d_backward(tp.value(ii), tp.value(iw), tp.grad(id),
                                     tp.needs_grad(ii) ? &tp.grad(ii) : nullptr,
                                     tp.needs_grad(iw) ? &tp.grad(iw) : nullptr,
                                     tp.needs_grad(ib) ? &tp.grad(ib) : nullptr);
        };
    });
}

/// 2x2 mean pooling; requires even extents. [C,H,W] -> [C,H/2,W/2].
inline Var avgpool2(const Var& a) {
    Tape& t = *a.tape;
    const Shape& s = a.shape();
    if (s.size() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0)
        throw std::invalid_argument("avgpool2: [C,H,W] with even H,W required, got " + shape_str(s));
    const std::size_t c = s[0], h = s[1], w = s[2], oh = h / 2, ow = w / 2;
    Tensor out({c, oh, ow});
    const Tensor& av = a.val();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                const double* p = av.ptr() + (ch * h + 2 * y) * w + 2 * x;
                out[(ch * oh + y) * ow + x] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
            }
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia, c, h, w, oh, ow](int id) {
        return [id, ia, c, h, w, oh, ow](Tape& tp) {
            const Tensor& g = tp.grad(id);
            Tensor& ga = tp.grad(ia);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t x = 0; x < ow; ++x) {
                        const double gv = 0.25 * g[(ch * oh + y) * ow + x];
                        double* p = ga.ptr() + (ch * h + 2 * y) * w + 2 * x;
                        p[0] += gv;
                        p[1] += gv;
                        p[w] += gv;
                        p[w + 1] += gv;
                    }
        };
    });
}

/// Nearest-neighbor 2x upsampling. [C,H,W] -> [C,2H,2W].
inline Var upsample2(const Var& a) {
    Tape& t = *a.tape;
    const Shape& s = a.shape();
    if (s.size() != 3) throw std::invalid_argument("upsample2: [C,H,W] required");
    const std::size_t c = s[0], h = s[1], w = s[2];
    Tensor out({c, 2 * h, 2 * w});
    const Tensor& av = a.val();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double v = av[(ch * h + y) * w + x];
                double* p = out.ptr() + (ch * 2 * h + 2 * y) * 2 * w + 2 * x;
                p[0] = v;
                p[1] = v;
                p[2 * w] = v;
                p[2 * w + 1] = v;
            }
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia, c, h, w](int id) {
        return [id, ia, c, h, w](Tape& tp) {
            const Tensor& g = tp.grad(id);
            Tensor& ga = tp.grad(ia);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) {
                        const double* p = g.ptr() + (ch * 2 * h + 2 * y) * 2 * w + 2 * x;
                        ga[(ch * h + y) * w + x] += p[0] + p[1] + p[2 * w] + p[2 * w + 1];
                    }
        };
    });
}

/// Per-frame mean over channels and pixels: [T,C,H,W] -> [1,T].
inline Var frame_mean(const Var& a) {
    Tape& t = *a.tape;
    const Shape& s = a.shape();
    if (s.size() != 4) throw std::invalid_argument("frame_mean: [T,C,H,W] required");
    const std::size_t T = s[0], block = s[1] * s[2] * s[3];
    Tensor out({1, T});
    const double inv = 1.0 / static_cast<double>(block);
    for (std::size_t f = 0; f < T; ++f) {
        double acc = 0.0;
        const double* p = a.val().ptr() + f * block;
        for (std::size_t i = 0; i < block; ++i) acc += p[i];
        out[f] = acc * inv;
    }
    const int ia = a.id;
    return detail::emit(t, std::move(out), t.needs_grad(ia), [ia, T, block, inv](int id) {
        return [id, ia, T, block, inv](Tape& tp) {
            const Tensor& g = tp.grad(id);
            Tensor& ga = tp.grad(ia);
            for (std::size_t f = 0; f < T; ++f) {
                const double gv = g[f] * inv;
                double* p = ga.ptr() + f * block;
                for (std::size_t i = 0; i < block; ++i) p[i] += gv;
            }
        };
    });
}

// -- losses -----------------------------------------------------------------

/// mean(sqrt((a-b)^2 + eps^2)) — smooth L1-like restoration loss.
inline Var charbonnier_loss(const Var& a, const Var& b, double eps) {
    Tape& t = detail::same_tape(a, b);
    if (!a.val().same_shape(b.val())) throw std::invalid_argument("charbonnier_loss: shape mismatch");
    const std::size_t n = a.val().size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.val()[i] - b.val()[i];
        acc += std::sqrt(d * d + eps * eps);
    }
    const int ia = a.id, ib = b.id;
    return detail::emit(t, Tensor::scalar(acc / static_cast<double>(n)),
                        t.needs_grad(ia) || t.needs_grad(ib), [ia, ib, eps, n](int id) {
                            return [id, ia, ib, eps, n](Tape& tp) {
                                const double g = tp.grad(id)[0] / static_cast<double>(n);
                                const Tensor& av = tp.value(ia);
                                const Tensor& bv = tp.value(ib);
                                for (std::size_t i = 0; i < n; ++i) {
                                    const double d = av[i] - bv[i];
                                    const double dd = g * d / std::sqrt(d * d + eps * eps);
                                    if (tp.needs_grad(ia)) tp.grad(ia)[i] += dd;
                                    if (tp.needs_grad(ib)) tp.grad(ib)[i] -= dd;
                                }
                            };
                        });
}

/// mean((a-b)^2).
inline Var l2_loss(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    if (!a.val().same_shape(b.val())) throw std::invalid_argument("l2_loss: shape mismatch");
    const std::size_t n = a.val().size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.val()[i] - b.val()[i];
        acc += d * d;
    }
    const int ia = a.id, ib = b.id;
    return detail::emit(t, Tensor::scalar(acc / static_cast<double>(n)),
                        t.needs_grad(ia) || t.needs_grad(ib), [ia, ib, n](int id) {
                            return [id, ia, ib, n](Tape& tp) {
                                const double g = 2.0 * tp.grad(id)[0] / static_cast<double>(n);
                                const Tensor& av = tp.value(ia);
                                const Tensor& bv = tp.value(ib);
                                for (std::size_t i = 0; i < n; ++i) {
                                    const double dd = g * (av[i] - bv[i]);
                                    if (tp.needs_grad(ia)) tp.grad(ia)[i] += dd;
                                    if (tp.needs_grad(ib)) tp.grad(ib)[i] -= dd;
                                }
                            };
                        });
}

}  // namespace fsta
