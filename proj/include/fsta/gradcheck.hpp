#pragma once

#include "fsta/autograd.hpp"

namespace fsta {

struct GradCheckReport {
    double max_err = 0.0;
    std::size_t probes = 0;
    bool pass = true;
};

/// Central-difference check of reverse-mode gradients.
///
/// `build` constructs a scalar loss from leaf variables created for
/// `inputs`. Each input is probed at up to `max_probes_per_input`
/// coordinates (all of them when the tensor is small); the relative error
/// |fd - an| / max(1, |fd|, |an|) must stay below `tol`.
inline GradCheckReport grad_check(const std::vector<Tensor>& inputs,
                                  const std::function<Var(Tape&, std::vector<Var>&)>& build,
                                  std::uint64_t seed = 0,
                                  std::size_t max_probes_per_input = 25, double step = 1e-5,
                                  double tol = 1e-4) {
    auto eval = [&](const std::vector<Tensor>& in) {
        Tape tape;
        std::vector<Var> leaves;
        leaves.reserve(in.size());
        for (const auto& t : in) leaves.push_back(tape.leaf(t, false));
        Var loss = build(tape, leaves);
        if (loss.val().size() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
        return loss.val()[0];
    };

    // analytic gradients
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> leaves;
        leaves.reserve(inputs.size());
        for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
        Var loss = build(tape, leaves);
        tape.backward(loss);
        for (const auto& v : leaves) analytic.push_back(v.grad());
    }

    Rng rng(seed);
    GradCheckReport report;
    std::vector<Tensor> probe = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::size_t n = inputs[i].size();
        std::vector<std::size_t> coords;
        if (n <= max_probes_per_input) {
            coords.resize(n);
            for (std::size_t j = 0; j < n; ++j) coords[j] = j;
        } else {
            for (std::size_t j = 0; j < max_probes_per_input; ++j) coords.push_back(rng.index(n));
        }
        for (std::size_t j : coords) {
            const double orig = probe[i][j];
            probe[i][j] = orig + step;
            const double fp = eval(probe);
            probe[i][j] = orig - step;
            const double fm = eval(probe);
            probe[i][j] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = analytic[i][j];
            const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            report.max_err = std::max(report.max_err, err);
            ++report.probes;
            if (err >= tol) report.pass = false;
        }
    }
    return report;
}

}  // namespace fsta
