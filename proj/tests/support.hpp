#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tracenas/archspace.hpp"
#include "tracenas/rng.hpp"
#include "tracenas/tape.hpp"

namespace tracenas::testing {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

// keeps relu/max-pool inputs away from kinks/ties so central differences behave
inline Tensor random_tensor_margin(std::vector<int> shape, Rng& rng, double margin = 1e-2) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
        double v = rng.normal();
        if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
        t[i] = v;
    }
    return t;
}

struct FdReport {
    double max_rel_err = 0.0;
    std::string where;
};

/// Central finite differences of the scalar node against the reverse pass,
/// perturbing every coordinate of every listed leaf.
inline FdReport fd_check(Tape& tape, int scalar_out, const std::vector<int>& leaves,
                         double step = 1e-5) {
    FdReport rep;
    const auto grads = tape.backward(scalar_out, Tensor::scalar(1.0));
    for (int leaf : leaves) {
        Tensor base = tape.value(leaf);
        for (std::size_t q = 0; q < base.size(); ++q) {
            const double orig = base[q];
            base[q] = orig + step;
            tape.set_leaf_value(leaf, base);
            tape.replay();
            const double up = tape.value(scalar_out)[0];
            base[q] = orig - step;
            tape.set_leaf_value(leaf, base);
            tape.replay();
            const double down = tape.value(scalar_out)[0];
            base[q] = orig;
            tape.set_leaf_value(leaf, base);
            tape.replay();
            const double fd = (up - down) / (2.0 * step);
            const double an = grads[static_cast<size_t>(leaf)].size()
                                  ? grads[static_cast<size_t>(leaf)][q]
                                  : 0.0;
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            const double rel = std::abs(fd - an) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.where = "leaf " + std::to_string(leaf) + " coord " + std::to_string(q);
            }
        }
    }
    return rep;
}

}  // namespace tracenas::testing
