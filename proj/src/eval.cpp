#include "tracenas/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tracenas/parallel.hpp"
#include "tracenas/rng.hpp"

namespace tracenas {

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t q = i; q <= j; ++q) ranks[order[q]] = r;
        i = j + 1;
    }
    return ranks;
}

double pearson_raw(const std::vector<double>& a, const std::vector<double>& b, bool* degenerate) {
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return sab / std::sqrt(saa * sbb);
}

double kendall_tau_b(const std::vector<double>& a, const std::vector<double>& b, bool* degenerate) {
    const std::size_t n = a.size();
    long long concordant = 0, discordant = 0, ties_a = 0, ties_b = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double da = a[i] - a[j], db = b[i] - b[j];
            if (da == 0.0 && db == 0.0) {
                ++ties_a;
                ++ties_b;
            } else if (da == 0.0) {
                ++ties_a;
            } else if (db == 0.0) {
                ++ties_b;
            } else if (da * db > 0.0) {
                ++concordant;
            } else {
                ++discordant;
            }
        }
    const long long n0 = static_cast<long long>(n) * (static_cast<long long>(n) - 1) / 2;
    const double denom = std::sqrt(static_cast<double>(n0 - ties_a)) *
                         std::sqrt(static_cast<double>(n0 - ties_b));
    if (denom == 0.0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return static_cast<double>(concordant - discordant) / denom;
}

}  // namespace

CorrelationReport correlation(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw UsageError("correlation: length mismatch");
    if (a.size() < 2) throw UsageError("correlation: need at least 2 points");
    CorrelationReport rep;
    rep.n = static_cast<int>(a.size());
    rep.pearson = pearson_raw(a, b, &rep.degenerate);
    rep.spearman = pearson_raw(average_ranks(a), average_ranks(b), &rep.degenerate);
    rep.kendall = kendall_tau_b(a, b, &rep.degenerate);
    if (rep.degenerate) {
        rep.pearson = rep.spearman = rep.kendall = 0.0;
    }
    return rep;
}

// ---- ground-truth trainer ----------------------------------------------------------

TrainResult sgd_train_eval(const CellSpace& space, const ArchId& arch, const Tensor& Xtr,
                           const Tensor& Ytr, const Tensor& Xte, const Tensor& Yte, int epochs,
                           double lr, int batch, std::uint64_t seed) {
    const int m = batch_count(Xtr);
    ArchInstance inst(space, arch, mix64(seed, 0x747261ULL));
    Tensor theta = inst.theta();
    const std::size_t p = theta.size();
    Rng shuffle_rng(mix64(seed, 0x736866ULL));

    TrainResult res;
    try {
        std::vector<int> order(static_cast<size_t>(m));
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 0; epoch < epochs; ++epoch) {
            for (int i = m - 1; i > 0; --i)
                std::swap(order[static_cast<size_t>(i)],
                          order[shuffle_rng.below(static_cast<std::uint64_t>(i + 1))]);
            for (int lo = 0; lo < m; lo += batch) {
                const int hi = std::min(m, lo + batch);
                std::vector<Tensor> grads(static_cast<size_t>(hi - lo));
                std::vector<double> losses(static_cast<size_t>(hi - lo));
                parallel_for(static_cast<size_t>(hi - lo), [&](std::size_t q) {
                    const int row = order[static_cast<size_t>(lo) + q];
                    TapeNet tn = inst.build(batch_row(Xtr, row));
                    const int loss = append_loss(tn.tape, LossKind::cross_entropy_softmax, tn.out,
                                                 batch_row(Ytr, row));
                    losses[q] = tn.tape.value(loss)[0];
                    const auto g = tn.tape.backward(loss, Tensor::scalar(1.0));
                    grads[q] = flatten_grads(tn, g, p);
                });
                const double batch_loss = pairwise_sum(losses) / static_cast<double>(hi - lo);
                if (!std::isfinite(batch_loss) || batch_loss > 1e6) {
                    res.diverged = true;
                    res.test_error = 1.0;
                    return res;
                }
                Tensor mean = pairwise_sum(std::move(grads));
                mean *= 1.0 / static_cast<double>(hi - lo);
                theta.axpy(-lr, mean);
                inst.set_theta(theta);
            }
        }
    } catch (const NumericError&) {
        res.diverged = true;
        res.test_error = 1.0;
        return res;
    }

    const Tensor pred = forward_batch(inst, Xte);
    const int mt = batch_count(Xte), n = space.output_dim;
    int wrong = 0;
    for (int i = 0; i < mt; ++i) {
        int pa = 0, ya = 0;
        for (int j = 1; j < n; ++j) {
            if (pred[static_cast<size_t>(i) * n + j] > pred[static_cast<size_t>(i) * n + pa]) pa = j;
            if (Yte[static_cast<size_t>(i) * n + j] > Yte[static_cast<size_t>(i) * n + ya]) ya = j;
        }
        if (pa != ya) ++wrong;
    }
    res.test_error = static_cast<double>(wrong) / mt;
    return res;
}

// ---- exhaustive space scoring ---------------------------------------------------------

std::vector<double> RankedSpace::column(const std::string& key) const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        const auto it = r.scores.find(key);
        if (it == r.scores.end()) throw UsageError("missing score column: " + key);
        out.push_back(it->second);
    }
    return out;
}

namespace {

Tensor gather_rows(const Tensor& X, const std::vector<int>& rows) {
    std::vector<int> sample_shape(X.shape().begin() + 1, X.shape().end());
    const std::size_t stride = shape_numel(sample_shape);
    std::vector<int> shape = sample_shape;
    shape.insert(shape.begin(), static_cast<int>(rows.size()));
    Tensor out(shape);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(X.data() + static_cast<size_t>(rows[i]) * stride,
                  X.data() + static_cast<size_t>(rows[i] + 1) * stride, out.data() + i * stride);
    return out;
}

std::uint64_t arch_weight_seed(std::uint64_t base, long long rank) {
    return mix64(base, 0x696e73ULL, static_cast<std::uint64_t>(rank));
}

}  // namespace

RankedSpace rank_space(const CellSpace& space, const Tensor& X, const Tensor& Y,
                       const std::vector<std::string>& scorers, const ScorerOptions& opt) {
    const std::vector<ArchId> archs = enumerate(space, opt.cap);
    const int m = batch_count(X);
    const int b = std::min(opt.batch, m);

    // one uniformly sampled mini-batch shared by the whole sweep: common random
    // numbers keep the per-arch scores comparable
    Rng rng(mix64(opt.seed, 0x726bULL));
    std::vector<int> idx(static_cast<size_t>(m));
    std::iota(idx.begin(), idx.end(), 0);
    for (int q = 0; q < b; ++q)
        std::swap(idx[static_cast<size_t>(q)],
                  idx[static_cast<size_t>(q) + rng.below(static_cast<std::uint64_t>(m - q))]);
    idx.resize(static_cast<size_t>(b));
    const Tensor Xb = gather_rows(X, idx);
    const Tensor Yb = gather_rows(Y, idx);

    RankedSpace ranked;
    ranked.rows.resize(archs.size());
    const double gamma = loss_gamma(opt.loss);
    parallel_for(archs.size(), [&](std::size_t i) {
        ArchScores row;
        row.rank = static_cast<long long>(i);
        row.arch = archs[i];
        const ArchInstance inst(space, archs[i], arch_weight_seed(opt.seed, row.rank));
        for (const std::string& s : scorers) {
            if (s == "exact") {
                row.scores["exact"] = trace_norm_exact(inst, X, opt.exact_cap);
            } else if (s == "approx") {
                row.scores["approx"] =
                    static_cast<double>(m) / gamma * minibatch_trace(inst, Xb, Yb, opt.loss);
            } else if (s == "params") {
                row.scores["params"] = static_cast<double>(inst.param_count());
            } else if (s == "snip") {
                row.scores["snip"] = baseline_snip(inst, Xb, Yb, LossKind::cross_entropy_softmax);
            } else if (s == "synflow") {
                row.scores["synflow"] = baseline_synflow(inst);
            } else {
                throw UsageError("unknown scorer: " + s);
            }
        }
        ranked.rows[i] = std::move(row);
    });
    return ranked;
}

void attach_errors(RankedSpace& ranked, const std::map<long long, double>& errors) {
    for (auto& row : ranked.rows) {
        const auto it = errors.find(row.rank);
        if (it == errors.end())
            throw UsageError("missing cached error for architecture rank " + std::to_string(row.rank));
        row.scores["test_error"] = it->second;
    }
}

// ---- agnosticism experiments ------------------------------------------------------------

CorrelationReport agnostic_experiment(const CellSpace& space, const Tensor& X, const Tensor& Y,
                                      AgnosticMode mode, const ScorerOptions& opt) {
    Tensor X2 = X, Y2 = Y;
    Rng rng(mix64(opt.seed, 0x61676eULL));
    if (mode == AgnosticMode::random_labels) {
        const int m = batch_count(Y);
        std::vector<int> perm(static_cast<size_t>(m));
        std::iota(perm.begin(), perm.end(), 0);
        for (int i = m - 1; i > 0; --i)
            std::swap(perm[static_cast<size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
        Y2 = gather_rows(Y, perm);
    } else {
        for (std::size_t i = 0; i < X2.size(); ++i) X2[i] = rng.normal();
        const int m = batch_count(X2);
        const std::size_t stride = X2.size() / static_cast<size_t>(m);
        double max_norm = 0.0;
        for (int i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t q = 0; q < stride; ++q) {
                const double v = X2[static_cast<size_t>(i) * stride + q];
                s += v * v;
            }
            max_norm = std::max(max_norm, std::sqrt(s));
        }
        X2 *= 1.0 / max_norm;
    }
    const RankedSpace base = rank_space(space, X, Y, {"approx"}, opt);
    const RankedSpace other = rank_space(space, X2, Y2, {"approx"}, opt);
    CorrelationReport rep = correlation(other.column("approx"), base.column("approx"));
    rep.a_name = mode == AgnosticMode::random_labels ? "approx-random-labels" : "approx-random-data";
    rep.b_name = "approx-true";
    return rep;
}

// ---- training-free baselines ---------------------------------------------------------------

double baseline_snip(const Network& net, const Tensor& Xb, const Tensor& Yb, LossKind kind) {
    const int b = batch_count(Xb);
    const std::size_t p = net.param_count();
    std::vector<Tensor> grads(static_cast<size_t>(b));
    parallel_for(static_cast<size_t>(b), [&](std::size_t i) {
        grads[i] = loss_grad_flat(net, batch_row(Xb, static_cast<int>(i)), batch_row(Yb, static_cast<int>(i)), kind);
    });
    Tensor mean = pairwise_sum(std::move(grads));
    mean *= 1.0 / static_cast<double>(b);
    const Tensor& theta = net.theta();
    std::vector<double> saliency(p);
    for (std::size_t q = 0; q < p; ++q) saliency[q] = std::abs(mean[q] * theta[q]);
    return pairwise_sum(saliency);
}

double baseline_synflow(const Network& net) {
    // evaluate on a |theta| copy with an all-ones input
    struct AbsView : Network {
        const Network* inner;
        Tensor abs_theta;
        const Tensor& theta() const override { return abs_theta; }
        void set_theta(Tensor) override { throw UsageError("read-only view"); }
        std::size_t param_count() const override { return inner->param_count(); }
        int output_dim() const override { return inner->output_dim(); }
        std::vector<int> input_shape() const override { return inner->input_shape(); }
        TapeNet build(const Tensor& x) const override {
            TapeNet tn = inner->build(x);
            for (const auto& [leaf, slot] : tn.params) {
                Tensor v(slot.shape, std::vector<double>(abs_theta.data() + slot.offset,
                                                         abs_theta.data() + slot.offset + slot.numel()));
                tn.tape.set_leaf_value(leaf, std::move(v));
            }
            tn.tape.replay();
            return tn;
        }
    };
    AbsView view;
    view.inner = &net;
    view.abs_theta = net.theta();
    for (std::size_t i = 0; i < view.abs_theta.size(); ++i)
        view.abs_theta[i] = std::abs(view.abs_theta[i]);

    TapeNet tn = view.build(Tensor::ones(net.input_shape()));
    const int sum_node = tn.tape.sumall(tn.out);
    const auto grads = tn.tape.backward(sum_node, Tensor::scalar(1.0));
    const Tensor flat = flatten_grads(tn, grads, net.param_count());
    std::vector<double> saliency(flat.size());
    for (std::size_t q = 0; q < flat.size(); ++q) saliency[q] = std::abs(flat[q] * view.abs_theta[q]);
    return pairwise_sum(saliency);
}

// ---- trade-off curve ---------------------------------------------------------------------------

TradeoffCurve tradeoff_curve(const RankedSpace& ranked, int bins, const std::string& score_key,
                             const std::string& error_key) {
    if (bins < 1) throw UsageError("tradeoff_curve: bins must be >= 1");
    const std::vector<double> score = ranked.column(score_key);
    const std::vector<double> error = ranked.column(error_key);
    const std::size_t n = score.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });

    TradeoffCurve curve;
    if (static_cast<std::size_t>(bins) * 2 > n) {
        bins = std::max<int>(1, static_cast<int>(n / 2));
        curve.merged_bins = true;
    }
    std::size_t lo = 0;
    for (int bi = 0; bi < bins; ++bi) {
        const std::size_t hi = n * static_cast<size_t>(bi + 1) / static_cast<size_t>(bins);
        TradeoffBin bin;
        bin.count = static_cast<int>(hi - lo);
        bin.score_lo = score[order[lo]];
        bin.score_hi = score[order[hi - 1]];
        double ms = 0.0, me = 0.0;
        for (std::size_t q = lo; q < hi; ++q) {
            ms += score[order[q]];
            me += error[order[q]];
        }
        ms /= bin.count;
        me /= bin.count;
        double var = 0.0;
        for (std::size_t q = lo; q < hi; ++q) var += (error[order[q]] - me) * (error[order[q]] - me);
        bin.mean_score = ms;
        bin.mean_error = me;
        bin.std_error = std::sqrt(var / bin.count);
        curve.bins.push_back(bin);
        lo = hi;
    }
    curve.argmin_bin = 0;
    for (int bi = 1; bi < static_cast<int>(curve.bins.size()); ++bi)
        if (curve.bins[static_cast<size_t>(bi)].mean_error <
            curve.bins[static_cast<size_t>(curve.argmin_bin)].mean_error)
            curve.argmin_bin = bi;
    return curve;
}

}  // namespace tracenas
