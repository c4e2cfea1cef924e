#include "tracenas/search.hpp"

#include <algorithm>
#include <cmath>

#include "tracenas/parallel.hpp"
#include "tracenas/rng.hpp"

namespace tracenas {

void PenaltyConfig::validate() const {
    if (mu < 0.0) throw UsageError("mu must be >= 0");
    if (tau <= 0.0) throw UsageError("tau must be > 0");
    if (xi <= 0.0) throw UsageError("xi must be > 0");
    if (steps < 1) throw UsageError("steps must be >= 1");
    if (batch < 1) throw UsageError("batch must be >= 1");
}

double objective_R(double trace_estimate, double mu, double nu) {
    return trace_estimate - mu * std::max(0.0, trace_estimate - nu);
}

namespace {

AlphaParams gumbel_draw(const CellSpace& space, Rng& rng) {
    AlphaParams g = AlphaParams::zeros(space);
    for (auto& v : g.op_logits)
        for (auto& x : v) x = rng.gumbel();
    for (auto& v : g.in_logits)
        for (auto& x : v) x = rng.gumbel();
    return g;
}

// d w_o / d a_k = w_o (delta_ok - w_k) / tau, applied blockwise
std::vector<double> softmax_chain(const std::vector<double>& dw, const std::vector<double>& w,
                                  double tau) {
    std::vector<double> da(w.size(), 0.0);
    double dot = 0.0;
    for (std::size_t o = 0; o < w.size(); ++o) dot += dw[o] * w[o];
    for (std::size_t k = 0; k < w.size(); ++k) da[k] = w[k] * (dw[k] - dot) / tau;
    return da;
}

}  // namespace

std::vector<double> grad_alpha_R(const SuperNet& net, const GumbelSample& sample, const Tensor& Xb,
                                 const Tensor& Yb, LossKind loss, double mu, double nu, double tau,
                                 bool hard, double* trace_out) {
    const int b = batch_count(Xb);
    const std::size_t p = net.param_count();
    const CellSpace& space = net.space();

    struct SampleTape {
        SuperNet::MixedTape mt;
        std::vector<int> grad_nodes;  // recorded parameter-gradient node per param leaf
    };
    std::vector<SampleTape> tapes(static_cast<size_t>(b));
    std::vector<Tensor> grad_values(static_cast<size_t>(b));

    // forward + recorded backward per sample; gradients stay differentiable
    parallel_for(static_cast<size_t>(b), [&](std::size_t i) {
        SampleTape& st = tapes[i];
        st.mt = net.build_mixed(batch_row(Xb, static_cast<int>(i)), sample, hard);
        Tape& T = st.mt.tape;
        const int loss_node = append_loss(T, loss, st.mt.out, batch_row(Yb, static_cast<int>(i)));
        const int seed = T.constant(Tensor::scalar(1.0));
        const std::vector<int> g = T.backward_graph(loss_node, seed);
        Tensor flat({static_cast<int>(p)});
        st.grad_nodes.reserve(st.mt.params.size());
        for (const auto& [leaf, slot] : st.mt.params) {
            const int gn = g[static_cast<size_t>(leaf)];
            st.grad_nodes.push_back(gn);
            if (gn >= 0) {
                const Tensor& gv = T.value(gn);
                std::copy(gv.data(), gv.data() + gv.size(), flat.data() + slot.offset);
            }
        }
        grad_values[i] = std::move(flat);
    });

    Tensor mean_grad = pairwise_sum(std::move(grad_values));
    mean_grad *= 1.0 / static_cast<double>(b);
    const double trace = mean_grad.squared_norm();
    if (trace_out) *trace_out = trace;

    // second pass: d trace / d weight-leaves via h_i = <mean_grad, grad_i>
    const std::size_t n_nodes = static_cast<size_t>(space.num_intermediate());
    std::vector<std::vector<double>> dop(static_cast<size_t>(b)), din(static_cast<size_t>(b));
    parallel_for(static_cast<size_t>(b), [&](std::size_t i) {
        SampleTape& st = tapes[i];
        Tape& T = st.mt.tape;
        int h = -1;
        for (std::size_t q = 0; q < st.mt.params.size(); ++q) {
            const int gn = st.grad_nodes[q];
            if (gn < 0) continue;
            const auto& slot = st.mt.params[q].second;
            const int cpart = T.constant(Tensor(
                slot.shape, std::vector<double>(mean_grad.data() + slot.offset,
                                                mean_grad.data() + slot.offset + slot.numel())));
            const int term = T.dot(cpart, gn);
            h = h < 0 ? term : T.add(h, term);
        }
        std::vector<double> d_op, d_in;
        if (h >= 0) {
            const auto grads = T.backward(h, Tensor::scalar(1.0));
            for (std::size_t ni = 0; ni < n_nodes; ++ni) {
                for (int w : st.mt.op_w[ni]) {
                    const Tensor& gv = grads[static_cast<size_t>(w)];
                    d_op.push_back(gv.size() ? gv[0] : 0.0);
                }
                for (int w : st.mt.in_w[ni]) {
                    const Tensor& gv = grads[static_cast<size_t>(w)];
                    d_in.push_back(gv.size() ? gv[0] : 0.0);
                }
            }
        } else {
            for (std::size_t ni = 0; ni < n_nodes; ++ni) {
                d_op.insert(d_op.end(), st.mt.op_w[ni].size(), 0.0);
                d_in.insert(d_in.end(), st.mt.in_w[ni].size(), 0.0);
            }
        }
        dop[i] = std::move(d_op);
        din[i] = std::move(d_in);
    });

    auto reduce = [&](const std::vector<std::vector<double>>& per_sample) {
        std::vector<double> out(per_sample[0].size(), 0.0);
        std::vector<double> buf(static_cast<size_t>(b));
        for (std::size_t k = 0; k < out.size(); ++k) {
            for (int i = 0; i < b; ++i) buf[static_cast<size_t>(i)] = per_sample[static_cast<size_t>(i)][k];
            out[k] = pairwise_sum(buf);
        }
        return out;
    };
    std::vector<double> dw_op = reduce(dop), dw_in = reduce(din);
    // d trace / d w = (2/b) sum_i d h_i / d w; penalty enters as a scalar factor
    const double factor = (2.0 / static_cast<double>(b)) * (1.0 - (trace > nu ? mu : 0.0));
    for (auto& v : dw_op) v *= factor;
    for (auto& v : dw_in) v *= factor;

    // chain through the softmax at (alpha + g)/tau
    std::vector<double> grad;
    std::size_t op_pos = 0, in_pos = 0;
    for (std::size_t ni = 0; ni < n_nodes; ++ni) {
        const auto& w_op = sample.soft.op_logits[ni];
        const auto& w_in = sample.soft.in_logits[ni];
        std::vector<double> dwo(dw_op.begin() + static_cast<long>(op_pos),
                                dw_op.begin() + static_cast<long>(op_pos + w_op.size()));
        std::vector<double> dwi(dw_in.begin() + static_cast<long>(in_pos),
                                dw_in.begin() + static_cast<long>(in_pos + w_in.size()));
        op_pos += w_op.size();
        in_pos += w_in.size();
        const auto da_op = softmax_chain(dwo, w_op, tau);
        const auto da_in = softmax_chain(dwi, w_in, tau);
        grad.insert(grad.end(), da_op.begin(), da_op.end());
        grad.insert(grad.end(), da_in.begin(), da_in.end());
    }
    for (double v : grad)
        if (!std::isfinite(v)) throw NumericError("non-finite alpha gradient");
    return grad;
}

std::vector<double> delta_star(const std::vector<std::vector<double>>& grads, double xi,
                               DeltaRule rule) {
    if (grads.empty()) throw UsageError("delta_star: no gradients");
    const std::size_t dim = grads[0].size();
    std::vector<double> delta(dim, 0.0);
    const double T = static_cast<double>(grads.size());

    if (rule == DeltaRule::mean_norm) {
        for (const auto& g : grads)
            for (std::size_t k = 0; k < dim; ++k) delta[k] += g[k] / T;
        double norm = 0.0;
        for (double v : delta) norm += v * v;
        norm = std::sqrt(norm);
        if (norm == 0.0) throw UsageError("degenerate search: all gradients are zero");
        for (auto& v : delta) v *= xi / norm;
        return delta;
    }

    double running_max = 0.0;
    for (const auto& g : grads) {
        double norm = 0.0;
        for (double v : g) norm += v * v;
        norm = std::sqrt(norm);
        running_max = std::max(running_max, norm);
        if (running_max == 0.0) continue;  // zero-gradient prefix contributes nothing
        for (std::size_t k = 0; k < dim; ++k) delta[k] += g[k] / running_max * (xi / T);
    }
    if (running_max == 0.0) throw UsageError("degenerate search: all gradients are zero");
    return delta;
}

namespace {

Tensor take_rows(const Tensor& X, const std::vector<int>& rows) {
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

std::vector<int> draw_batch(int m, int b, Rng& rng) {
    std::vector<int> idx(static_cast<size_t>(m));
    for (int q = 0; q < m; ++q) idx[static_cast<size_t>(q)] = q;
    for (int q = 0; q < b; ++q)
        std::swap(idx[static_cast<size_t>(q)],
                  idx[static_cast<size_t>(q) + rng.below(static_cast<std::uint64_t>(m - q))]);
    idx.resize(static_cast<size_t>(b));
    return idx;
}

}  // namespace

double nu_fixed(const CellSpace& space, const Tensor& X, const Tensor& Y, LossKind loss, int batch,
                std::uint64_t seed, int num_samples) {
    if (num_samples < 1) throw UsageError("nu_fixed: num_samples must be >= 1");
    const int m = batch_count(X);
    const int b = std::min(batch, m);
    const long long size = space.enum_size();
    Rng rng(mix64(seed, 0x6e75ULL));
    std::vector<double> traces(static_cast<size_t>(num_samples));
    std::vector<long long> ranks(static_cast<size_t>(num_samples));
    std::vector<std::vector<int>> batches(static_cast<size_t>(num_samples));
    for (int i = 0; i < num_samples; ++i) {
        ranks[static_cast<size_t>(i)] = static_cast<long long>(rng.below(static_cast<std::uint64_t>(size)));
        batches[static_cast<size_t>(i)] = draw_batch(m, b, rng);
    }
    parallel_for(static_cast<size_t>(num_samples), [&](std::size_t i) {
        const ArchId arch = arch_unrank(space, ranks[i]);
        const ArchInstance inst(space, arch, mix64(seed, 0x7761ULL));
        traces[i] = minibatch_trace(inst, take_rows(X, batches[i]), take_rows(Y, batches[i]), loss);
    });
    return pairwise_sum(traces) / static_cast<double>(num_samples);
}

double nu_adaptive_step(double nu0, const std::vector<double>& trace_history, int t) {
    if (t < 1) throw UsageError("nu_adaptive_step: t must be >= 1");
    if (static_cast<int>(trace_history.size()) < t - 1)
        throw UsageError("nu_adaptive_step: history shorter than t-1");
    double sum = nu0;
    for (int tau = 0; tau < t - 1; ++tau) sum += trace_history[static_cast<size_t>(tau)];
    return sum / static_cast<double>(t);
}

namespace {

Tensor random_onehot_labels(int m, int classes, std::uint64_t seed) {
    Rng rng(seed);
    Tensor Y({m, classes});
    for (int i = 0; i < m; ++i)
        Y[static_cast<size_t>(i) * classes + rng.below(static_cast<std::uint64_t>(classes))] = 1.0;
    return Y;
}

}  // namespace

SearchLog run_search(const CellSpace& space, const Tensor& X, const Tensor& Y,
                     const PenaltyConfig& config) {
    config.validate();
    space.validate();
    const int m = batch_count(X);
    if (config.batch > m) throw UsageError("batch size exceeds dataset size");

    SearchLog log;
    Tensor labels = Y;
    if (labels.size() == 0) {
        log.random_labels = true;
        labels = random_onehot_labels(m, space.output_dim, mix64(config.seed, 0x6c61ULL));
    }
    if (labels.rank() != 2 || labels.dim(0) != m || labels.dim(1) != space.output_dim)
        throw UsageError("labels must have shape (m, output_dim)");

    double nu0 = config.nu0;
    if (nu0 <= 0.0) {
        nu0 = nu_fixed(space, X, labels, config.loss, config.batch, mix64(config.seed, 0x6e30ULL));
        // the adaptive schedule starts from a deliberately loose cap and decays
        // toward the running mean within the first steps
        if (config.nu_policy == NuPolicy::adaptive) nu0 *= 30.0;
    }
    log.nu0_used = nu0;

    const SuperNet net(space, mix64(config.seed, 0x7468ULL));
    const AlphaParams alpha0 = AlphaParams::zeros(space);

    std::vector<std::vector<double>> grads;
    std::vector<double> trace_history;
    for (int t = 1; t <= config.steps; ++t) {
        Rng batch_rng(mix64(config.seed, 0x6261ULL, static_cast<std::uint64_t>(t)));
        const std::vector<int> idx = draw_batch(m, config.batch, batch_rng);
        const Tensor Xb = take_rows(X, idx);
        const Tensor Yb = take_rows(labels, idx);

        Rng grng(mix64(config.seed, 0x676dULL, static_cast<std::uint64_t>(t)));
        const AlphaParams g = gumbel_draw(space, grng);
        const GumbelSample sample = sample_architecture(space, alpha0, g, config.tau);

        const double nu_t = config.nu_policy == NuPolicy::fixed
                                ? nu0
                                : nu_adaptive_step(nu0, trace_history, t);

        double trace = 0.0;
        std::vector<double> G = grad_alpha_R(net, sample, Xb, Yb, config.loss, config.mu, nu_t,
                                             config.tau, /*hard=*/true, &trace);
        trace_history.push_back(trace);

        double gnorm = 0.0;
        for (double v : G) gnorm += v * v;
        gnorm = std::sqrt(gnorm);

        StepRecord rec;
        rec.step = t;
        rec.arch = sample.arch;
        rec.trace = trace;
        rec.R = objective_R(trace, config.mu, nu_t);
        rec.nu = nu_t;
        rec.grad_norm = gnorm;
        log.steps.push_back(std::move(rec));
        log.running_max = std::max(log.running_max, gnorm);
        grads.push_back(std::move(G));
    }

    log.delta = delta_star(grads, config.xi, config.delta_rule);
    double dn = 0.0;
    for (double v : log.delta) dn += v * v;
    log.delta_norm = std::sqrt(dn);
    if (log.delta_norm > config.xi * (1.0 + 1e-9))
        throw NumericError("update direction escaped the xi ball");

    std::vector<double> alpha_flat = alpha0.flatten();
    for (std::size_t i = 0; i < alpha_flat.size(); ++i) alpha_flat[i] += log.delta[i];
    log.alpha_star = AlphaParams::unflatten(space, alpha_flat);
    log.selected = argmax_arch(space, log.alpha_star);
    log.selected_rank = arch_rank(space, log.selected);
    return log;
}

}  // namespace tracenas
