#include "tracenas/ntk.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "tracenas/parallel.hpp"
#include "tracenas/rng.hpp"

namespace tracenas {

double loss_gamma(LossKind kind) { return kind == LossKind::mse ? 2.0 : 1.0; }

const char* loss_kind_name(LossKind kind) {
    return kind == LossKind::mse ? "mse" : "cross-entropy-softmax";
}

LossKind parse_loss_kind(const std::string& name) {
    if (name == "mse") return LossKind::mse;
    if (name == "cross-entropy-softmax" || name == "ce") return LossKind::cross_entropy_softmax;
    throw UsageError("unknown loss kind: " + name);
}

int append_loss(Tape& tape, LossKind kind, int pred, const Tensor& y) {
    if (!y.same_shape(tape.value(pred)))
        throw ShapeError("label shape " + y.shape_str() + " does not match prediction " +
                         tape.value(pred).shape_str());
    if (kind == LossKind::mse) {
        for (std::size_t i = 0; i < y.size(); ++i)
            if (y[i] < 0.0 || y[i] > 1.0)
                throw UsageError("mse labels must lie in [0,1], got " + std::to_string(y[i]));
        // mean over output coordinates: |d loss/d f_j| <= 2/n, so the
        // 2-Lipschitz budget holds with slack even off the [0,1] cube
        return tape.scale(tape.mse_sum(pred, tape.constant(y)), 1.0 / static_cast<double>(y.size()));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] != 0.0 && y[i] != 1.0)
            throw UsageError("cross-entropy labels must be one-hot");
        sum += y[i];
    }
    if (sum != 1.0) throw UsageError("cross-entropy labels must be one-hot");
    return tape.ce_softmax(pred, tape.constant(y));
}

int batch_count(const Tensor& X) {
    if (X.rank() < 2) throw ShapeError("batch tensor must have a leading sample dimension");
    return X.dim(0);
}

Tensor batch_row(const Tensor& X, int i) {
    std::vector<int> shape(X.shape().begin() + 1, X.shape().end());
    const std::size_t stride = shape_numel(shape);
    return Tensor(shape, std::vector<double>(X.data() + static_cast<size_t>(i) * stride,
                                             X.data() + static_cast<size_t>(i + 1) * stride));
}

Tensor forward_batch(const Network& net, const Tensor& X) {
    const int m = batch_count(X);
    const int n = net.output_dim();
    Tensor out({m, n});
    parallel_for(static_cast<size_t>(m), [&](std::size_t i) {
        TapeNet tn = net.build(batch_row(X, static_cast<int>(i)));
        const Tensor& f = tn.tape.value(tn.out);
        std::copy(f.data(), f.data() + f.size(), out.data() + i * static_cast<size_t>(n));
    });
    return out;
}

Tensor jacobian(const Network& net, const Tensor& x) {
    const int n = net.output_dim();
    const std::size_t p = net.param_count();
    TapeNet tn = net.build(x);
    Tensor J({n, static_cast<int>(p)});
    for (int j = 0; j < n; ++j) {
        Tensor seed({n});
        seed[static_cast<size_t>(j)] = 1.0;
        const auto grads = tn.tape.backward(tn.out, seed);
        const Tensor row = flatten_grads(tn, grads, p);
        std::copy(row.data(), row.data() + p, J.data() + static_cast<size_t>(j) * p);
    }
    return J;
}

Tensor loss_grad_flat(const Network& net, const Tensor& x, const Tensor& y, LossKind kind) {
    TapeNet tn = net.build(x);
    const int loss = append_loss(tn.tape, kind, tn.out, y);
    const auto grads = tn.tape.backward(loss, Tensor::scalar(1.0));
    return flatten_grads(tn, grads, net.param_count());
}

// ---- empirical NTK -----------------------------------------------------------

double NtkGram::trace() const {
    double t = 0.0;
    const int mn = matrix.dim(0);
    for (int i = 0; i < mn; ++i) t += matrix[static_cast<size_t>(i) * mn + i];
    return t;
}

NtkGram exact_ntk(const Network& net, const Tensor& X, int cap) {
    const int m = batch_count(X);
    const int n = net.output_dim();
    const long long mn = static_cast<long long>(m) * n;
    if (mn > cap)
        throw UsageError("exact_ntk refused: m*n = " + std::to_string(mn) + " exceeds cap " +
                         std::to_string(cap));
    const std::size_t p = net.param_count();

    Eigen::MatrixXd J(mn, static_cast<long long>(p));
    parallel_for(static_cast<size_t>(m), [&](std::size_t i) {
        const Tensor Ji = jacobian(net, batch_row(X, static_cast<int>(i)));
        if (!Ji.all_finite()) throw NumericError("non-finite Jacobian in exact_ntk");
        for (int j = 0; j < n; ++j)
            for (std::size_t q = 0; q < p; ++q)
                J(static_cast<long long>(i) * n + j, static_cast<long long>(q)) =
                    Ji[static_cast<size_t>(j) * p + q];
    });

    Eigen::MatrixXd gram = J * J.transpose();
    gram = 0.5 * (gram + gram.transpose()).eval();  // explicit symmetrization

    NtkGram out;
    out.m = m;
    out.n = n;
    out.matrix = Tensor({static_cast<int>(mn), static_cast<int>(mn)});
    for (long long r = 0; r < mn; ++r)
        for (long long c = 0; c < mn; ++c)
            out.matrix[static_cast<size_t>(r * mn + c)] = gram(r, c);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    if (eig.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    out.eigenvalues.resize(static_cast<size_t>(mn));
    out.eigenvectors.resize(static_cast<size_t>(mn));
    double sum = 0.0;
    for (long long i = 0; i < mn; ++i) {
        double lam = eig.eigenvalues()(mn - 1 - i);  // descending
        if (lam < 0.0 && lam >= -1e-8) lam = 0.0;
        out.eigenvalues[static_cast<size_t>(i)] = lam;
        Tensor u({static_cast<int>(mn)});
        for (long long r = 0; r < mn; ++r) u[static_cast<size_t>(r)] = eig.eigenvectors()(r, mn - 1 - i);
        out.eigenvectors[static_cast<size_t>(i)] = std::move(u);
        sum += lam;
    }
    out.mean_eigenvalue = sum / static_cast<double>(mn);
    return out;
}

double trace_norm_exact(const Network& net, const Tensor& X, int cap) {
    const int m = batch_count(X);
    const int n = net.output_dim();
    if (static_cast<long long>(m) * n > cap)
        throw UsageError("trace_norm_exact refused: m*n exceeds cap " + std::to_string(cap));
    std::vector<double> per_sample(static_cast<size_t>(m), 0.0);
    parallel_for(static_cast<size_t>(m), [&](std::size_t i) {
        const Tensor Ji = jacobian(net, batch_row(X, static_cast<int>(i)));
        if (!Ji.all_finite()) throw NumericError("non-finite Jacobian in trace_norm_exact");
        per_sample[i] = Ji.squared_norm();
    });
    return pairwise_sum(per_sample);
}

// ---- trace-norm lower bounds ------------------------------------------------------

namespace {

// Per-sample loss gradients for the given index list; one tape per worker.
std::vector<Tensor> loss_grads(const Network& net, const Tensor& X, const Tensor& Y, LossKind kind,
                               const std::vector<int>& indices) {
    std::vector<Tensor> grads(indices.size());
    parallel_for(indices.size(), [&](std::size_t i) {
        grads[i] = loss_grad_flat(net, batch_row(X, indices[i]), batch_row(Y, indices[i]), kind);
    });
    return grads;
}

Tensor mean_of(std::vector<Tensor> items) {
    const double inv = 1.0 / static_cast<double>(items.size());
    Tensor sum = pairwise_sum(std::move(items));
    sum *= inv;
    return sum;
}

std::vector<int> sample_without_replacement(int m, int b, Rng& rng) {
    std::vector<int> idx(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < b; ++i) {
        const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(m - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(b));
    return idx;
}

}  // namespace

double minibatch_trace(const Network& net, const Tensor& Xb, const Tensor& Yb, LossKind kind) {
    const int b = batch_count(Xb);
    std::vector<int> all(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) all[static_cast<size_t>(i)] = i;
    return mean_of(loss_grads(net, Xb, Yb, kind, all)).squared_norm();
}

TraceEstimates trace_lower_bounds(const Network& net, const Tensor& X, const Tensor& Y,
                                  LossKind kind, int batch_size, std::uint64_t seed) {
    const int m = batch_count(X);
    if (batch_size < 1 || batch_size > m) throw UsageError("batch size must be in [1, m]");
    TraceEstimates est;
    est.gamma = loss_gamma(kind);
    est.batch_size = batch_size;
    est.exact = trace_norm_exact(net, X, std::max(2000, m * net.output_dim()));

    // full pass: per-sample gradient norms and the partition chain term
    std::vector<double> sq_norms(static_cast<size_t>(m), 0.0);
    std::vector<double> chain_terms;
    for (int lo = 0; lo < m; lo += batch_size) {
        const int hi = std::min(m, lo + batch_size);
        std::vector<int> idx(static_cast<size_t>(hi - lo));
        for (int i = lo; i < hi; ++i) idx[static_cast<size_t>(i - lo)] = i;
        std::vector<Tensor> grads = loss_grads(net, X, Y, kind, idx);
        for (std::size_t i = 0; i < grads.size(); ++i)
            sq_norms[static_cast<size_t>(lo) + i] = grads[i].squared_norm();
        const Tensor mean = mean_of(std::move(grads));
        chain_terms.push_back(static_cast<double>(hi - lo) * mean.squared_norm());
        if (hi - lo < batch_size) est.truncated_last_batch = true;
    }
    est.grad_sum = pairwise_sum(sq_norms) / est.gamma;
    est.batch_chain = pairwise_sum(chain_terms) / est.gamma;

    // one uniformly sampled mini-batch, without replacement
    Rng rng(mix64(seed, 0x6d62ULL));
    est.batch_indices = sample_without_replacement(m, batch_size, rng);
    est.minibatch = mean_of(loss_grads(net, X, Y, kind, est.batch_indices)).squared_norm();
    est.scaled = static_cast<double>(m) / est.gamma * est.minibatch;
    return est;
}

// ---- linearized dynamics ------------------------------------------------------------

LossTrajectory mse_trajectory(const NtkGram& gram, const Tensor& Y, double eta,
                              const std::vector<double>& times) {
    if (eta <= 0.0) throw UsageError("eta must be positive");
    const std::size_t mn = gram.eigenvalues.size();
    if (Y.size() != mn)
        throw ShapeError("Y length " + std::to_string(Y.size()) + " does not match mn = " +
                         std::to_string(mn));
    std::vector<double> proj(mn);
    for (std::size_t i = 0; i < mn; ++i) proj[i] = gram.eigenvectors[i].dot(Y);
    LossTrajectory traj;
    traj.eta = eta;
    traj.source = "closed-form";
    for (double t : times) {
        double loss = 0.0;
        for (std::size_t i = 0; i < mn; ++i) {
            const double base = 1.0 - eta * gram.eigenvalues[i];
            const double decay = std::pow(base, 2.0 * t);
            if (!std::isfinite(decay))
                throw NumericError("mse_trajectory: (1 - eta*lambda)^(2t) left the real domain");
            loss += decay * proj[i] * proj[i];
        }
        traj.times.push_back(t);
        traj.losses.push_back(loss / static_cast<double>(gram.m));
    }
    return traj;
}

LossTrajectory linearized_train(const Network& net, const Tensor& X, const Tensor& Y, double eta,
                                int steps) {
    const int m = batch_count(X);
    const int n = net.output_dim();
    const long long mn = static_cast<long long>(m) * n;
    if (Y.size() != static_cast<size_t>(mn)) throw ShapeError("Y length must equal m*n");
    const std::size_t p = net.param_count();

    Eigen::MatrixXd J(mn, static_cast<long long>(p));
    Eigen::VectorXd f0(mn);
    parallel_for(static_cast<size_t>(m), [&](std::size_t i) {
        const Tensor Ji = jacobian(net, batch_row(X, static_cast<int>(i)));
        TapeNet tn = net.build(batch_row(X, static_cast<int>(i)));
        const Tensor& fi = tn.tape.value(tn.out);
        for (int j = 0; j < n; ++j) {
            f0(static_cast<long long>(i) * n + j) = fi[static_cast<size_t>(j)];
            for (std::size_t q = 0; q < p; ++q)
                J(static_cast<long long>(i) * n + j, static_cast<long long>(q)) =
                    Ji[static_cast<size_t>(j) * p + q];
        }
    });
    Eigen::VectorXd y(mn);
    for (long long i = 0; i < mn; ++i) y(i) = Y[static_cast<size_t>(i)];

    LossTrajectory traj;
    traj.eta = eta;
    traj.source = "simulated";
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(static_cast<long long>(p));
    Eigen::VectorXd f = f0;
    for (int t = 0; t <= steps; ++t) {
        const double loss = (y - f).squaredNorm() / static_cast<double>(m);
        if (!std::isfinite(loss) || loss > 1e6)
            throw NumericError("linearized training diverged at step " + std::to_string(t) +
                               " with eta = " + std::to_string(eta));
        traj.times.push_back(static_cast<double>(t));
        traj.losses.push_back(loss);
        if (t == steps) break;
        // gradient of 0.5 ||Y - f||^2 in parameter space
        delta -= eta * (J.transpose() * (f - y));
        f = f0 + J * delta;
    }
    return traj;
}

double prop1_leading_bound(const NtkGram& gram, double eta, int m, int n, double t) {
    const double lam_bar = gram.mean_eigenvalue;
    if (eta * lam_bar >= 1.0)
        throw FeasibilityError("eta * mean eigenvalue = " + std::to_string(eta * lam_bar) +
                               " >= 1: trace-norm cap m*n/eta violated");
    const double q = t < 0.5 ? 2.0 * t : 1.0;
    return static_cast<double>(m) * n * n * std::pow(1.0 - eta * lam_bar, q);
}

// ---- infinite-width oracle -----------------------------------------------------------

AnalyticKernels analytic_relu_kernels(const Tensor& X, int depth) {
    if (depth < 1) throw UsageError("depth must be >= 1");
    const int m = batch_count(X);
    const int n0 = static_cast<int>(X.size()) / m;
    AnalyticKernels k;
    k.sigma = Tensor({m, m});
    k.sigma_dot = Tensor::ones({m, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
            double dotv = 0.0;
            for (int q = 0; q < n0; ++q)
                dotv += X[static_cast<size_t>(i) * n0 + q] * X[static_cast<size_t>(j) * n0 + q];
            k.sigma[static_cast<size_t>(i) * m + j] = dotv / n0;
        }
    k.theta = k.sigma;

    const double pi = 3.14159265358979323846;
    for (int l = 2; l <= depth; ++l) {
        Tensor sigma_next({m, m}), dot_next({m, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) {
                const double a = k.sigma[static_cast<size_t>(i) * m + i];
                const double b = k.sigma[static_cast<size_t>(j) * m + j];
                const double c = k.sigma[static_cast<size_t>(i) * m + j];
                if (a <= 0.0 || b <= 0.0) {
                    sigma_next[static_cast<size_t>(i) * m + j] = 0.0;
                    dot_next[static_cast<size_t>(i) * m + j] = 0.0;
                    continue;
                }
                const double norm = std::sqrt(a * b);
                const double rho = std::clamp(c / norm, -1.0, 1.0);
                const double ang = std::acos(rho);
                sigma_next[static_cast<size_t>(i) * m + j] =
                    norm / (2.0 * pi) * (std::sin(ang) + (pi - ang) * rho);
                dot_next[static_cast<size_t>(i) * m + j] = (pi - ang) / (2.0 * pi);
            }
        Tensor theta_next({m, m});
        for (std::size_t q = 0; q < theta_next.size(); ++q)
            theta_next[q] = k.theta[q] * dot_next[q] + sigma_next[q];
        k.sigma = std::move(sigma_next);
        k.sigma_dot = std::move(dot_next);
        k.theta = std::move(theta_next);
    }
    return k;
}

NtkGram analytic_ntk_relu_mlp(const Tensor& X, int depth, int n_out) {
    const AnalyticKernels k = analytic_relu_kernels(X, depth);
    const int m = k.theta.dim(0);
    const long long mn = static_cast<long long>(m) * n_out;
    NtkGram out;
    out.m = m;
    out.n = n_out;
    out.matrix = Tensor({static_cast<int>(mn), static_cast<int>(mn)});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            for (int q = 0; q < n_out; ++q)
                out.matrix[static_cast<size_t>((static_cast<long long>(i) * n_out + q) * mn +
                                               static_cast<long long>(j) * n_out + q)] =
                    k.theta[static_cast<size_t>(i) * m + j];

    Eigen::MatrixXd gram(mn, mn);
    for (long long r = 0; r < mn; ++r)
        for (long long c = 0; c < mn; ++c) gram(r, c) = out.matrix[static_cast<size_t>(r * mn + c)];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    double sum = 0.0;
    out.eigenvalues.resize(static_cast<size_t>(mn));
    out.eigenvectors.resize(static_cast<size_t>(mn));
    for (long long i = 0; i < mn; ++i) {
        double lam = eig.eigenvalues()(mn - 1 - i);
        if (lam < 0.0 && lam >= -1e-8) lam = 0.0;
        out.eigenvalues[static_cast<size_t>(i)] = lam;
        Tensor u({static_cast<int>(mn)});
        for (long long r = 0; r < mn; ++r) u[static_cast<size_t>(r)] = eig.eigenvectors()(r, mn - 1 - i);
        out.eigenvectors[static_cast<size_t>(i)] = std::move(u);
        sum += lam;
    }
    out.mean_eigenvalue = sum / static_cast<double>(mn);
    return out;
}

std::vector<WidthDeviation> ntk_width_convergence(const std::vector<int>& widths, const Tensor& X,
                                                  int depth, int n_out,
                                                  const std::vector<std::uint64_t>& seeds) {
    const NtkGram analytic = analytic_ntk_relu_mlp(X, depth, n_out);
    double scale = 0.0;
    for (std::size_t i = 0; i < analytic.matrix.size(); ++i)
        scale = std::max(scale, std::abs(analytic.matrix[i]));
    const int m = batch_count(X);
    const int n0 = static_cast<int>(X.size()) / m;

    std::vector<WidthDeviation> out;
    for (int width : widths) {
        double total = 0.0;
        for (std::uint64_t seed : seeds) {
            MlpChain net(n0, width, depth, n_out, seed);
            const NtkGram emp = exact_ntk(net, X, std::max(2000, m * n_out));
            double dev = 0.0;
            for (std::size_t i = 0; i < emp.matrix.size(); ++i)
                dev = std::max(dev, std::abs(emp.matrix[i] - analytic.matrix[i]));
            total += dev / scale;
        }
        out.push_back({width, total / static_cast<double>(seeds.size())});
    }
    return out;
}

double linearization_gap(int n0, int width, int depth, int n_out, const Tensor& X, const Tensor& Y,
                         double eta, int steps, std::uint64_t seed) {
    const int m = batch_count(X);
    const long long mn = static_cast<long long>(m) * n_out;
    if (Y.size() != static_cast<size_t>(mn)) throw ShapeError("Y length must equal m*n");

    MlpChain net(n0, width, depth, n_out, seed);
    const std::size_t p = net.param_count();

    Eigen::MatrixXd J(mn, static_cast<long long>(p));
    Eigen::VectorXd f0(mn), y(mn);
    for (int i = 0; i < m; ++i) {
        const Tensor Ji = jacobian(net, batch_row(X, i));
        TapeNet tn = net.build(batch_row(X, i));
        for (int j = 0; j < n_out; ++j) {
            f0(static_cast<long long>(i) * n_out + j) = tn.tape.value(tn.out)[static_cast<size_t>(j)];
            for (std::size_t q = 0; q < p; ++q)
                J(static_cast<long long>(i) * n_out + j, static_cast<long long>(q)) =
                    Ji[static_cast<size_t>(j) * p + q];
        }
    }
    for (long long i = 0; i < mn; ++i) y(i) = Y[static_cast<size_t>(i)];

    // nonlinear model: persistent per-sample tapes, refreshed with each theta
    std::vector<TapeNet> tapes;
    tapes.reserve(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) tapes.push_back(net.build(batch_row(X, i)));

    Tensor theta = net.theta();
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(static_cast<long long>(p));
    double sup_gap = 0.0;
    for (int t = 0; t <= steps; ++t) {
        // current outputs of both models
        Eigen::VectorXd f_lin = f0 + J * delta;
        std::vector<Tensor> grad_items;
        grad_items.reserve(static_cast<size_t>(m));
        double gap_sq = 0.0;
        for (int i = 0; i < m; ++i) {
            const Tensor& fi = tapes[static_cast<size_t>(i)].tape.value(tapes[static_cast<size_t>(i)].out);
            Tensor seed_grad({n_out});
            for (int j = 0; j < n_out; ++j) {
                const double fij = fi[static_cast<size_t>(j)];
                const double d = fij - f_lin(static_cast<long long>(i) * n_out + j);
                gap_sq += d * d;
                seed_grad[static_cast<size_t>(j)] = fij - y(static_cast<long long>(i) * n_out + j);
            }
            const auto grads = tapes[static_cast<size_t>(i)].tape.backward(tapes[static_cast<size_t>(i)].out, seed_grad);
            grad_items.push_back(flatten_grads(tapes[static_cast<size_t>(i)], grads, p));
        }
        sup_gap = std::max(sup_gap, std::sqrt(gap_sq));
        if (t == steps) break;

        const Tensor full_grad = pairwise_sum(std::move(grad_items));
        Tensor next = theta;
        next.axpy(-eta, full_grad);
        theta = std::move(next);
        for (auto& tn : tapes) apply_theta(tn, theta);
        delta -= eta * (J.transpose() * (f_lin - y));
    }
    return sup_gap;
}

// ---- data-agnosticism bound --------------------------------------------------------------

double prop2_bound(double gamma, int depth, int n0) {
    const double d = gamma == 1.0
                         ? static_cast<double>(depth)
                         : (1.0 - std::pow(gamma, 2.0 * depth)) / (1.0 - gamma * gamma);
    return 2.0 * d / static_cast<double>(n0);
}

GapCheck prop2_gap_check(const MlpChain& net, const Tensor& P, const Tensor& Q) {
    const int m = batch_count(P);
    if (batch_count(Q) != m) throw UsageError("P and Q must have the same sample count");
    // slack covers float32 storage rounding of unit-norm rows
    for (const Tensor* s : {&P, &Q})
        for (int i = 0; i < m; ++i)
            if (batch_row(*s, i).norm2() > 1.0 + 1e-5)
                throw UsageError("prop2_gap_check requires ||x||_2 <= 1");
    const int n = net.output_dim();
    const int cap = std::max(2000, m * n);
    const double tp = trace_norm_exact(net, P, cap);
    const double tq = trace_norm_exact(net, Q, cap);
    GapCheck out;
    out.gap = std::abs(tp - tq) / (static_cast<double>(m) * n);
    const int n0 = net.input_shape()[0];
    out.bound = prop2_bound(1.0, net.depth(), n0);
    return out;
}

}  // namespace tracenas
