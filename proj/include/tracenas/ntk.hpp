#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tracenas/archspace.hpp"
#include "tracenas/tensor.hpp"

namespace tracenas {

// Raised when eta * mean_eigenvalue >= 1, i.e. the learning-rate constraint
// behind the trace-norm cap is infeasible for the given kernel.
struct FeasibilityError : std::runtime_error {
    explicit FeasibilityError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class LossKind { mse, cross_entropy_softmax };

double loss_gamma(LossKind kind);  // Lipschitz constant: 2 for MSE, 1 for CE+softmax
const char* loss_kind_name(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

/// Append the per-sample loss to a tape and return the scalar node.
/// MSE requires labels in [0,1]; cross-entropy requires one-hot labels.
int append_loss(Tape& tape, LossKind kind, int pred, const Tensor& y);

// ---- batch helpers -----------------------------------------------------------

int batch_count(const Tensor& X);
Tensor batch_row(const Tensor& X, int i);   // drops the leading batch dim
Tensor forward_batch(const Network& net, const Tensor& X);  // (m, n)

/// Per-sample Jacobian of the outputs with respect to the flattened
/// parameters, one reverse pass per output coordinate. Shape (n, p).
Tensor jacobian(const Network& net, const Tensor& x);

/// Flattened gradient of the per-sample loss with respect to the parameters.
Tensor loss_grad_flat(const Network& net, const Tensor& x, const Tensor& y, LossKind kind);

// ---- empirical NTK -----------------------------------------------------------

struct NtkGram {
    Tensor matrix;                       // (mn, mn), symmetrized
    std::vector<double> eigenvalues;     // descending; tiny negatives clamped to 0
    std::vector<Tensor> eigenvectors;    // unit vectors matching eigenvalues
    double mean_eigenvalue = 0.0;
    int m = 0, n = 0;

    double trace() const;
};

/// Empirical NTK J J^T over the batch X with its spectrum. Output rows are
/// ordered sample-major: row i*n + j is output j of sample i.
NtkGram exact_ntk(const Network& net, const Tensor& X, int cap = 2000);

/// Trace norm via the Frobenius identity: sum over samples of the squared
/// Jacobian norm. Matches trace(exact_ntk) without forming the Gram matrix.
double trace_norm_exact(const Network& net, const Tensor& X, int cap = 2000);

// ---- trace-norm lower bounds ---------------------------------------------------

struct TraceEstimates {
    double exact = 0.0;        // sum_x ||J_x||_F^2
    double grad_sum = 0.0;     // gamma^{-1} sum_x ||grad_theta L_x||^2
    double batch_chain = 0.0;  // gamma^{-1} sum_j b_j ||batch-mean grad||^2 over a partition
    double minibatch = 0.0;    // ||mean grad over one uniformly sampled batch||^2
    double scaled = 0.0;       // m gamma^{-1} minibatch
    double gamma = 0.0;
    int batch_size = 0;
    bool truncated_last_batch = false;  // the partition's last batch was short
    std::vector<int> batch_indices;     // the sampled batch behind `minibatch`
};

TraceEstimates trace_lower_bounds(const Network& net, const Tensor& X, const Tensor& Y,
                                  LossKind kind, int batch_size, std::uint64_t seed);

/// The one-batch estimate alone (the search-time score): squared norm of the
/// batch-mean loss gradient at initialization.
double minibatch_trace(const Network& net, const Tensor& Xb, const Tensor& Yb, LossKind kind);

// ---- linearized dynamics -------------------------------------------------------

struct LossTrajectory {
    double eta = 0.0;
    std::vector<double> times;
    std::vector<double> losses;
    std::string source;  // "closed-form" | "simulated"
};

/// Closed-form MSE dynamics of the linearized model under gradient descent:
/// L_t = m^{-1} sum_i (1 - eta lambda_i)^{2t} (u_i^T Y)^2.
LossTrajectory mse_trajectory(const NtkGram& gram, const Tensor& Y, double eta,
                              const std::vector<double>& times);

/// Gradient-descent training of the first-order model
/// f_lin(theta) = f0 + J (theta - theta0) on 0.5 ||Y - f||^2, reporting
/// m^{-1} ||Y - f_t||^2 per step. The Jacobian (and hence the kernel) is fixed.
LossTrajectory linearized_train(const Network& net, const Tensor& X, const Tensor& Y, double eta,
                                int steps);

/// Leading term m n^2 (1 - eta mean_lambda)^q with q = 2t for t < 0.5 and 1
/// otherwise. Throws FeasibilityError when eta * mean_lambda >= 1. The
/// remainder epsilon depends on an unknown constant and is not evaluated.
double prop1_leading_bound(const NtkGram& gram, double eta, int m, int n, double t);

// ---- infinite-width oracle -----------------------------------------------------

struct AnalyticKernels {
    Tensor sigma;      // Sigma^{(L)}, (m, m)
    Tensor sigma_dot;  // dSigma^{(L)}, (m, m); all-ones for L == 1 by convention
    Tensor theta;      // limiting kernel, (m, m)
};

/// Arc-cosine recursion for fully connected ReLU chains with zero bias.
/// depth L counts dense layers; L == 1 gives x^T x' / n0.
AnalyticKernels analytic_relu_kernels(const Tensor& X, int depth);

/// Limiting kernel expanded over n_out outputs (block-diagonal structure).
NtkGram analytic_ntk_relu_mlp(const Tensor& X, int depth, int n_out = 1);

struct WidthDeviation {
    int width = 0;
    double deviation = 0.0;  // max |empirical - analytic| / max |analytic|, seed-averaged
};

std::vector<WidthDeviation> ntk_width_convergence(const std::vector<int>& widths, const Tensor& X,
                                                  int depth, int n_out,
                                                  const std::vector<std::uint64_t>& seeds);

/// sup_t ||f_t - f_lin_t||_2 over `steps` full-batch gradient-descent steps of
/// the network and its linearization, trained side by side on MSE.
double linearization_gap(int n0, int width, int depth, int n_out, const Tensor& X, const Tensor& Y,
                         double eta, int steps, std::uint64_t seed);

// ---- data-agnosticism bound ------------------------------------------------------

double prop2_bound(double gamma, int depth, int n0);  // n0^{-1} * 2 * D(gamma), Z <= 2

struct GapCheck {
    double gap = 0.0;    // (mn)^{-1} |tr(P) - tr(Q)|
    double bound = 0.0;
};

/// Normalized trace-norm gap of one wide ReLU chain across two sample sets,
/// against the universal distribution-shift bound. Inputs must satisfy
/// ||x||_2 <= 1.
GapCheck prop2_gap_check(const MlpChain& net, const Tensor& P, const Tensor& Q);

}  // namespace tracenas
