#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tracenas/archspace.hpp"
#include "tracenas/ntk.hpp"

namespace tracenas {

enum class NuPolicy { fixed, adaptive };
enum class DeltaRule { running_max, mean_norm };

struct PenaltyConfig {
    double mu = 1.0;
    NuPolicy nu_policy = NuPolicy::fixed;
    double nu0 = 0.0;  // <= 0 requests the presampling estimate (nu_fixed)
    double tau = 1.0;
    double xi = 1.0;
    int steps = 100;   // T
    int batch = 64;    // b
    LossKind loss = LossKind::mse;
    std::uint64_t seed = 0;
    DeltaRule delta_rule = DeltaRule::running_max;

    void validate() const;
};

/// Penalized score on a computed one-batch trace estimate:
/// R = tr - mu * max(0, tr - nu).
double objective_R(double trace_estimate, double mu, double nu);

/// Gradient of R with respect to the distribution logits through the
/// straight-through softmax path. `hard` selects the ST forward (one-hot
/// mixture weights); the relaxed forward (soft weights) is what the
/// finite-difference oracle checks. Returns the flat alpha-layout gradient and
/// writes the batch trace estimate to *trace_out when non-null.
std::vector<double> grad_alpha_R(const SuperNet& net, const GumbelSample& sample, const Tensor& Xb,
                                 const Tensor& Yb, LossKind loss, double mu, double nu, double tau,
                                 bool hard, double* trace_out = nullptr);

/// One-step update direction: (xi/T) sum_t G_t / max(||G_1||..||G_t||).
/// Zero-norm gradients contribute nothing; all-zero input is an error.
std::vector<double> delta_star(const std::vector<std::vector<double>>& grads, double xi,
                               DeltaRule rule = DeltaRule::running_max);

/// Presampled complexity level: mean one-batch trace estimate over
/// `num_samples` uniformly drawn architectures.
double nu_fixed(const CellSpace& space, const Tensor& X, const Tensor& Y, LossKind loss, int batch,
                std::uint64_t seed, int num_samples = 50);

/// nu_t = t^{-1} (nu0 + sum of the previous steps' trace estimates).
double nu_adaptive_step(double nu0, const std::vector<double>& trace_history, int t);

struct StepRecord {
    int step = 0;
    ArchId arch;
    double trace = 0.0;
    double R = 0.0;
    double nu = 0.0;
    double grad_norm = 0.0;
};

struct SearchLog {
    std::vector<StepRecord> steps;
    std::vector<double> delta;
    double delta_norm = 0.0;
    double running_max = 0.0;
    AlphaParams alpha_star;
    ArchId selected;
    long long selected_rank = 0;
    bool random_labels = false;  // search ran label-free (no labels supplied)
    double nu0_used = 0.0;
};

/// The full one-step search: T rounds of (batch, Gumbel draw, gradient at
/// alpha0), then alpha* = alpha0 + Delta* and per-node argmax selection.
/// Deterministic in config.seed. Y may be empty; uniform-random one-hot labels
/// are then drawn per sample (the score is label-agnostic).
SearchLog run_search(const CellSpace& space, const Tensor& X, const Tensor& Y,
                     const PenaltyConfig& config);

}  // namespace tracenas
