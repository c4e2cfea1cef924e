#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tracenas/archspace.hpp"
#include "tracenas/ntk.hpp"

namespace tracenas {

struct CorrelationReport {
    double pearson = 0.0;
    double spearman = 0.0;
    double kendall = 0.0;  // tau-b
    int n = 0;
    bool degenerate = false;  // zero variance on either side
    std::string a_name, b_name;
};

CorrelationReport correlation(const std::vector<double>& a, const std::vector<double>& b);

// ---- ground-truth trainer -----------------------------------------------------

struct TrainResult {
    double test_error = 1.0;
    bool diverged = false;
};

/// Mini-batch SGD with softmax cross-entropy; returns the misclassification
/// rate on the held-out set. Divergence is reported as error 1.0 with a flag.
TrainResult sgd_train_eval(const CellSpace& space, const ArchId& arch, const Tensor& Xtr,
                           const Tensor& Ytr, const Tensor& Xte, const Tensor& Yte, int epochs,
                           double lr, int batch, std::uint64_t seed);

// ---- exhaustive space scoring ----------------------------------------------------

struct ScorerOptions {
    int batch = 64;                 // mini-batch for the approximate score
    LossKind loss = LossKind::mse;
    std::uint64_t seed = 0;
    long long cap = 100000;
    int exact_cap = 2000;
};

struct ArchScores {
    long long rank = 0;
    ArchId arch;
    std::map<std::string, double> scores;
};

struct RankedSpace {
    std::vector<ArchScores> rows;
    std::vector<double> column(const std::string& key) const;
};

/// Score every architecture with the requested scorers:
/// "exact" (trace norm), "approx" (scaled one-batch estimate), "params",
/// "snip", "synflow". Weight seeds are derived per architecture rank, so
/// repeated sweeps and different scorers see identical instances.
RankedSpace rank_space(const CellSpace& space, const Tensor& X, const Tensor& Y,
                       const std::vector<std::string>& scorers, const ScorerOptions& opt);

/// Attach cached ground-truth errors (by rank) as a "test_error" column.
void attach_errors(RankedSpace& ranked, const std::map<long long, double>& errors);

// ---- agnosticism experiments -------------------------------------------------------

enum class AgnosticMode { random_labels, random_data };

/// Correlates the approximate score across the space under the true inputs
/// versus randomized labels (permuted rows) or randomized data (standard
/// normal, renormalized to max row norm 1), sharing weight seeds and batch.
CorrelationReport agnostic_experiment(const CellSpace& space, const Tensor& X, const Tensor& Y,
                                      AgnosticMode mode, const ScorerOptions& opt);

// ---- training-free baselines ---------------------------------------------------------

/// SNIP saliency: sum over weights of |dL/dw * w| for the batch-mean loss.
double baseline_snip(const Network& net, const Tensor& Xb, const Tensor& Yb, LossKind kind);

/// SynFlow: all-ones input through the |theta| network, score
/// sum over weights of |d(sum of outputs)/dw * w|.
double baseline_synflow(const Network& net);

// ---- complexity/performance trade-off ---------------------------------------------------

struct TradeoffBin {
    double score_lo = 0.0, score_hi = 0.0;
    double mean_score = 0.0;
    double mean_error = 0.0;
    double std_error = 0.0;
    int count = 0;
};

struct TradeoffCurve {
    std::vector<TradeoffBin> bins;
    int argmin_bin = -1;
    bool merged_bins = false;  // small bins were merged into neighbours
};

/// Equal-count bins over `score_key`, mean/std of `error_key` per bin.
TradeoffCurve tradeoff_curve(const RankedSpace& ranked, int bins,
                             const std::string& score_key = "approx",
                             const std::string& error_key = "test_error");

}  // namespace tracenas
