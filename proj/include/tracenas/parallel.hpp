#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "tracenas/tensor.hpp"

namespace tracenas {

enum class ExecMode { serial, openmp };

// Process-wide execution policy for the data-parallel sweeps (per-sample
// gradients, per-architecture scoring). Kernels must produce bit-identical
// results in both modes; sums always go through the pairwise reducers below.
ExecMode exec_mode();
void set_exec_mode(ExecMode m);
int max_threads();
void set_max_threads(int n);

/// Run fn(i) for i in [0, n). Iterations must be independent; any randomness
/// has to come from per-index streams so the schedule cannot be observed.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Fixed fan-in-2 tree sum over per-item values; the reduction order depends
/// only on n, so serial and parallel sweeps agree bit-for-bit.
double pairwise_sum(const double* v, std::size_t n);
double pairwise_sum(const std::vector<double>& v);

/// Pairwise tree sum of equally shaped tensors.
Tensor pairwise_sum(std::vector<Tensor> items);

}  // namespace tracenas
