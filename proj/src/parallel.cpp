#include "tracenas/parallel.hpp"

#include <atomic>
#include <exception>
#include <mutex>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tracenas {

namespace {
ExecMode g_mode = ExecMode::openmp;
int g_threads = 0;  // 0: library default
}  // namespace

ExecMode exec_mode() { return g_mode; }
void set_exec_mode(ExecMode m) { g_mode = m; }

int max_threads() {
#ifdef _OPENMP
    return g_threads > 0 ? g_threads : omp_get_max_threads();
#else
    return 1;
#endif
}

void set_max_threads(int n) { g_threads = n; }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
#ifdef _OPENMP
    if (g_mode == ExecMode::openmp && n > 1) {
        std::exception_ptr err;
        std::mutex err_mu;
#pragma omp parallel for schedule(dynamic) num_threads(max_threads())
        for (long long i = 0; i < static_cast<long long>(n); ++i) {
            try {
                fn(static_cast<std::size_t>(i));
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
            }
        }
        if (err) std::rethrow_exception(err);
        return;
    }
#endif
    for (std::size_t i = 0; i < n; ++i) fn(i);
}

double pairwise_sum(const double* v, std::size_t n) {
    if (n == 0) return 0.0;
    if (n == 1) return v[0];
    const std::size_t half = n / 2;
    return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

double pairwise_sum(const std::vector<double>& v) { return pairwise_sum(v.data(), v.size()); }

namespace {
Tensor pairwise_sum_range(std::vector<Tensor>& items, std::size_t lo, std::size_t hi) {
    if (hi - lo == 1) return std::move(items[lo]);
    const std::size_t mid = lo + (hi - lo) / 2;
    Tensor left = pairwise_sum_range(items, lo, mid);
    left += pairwise_sum_range(items, mid, hi);
    return left;
}
}  // namespace

Tensor pairwise_sum(std::vector<Tensor> items) {
    if (items.empty()) return Tensor();
    return pairwise_sum_range(items, 0, items.size());
}

}  // namespace tracenas
