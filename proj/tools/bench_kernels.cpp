// Times the data-parallel sweeps in serial and OpenMP mode and checks that
// both modes produce identical bits.
#include <chrono>
#include <cstdio>
#include <cstring>

#include "tracenas/eval.hpp"
#include "tracenas/io.hpp"
#include "tracenas/ntk.hpp"
#include "tracenas/parallel.hpp"
#include "tracenas/rng.hpp"

using namespace tracenas;

namespace {

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

template <typename F>
double timed(F&& fn) {
    const double t0 = now_s();
    fn();
    return now_s() - t0;
}

}  // namespace

int main(int argc, char** argv) {
    int threads = 0;
    for (int i = 1; i < argc - 1; ++i)
        if (std::strcmp(argv[i], "--threads") == 0) threads = std::atoi(argv[i + 1]);
    if (threads > 0) set_max_threads(threads);

    const CellSpace space = micro_conv_space();
    const DatasetBundle ds =
        gen_dataset("image_patches", {{"m", 96}, {"h", 8}, {"w", 8}, {"classes", 4}}, 7);
    const ArchInstance inst(space, arch_unrank(space, 42), 7);

    std::printf("%-28s %10s %10s %8s %s\n", "kernel", "serial[s]", "openmp[s]", "speedup", "bitwise");

    struct Row {
        const char* name;
        double serial, parallel;
        bool same;
    };

    auto report = [](const Row& r) {
        std::printf("%-28s %10.3f %10.3f %8.2fx %s\n", r.name, r.serial, r.parallel,
                    r.serial / r.parallel, r.same ? "identical" : "DIFFERS");
    };

    {
        double a = 0.0, b = 0.0;
        set_exec_mode(ExecMode::serial);
        const double ts = timed([&] { a = trace_norm_exact(inst, ds.X); });
        set_exec_mode(ExecMode::openmp);
        const double tp = timed([&] { b = trace_norm_exact(inst, ds.X); });
        report({"trace_norm_exact (m=96)", ts, tp, a == b});
    }
    {
        NtkGram a, b;
        set_exec_mode(ExecMode::serial);
        const double ts = timed([&] { a = exact_ntk(inst, ds.X, 4000); });
        set_exec_mode(ExecMode::openmp);
        const double tp = timed([&] { b = exact_ntk(inst, ds.X, 4000); });
        bool same = true;
        for (std::size_t i = 0; i < a.matrix.size(); ++i) same &= a.matrix[i] == b.matrix[i];
        report({"exact_ntk (mn=384)", ts, tp, same});
    }
    {
        ScorerOptions opt;
        opt.batch = 32;
        RankedSpace a, b;
        set_exec_mode(ExecMode::serial);
        const double ts = timed([&] { a = rank_space(space, ds.X, ds.Y, {"approx"}, opt); });
        set_exec_mode(ExecMode::openmp);
        const double tp = timed([&] { b = rank_space(space, ds.X, ds.Y, {"approx"}, opt); });
        bool same = true;
        for (std::size_t i = 0; i < a.rows.size(); ++i)
            same &= a.rows[i].scores.at("approx") == b.rows[i].scores.at("approx");
        report({"rank_space approx (96 archs)", ts, tp, same});
    }
    {
        TraceEstimates a, b;
        set_exec_mode(ExecMode::serial);
        const double ts =
            timed([&] { a = trace_lower_bounds(inst, ds.X, ds.Y, LossKind::mse, 16, 3); });
        set_exec_mode(ExecMode::openmp);
        const double tp =
            timed([&] { b = trace_lower_bounds(inst, ds.X, ds.Y, LossKind::mse, 16, 3); });
        const bool same = a.exact == b.exact && a.grad_sum == b.grad_sum &&
                          a.batch_chain == b.batch_chain && a.minibatch == b.minibatch;
        report({"trace_lower_bounds (m=96)", ts, tp, same});
    }
    return 0;
}
