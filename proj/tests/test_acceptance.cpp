// End-to-end acceptance suite: one pass/fail line per criterion, nonzero exit
// when any fails. Training results are cached under --cache-dir and verified
// on reuse, so repeated runs are fast.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracenas/eval.hpp"
#include "tracenas/io.hpp"
#include "tracenas/ntk.hpp"
#include "tracenas/parallel.hpp"
#include "tracenas/rng.hpp"
#include "tracenas/search.hpp"

using namespace tracenas;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Checker {
    bool ok = true;
    std::string detail;

    void require(bool cond, const std::string& msg) {
        if (!cond && ok) {
            ok = false;
            detail = msg;
        }
    }
};

int g_failures = 0;

void run_criterion(int index, const std::string& name, const std::function<void(Checker&)>& fn) {
    Checker c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        fn(c);
    } catch (const std::exception& e) {
        c.require(false, std::string("exception: ") + e.what());
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] criterion %2d: %s (%.1fs)%s%s\n", c.ok ? "PASS" : "FAIL", index, name.c_str(),
                wall, c.ok ? "" : " -- ", c.ok ? "" : c.detail.c_str());
    std::fflush(stdout);
    if (!c.ok) ++g_failures;
}

// ---- shared fixtures --------------------------------------------------------

CellSpace vec_space() { return micro_vec_space(4); }
CellSpace conv_space() { return micro_conv_space(4, 4, 8, 4, 8); }

DatasetBundle bench_data() {
    return gen_dataset(
        "image_patches",
        {{"m", 640}, {"h", 8}, {"w", 8}, {"classes", 4}, {"style", 1}, {"noise", 0.6}}, 14);
}

void bench_split(const DatasetBundle& ds, Tensor* Xtr, Tensor* Ytr, Tensor* Xte, Tensor* Yte) {
    const std::size_t xs = ds.X.size() / static_cast<size_t>(ds.m);
    const std::size_t ys = ds.Y.size() / static_cast<size_t>(ds.m);
    std::vector<int> tr, te;
    for (int i = 0; i < ds.m; ++i) (i % 4 == 3 ? te : tr).push_back(i);
    auto take = [&](const std::vector<int>& rows, const Tensor& src, std::size_t stride,
                    std::vector<int> sample_shape) {
        sample_shape.insert(sample_shape.begin(), static_cast<int>(rows.size()));
        Tensor out(sample_shape);
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy(src.data() + static_cast<size_t>(rows[i]) * stride,
                      src.data() + static_cast<size_t>(rows[i] + 1) * stride,
                      out.data() + i * stride);
        return out;
    };
    *Xtr = take(tr, ds.X, xs, {ds.input.c, ds.input.h, ds.input.w});
    *Ytr = take(tr, ds.Y, ys, {ds.classes});
    *Xte = take(te, ds.X, xs, {ds.input.c, ds.input.h, ds.input.w});
    *Yte = take(te, ds.Y, ys, {ds.classes});
}

constexpr int kTrainEpochs = 40;
constexpr double kTrainLr = 64.0;
constexpr int kTrainBatch = 32;
constexpr std::uint64_t kTrainSeed = 3;

// ground-truth cache: build once, verify config on reuse
std::vector<double> bench_errors(const std::string& cache_dir, double* build_seconds) {
    const CellSpace space = conv_space();
    const auto archs = enumerate(space);
    const std::string path = cache_dir + "/errors.jsonl";
    *build_seconds = 0.0;
    if (fs::exists(path)) {
        std::vector<double> err(archs.size(), -1.0);
        std::istringstream in(read_file(path));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json rec = json::parse(line);
            if (rec.at("epochs").get<int>() != kTrainEpochs ||
                rec.at("lr").get<double>() != kTrainLr ||
                rec.at("seed").get<std::uint64_t>() != kTrainSeed)
                throw UsageError("stale ground-truth cache (different configuration): " + path);
            err[static_cast<size_t>(rec.at("rank").get<long long>())] =
                rec.at("test_error").get<double>();
        }
        for (double e : err)
            if (e < 0.0) throw UsageError("ground-truth cache is incomplete: " + path);
        return err;
    }
    const DatasetBundle ds = bench_data();
    Tensor Xtr, Ytr, Xte, Yte;
    bench_split(ds, &Xtr, &Ytr, &Xte, &Yte);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> err(archs.size());
    parallel_for(archs.size(), [&](std::size_t i) {
        err[i] = sgd_train_eval(space, archs[i], Xtr, Ytr, Xte, Yte, kTrainEpochs, kTrainLr,
                                kTrainBatch, mix64(kTrainSeed, 0x7472ULL, i))
                     .test_error;
    });
    *build_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fs::create_directories(cache_dir);
    std::ostringstream lines;
    for (std::size_t i = 0; i < archs.size(); ++i)
        lines << json{{"rank", static_cast<long long>(i)},
                      {"arch", archs[i].to_string()},
                      {"test_error", err[i]},
                      {"epochs", kTrainEpochs},
                      {"lr", kTrainLr},
                      {"seed", kTrainSeed}}
                     .dump()
              << "\n";
    atomic_write(path, lines.str());
    return err;
}

Tensor unit_rows(int m, int n0, std::uint64_t seed) {
    Rng rng(seed);
    Tensor X({m, n0});
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int q = 0; q < n0; ++q) {
            const double v = rng.normal();
            X[static_cast<size_t>(i) * n0 + q] = v;
            s += v * v;
        }
        const double inv = 1.0 / std::sqrt(s);
        for (int q = 0; q < n0; ++q) X[static_cast<size_t>(i) * n0 + q] *= inv;
    }
    return X;
}

}  // namespace

int main(int argc, char** argv) {
    std::string cache_dir = "acceptance_cache";
    for (int i = 1; i < argc - 1; ++i)
        if (std::string(argv[i]) == "--cache-dir") cache_dir = argv[i + 1];

    // 1. trace identity over both catalogs
    run_criterion(1, "trace identity, 50 architectures across both catalogs", [&](Checker& c) {
        const DatasetBundle vec = gen_dataset("blobs", {{"m", 16}, {"n0", 16}, {"classes", 4}}, 21);
        const DatasetBundle img = gen_dataset(
            "image_patches",
            {{"m", 16}, {"h", 8}, {"w", 8}, {"classes", 4}, {"style", 1}, {"noise", 0.6}}, 22);
        int checked = 0;
        for (int half = 0; half < 2; ++half) {
            const CellSpace space = half == 0 ? vec_space() : conv_space();
            const Tensor& X = half == 0 ? vec.X : img.X;
            const auto archs = enumerate(space);
            Rng rng(mix64(31, static_cast<std::uint64_t>(half)));
            for (int t = 0; t < 25; ++t) {
                const ArchId arch = archs[rng.below(archs.size())];
                const ArchInstance inst(space, arch, mix64(100, static_cast<std::uint64_t>(t), half));
                const NtkGram gram = exact_ntk(inst, X);
                const double direct = trace_norm_exact(inst, X);
                const double denom = std::max(std::abs(gram.trace()), 1e-12);
                c.require(std::abs(gram.trace() - direct) / denom < 1e-8,
                          "identity violated at arch " + arch.to_string());
                ++checked;
            }
        }
        c.require(checked == 50, "architecture count");
    });

    // 2. inequality chain
    run_criterion(2, "trace-norm inequality chain, 100 architectures x {mse, ce}", [&](Checker& c) {
        const DatasetBundle vec = gen_dataset("blobs", {{"m", 32}, {"n0", 16}, {"classes", 4}}, 23);
        const DatasetBundle img = gen_dataset(
            "image_patches",
            {{"m", 32}, {"h", 8}, {"w", 8}, {"classes", 4}, {"style", 1}, {"noise", 0.6}}, 24);
        int violations = 0, checked = 0;
        for (int half = 0; half < 2; ++half) {
            const CellSpace space = half == 0 ? vec_space() : conv_space();
            const DatasetBundle& ds = half == 0 ? vec : img;
            const auto archs = enumerate(space);
            Rng rng(mix64(37, static_cast<std::uint64_t>(half)));
            for (int t = 0; t < 50; ++t) {
                const ArchId arch = archs[rng.below(archs.size())];
                const ArchInstance inst(space, arch, mix64(200, static_cast<std::uint64_t>(t), half));
                for (LossKind kind : {LossKind::mse, LossKind::cross_entropy_softmax}) {
                    const TraceEstimates est =
                        trace_lower_bounds(inst, ds.X, ds.Y, kind, 8,
                                           mix64(67, static_cast<std::uint64_t>(t), half));
                    const double slack = 1e-8 * std::max(1.0, est.exact);
                    if (!(est.exact >= est.grad_sum - slack &&
                          est.grad_sum >= est.batch_chain - slack))
                        ++violations;
                    c.require(est.gamma == (kind == LossKind::mse ? 2.0 : 1.0), "gamma pin");
                }
                ++checked;
            }
        }
        c.require(checked == 100, "architecture count");
        c.require(violations == 0, std::to_string(violations) + " chain violations");
    });

    // shared wide-MLP fixture for 3 and 4
    const int c34_m = 16, c34_n = 4, c34_n0 = 16;
    const MlpChain wide_net(c34_n0, 512, 2, c34_n, 77);
    const Tensor wideX = unit_rows(c34_m, c34_n0, 41);
    Tensor wideY({c34_m * c34_n});
    {
        Rng rng(43);
        for (std::size_t q = 0; q < wideY.size(); ++q) wideY[q] = rng.uniform();
    }

    // 3. closed-form dynamics vs simulated linearized training
    run_criterion(3, "closed-form dynamics match linearized training within 5%", [&](Checker& c) {
        const NtkGram gram = exact_ntk(wide_net, wideX);
        const Tensor f0 = forward_batch(wide_net, wideX);
        Tensor resid = wideY;
        for (std::size_t q = 0; q < resid.size(); ++q) resid[q] -= f0[q];
        const double eta = 0.5 / gram.eigenvalues[0];
        const LossTrajectory sim = linearized_train(wide_net, wideX, wideY, eta, 100);
        const LossTrajectory closed = mse_trajectory(gram, resid, eta, {10.0, 50.0, 100.0});
        for (std::size_t i = 0; i < closed.times.size(); ++i) {
            const double a = closed.losses[i];
            const double b = sim.losses[static_cast<size_t>(closed.times[i])];
            c.require(std::abs(a - b) <= 0.05 * std::max(std::abs(a), 1e-12),
                      "t=" + std::to_string(closed.times[i]) + ": closed " + std::to_string(a) +
                          " vs sim " + std::to_string(b));
        }
    });

    // 4. leading bound of the expected-loss proposition
    run_criterion(4, "leading bound holds with 0.1 slack; feasibility signal exact", [&](Checker& c) {
        const NtkGram gram = exact_ntk(wide_net, wideX);
        const double eta = 0.5 / gram.eigenvalues[0];
        const LossTrajectory sim = linearized_train(wide_net, wideX, wideY, eta, 10);
        for (double t : {1.0, 10.0}) {
            const double bound = prop1_leading_bound(gram, eta, c34_m, c34_n, t);
            const double loss = sim.losses[static_cast<size_t>(t)];
            c.require(loss <= bound + 0.1, "t=" + std::to_string(t) + ": loss " +
                                               std::to_string(loss) + " above " +
                                               std::to_string(bound) + " + 0.1");
        }
        bool raised = false;
        try {
            prop1_leading_bound(gram, 1.0 / gram.mean_eigenvalue, c34_m, c34_n, 1.0);
        } catch (const FeasibilityError&) {
            raised = true;
        }
        c.require(raised, "no feasibility error at eta*mean == 1");
        try {
            prop1_leading_bound(gram, 0.999 / gram.mean_eigenvalue, c34_m, c34_n, 1.0);
        } catch (const FeasibilityError&) {
            c.require(false, "feasibility error below the threshold");
        }
    });

    // 5. convergence to the analytic kernel
    run_criterion(5, "empirical kernel converges to the analytic one across widths", [&](Checker& c) {
        const Tensor X = unit_rows(8, 16, 47);
        const auto devs = ntk_width_convergence({16, 64, 256, 1024}, X, 2, 1, {1, 2, 3, 4, 5});
        int inversions = 0;
        for (std::size_t i = 1; i < devs.size(); ++i)
            if (devs[i].deviation > devs[i - 1].deviation) ++inversions;
        c.require(inversions <= 1, "deviation sequence has " + std::to_string(inversions) +
                                       " inversions");
        c.require(devs.back().deviation < 0.15,
                  "width-1024 deviation " + std::to_string(devs.back().deviation));
    });

    // 6. linearization gap shrinks with width
    run_criterion(6, "sup-norm linearization gap shrinks from width 64 to 1024", [&](Checker& c) {
        const int m = 8, n0 = 16;
        const Tensor X = unit_rows(m, n0, 53);
        Tensor Y({m});
        Rng rng(59);
        for (std::size_t q = 0; q < Y.size(); ++q) Y[q] = rng.uniform();
        const NtkGram limit = analytic_ntk_relu_mlp(X, 2, 1);
        const double eta = 0.3 / limit.eigenvalues[0];
        double mean64 = 0.0, mean1024 = 0.0;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            mean64 += linearization_gap(n0, 64, 2, 1, X, Y, eta, 100, seed) / 5.0;
            mean1024 += linearization_gap(n0, 1024, 2, 1, X, Y, eta, 100, seed) / 5.0;
        }
        c.require(mean1024 < mean64, "gap did not shrink: " + std::to_string(mean64) + " -> " +
                                         std::to_string(mean1024));
    });

    // shared conv-space scoring fixture for 7 and 11
    const DatasetBundle score_ds = gen_dataset(
        "image_patches",
        {{"m", 128}, {"h", 8}, {"w", 8}, {"classes", 4}, {"style", 1}, {"noise", 0.6}}, 11);

    // 7. approximation quality
    run_criterion(7, "approx-vs-exact Pearson >= 0.6 at b=64; batch-size trend", [&](Checker& c) {
        ScorerOptions opt;
        opt.seed = mix64(11, 1);
        opt.batch = 64;
        const RankedSpace exact = rank_space(conv_space(), score_ds.X, score_ds.Y, {"exact"}, opt);
        auto rho_at = [&](int b) {
            ScorerOptions o2 = opt;
            o2.batch = b;
            const RankedSpace approx = rank_space(conv_space(), score_ds.X, score_ds.Y, {"approx"}, o2);
            return correlation(approx.column("approx"), exact.column("exact")).pearson;
        };
        const double rho64 = rho_at(64), rho4 = rho_at(4);
        c.require(rho64 >= 0.6, "rho(approx@64, exact) = " + std::to_string(rho64));
        c.require(rho64 >= rho4 - 0.05,
                  "rho@64 " + std::to_string(rho64) + " below rho@4 " + std::to_string(rho4) +
                      " - 0.05");
    });

    // 8. label- and data-agnostic scores
    run_criterion(8, "score survives label and data randomization", [&](Checker& c) {
        const CellSpace space = micro_conv_space(4, 1, 10, 4, 8);
        const DatasetBundle ds = gen_dataset(
            "image_patches",
            {{"m", 128}, {"h", 10}, {"w", 10}, {"c", 1}, {"classes", 4}, {"noise", 0.4}}, 42);
        ScorerOptions opt;
        opt.batch = 64;
        opt.seed = mix64(42, 7);
        const CorrelationReport lab =
            agnostic_experiment(space, ds.X, ds.Y, AgnosticMode::random_labels, opt);
        c.require(!lab.degenerate && lab.pearson >= 0.9,
                  "label randomization rho = " + std::to_string(lab.pearson));
        const CorrelationReport dat =
            agnostic_experiment(space, ds.X, ds.Y, AgnosticMode::random_data, opt);
        c.require(!dat.degenerate && dat.pearson >= 0.8,
                  "data randomization rho = " + std::to_string(dat.pearson));
    });

    // 9. one-sided distribution-shift bound
    run_criterion(9, "normalized trace gap within 2L/n0 in 20/20 wide-chain trials", [&](Checker& c) {
        const int n0 = 64, m = 16, L = 3;
        for (int trial = 0; trial < 20; ++trial) {
            const std::uint64_t s = mix64(61, static_cast<std::uint64_t>(trial));
            const DatasetBundle p =
                gen_dataset("gaussian_noise", {{"m", m}, {"n0", n0}, {"classes", 2}}, s);
            const DatasetBundle q = gen_dataset(
                "blobs", {{"m", m}, {"n0", n0}, {"classes", 2}, {"noise", 0.05}}, mix64(s, 1));
            const MlpChain net(n0, 512, L, 1, mix64(s, 2));
            const GapCheck chk = prop2_gap_check(net, p.X, q.X);
            c.require(chk.bound == 2.0 * L / n0, "bound formula");
            c.require(chk.gap <= chk.bound, "trial " + std::to_string(trial) + ": gap " +
                                                std::to_string(chk.gap) + " > " +
                                                std::to_string(chk.bound));
        }
    });

    // 10 + 11 + 12 share the trained benchmark
    double build_seconds = 0.0;
    std::vector<double> errors;
    std::vector<SearchLog> search_logs;

    run_criterion(10, "search lands in the top error quartile on >= 4 of 5 seeds", [&](Checker& c) {
        errors = bench_errors(cache_dir, &build_seconds);
        if (build_seconds > 0.0)
            c.require(build_seconds < 1800.0,
                      "cache build took " + std::to_string(build_seconds) + "s");
        std::vector<double> sorted = errors;
        std::sort(sorted.begin(), sorted.end());
        const double q25 = sorted[errors.size() / 4 - 1];

        const DatasetBundle ds = bench_data();
        Tensor Xtr, Ytr, Xte, Yte;
        bench_split(ds, &Xtr, &Ytr, &Xte, &Yte);
        int hits = 0;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            PenaltyConfig cfg;
            cfg.mu = 2.0;
            cfg.steps = 100;
            cfg.batch = 64;
            cfg.loss = LossKind::mse;
            cfg.seed = seed;
            cfg.nu_policy = NuPolicy::adaptive;  // nu0 presampled automatically
            const auto t0 = std::chrono::steady_clock::now();
            const SearchLog log = run_search(conv_space(), Xtr, Ytr, cfg);
            const double wall =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            c.require(wall < 30.0, "search took " + std::to_string(wall) + "s");
            if (errors[static_cast<size_t>(log.selected_rank)] <= q25) ++hits;
            search_logs.push_back(log);
        }
        c.require(hits >= 4, "only " + std::to_string(hits) + "/5 seeds in the top quartile");
    });

    run_criterion(11, "error-vs-score curve has an interior argmin at 4 bins", [&](Checker& c) {
        c.require(!errors.empty(), "benchmark unavailable");
        if (errors.empty()) return;
        ScorerOptions opt;
        opt.seed = mix64(14, 1);
        opt.batch = 64;
        const DatasetBundle ds = bench_data();
        Tensor Xtr, Ytr, Xte, Yte;
        bench_split(ds, &Xtr, &Ytr, &Xte, &Yte);
        RankedSpace ranked = rank_space(conv_space(), Xtr, Ytr, {"approx"}, opt);
        std::map<long long, double> errmap;
        for (std::size_t i = 0; i < errors.size(); ++i)
            errmap[static_cast<long long>(i)] = errors[i];
        attach_errors(ranked, errmap);
        const TradeoffCurve curve = tradeoff_curve(ranked, 4);
        c.require(!curve.merged_bins, "bins merged");
        int total = 0;
        for (const auto& b : curve.bins) total += b.count;
        c.require(total == 96, "bin counts");
        c.require(curve.argmin_bin > 0 && curve.argmin_bin < 3,
                  "argmin bin " + std::to_string(curve.argmin_bin) + " not interior");
    });

    run_criterion(12, "optimizer unit contracts and determinism", [&](Checker& c) {
        // update-direction hand example
        const auto d = delta_star({{1.0, 0.0}, {0.0, 2.0}}, 1.0);
        c.require(std::abs(d[0] - 0.5) < 1e-12 && std::abs(d[1] - 0.5) < 1e-12,
                  "two-step update example");
        // adaptive-cap scripted history
        const std::vector<double> hist{10.0, 20.0, 30.0};
        c.require(std::abs(nu_adaptive_step(100.0, hist, 4) - 40.0) < 1e-12, "adaptive nu formula");
        c.require(std::abs(nu_adaptive_step(100.0, hist, 1) - 100.0) < 1e-12, "nu at t=1");
        // xi ball on every recorded search
        for (const SearchLog& log : search_logs)
            c.require(log.delta_norm <= 1.0 + 1e-9,
                      "delta norm " + std::to_string(log.delta_norm));
        c.require(!search_logs.empty(), "no recorded searches");
        // determinism: identical config twice, bit-identical logs
        const DatasetBundle ds =
            gen_dataset("blobs", {{"m", 32}, {"n0", 16}, {"classes", 4}}, 71);
        PenaltyConfig cfg;
        cfg.mu = 1.0;
        cfg.steps = 10;
        cfg.batch = 8;
        cfg.seed = 9;
        const CellSpace space = vec_space();
        const SearchLog a = run_search(space, ds.X, ds.Y, cfg);
        const SearchLog b = run_search(space, ds.X, ds.Y, cfg);
        c.require(a.selected == b.selected && a.delta == b.delta, "search not deterministic");
        for (std::size_t i = 0; i < a.steps.size(); ++i)
            c.require(a.steps[i].trace == b.steps[i].trace &&
                          a.steps[i].grad_norm == b.steps[i].grad_norm,
                      "step log not deterministic");
    });

    if (g_failures == 0) {
        std::printf("acceptance: all 12 criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criteria FAILED\n", g_failures);
    return 1;
}
