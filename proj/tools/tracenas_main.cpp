#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

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

struct SuiteFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& what) {
    if (!ok) throw SuiteFailure(what);
}

json arch_json(const CellSpace& space, const ArchId& arch) {
    return json{{"arch", arch.to_string()}, {"rank", arch_rank(space, arch)}};
}

PenaltyConfig config_from_json(const json& j) {
    PenaltyConfig cfg;
    for (const auto& [key, val] : j.items()) {
        if (key == "mu") cfg.mu = val.get<double>();
        else if (key == "nu_policy") cfg.nu_policy = val.get<std::string>() == "adaptive" ? NuPolicy::adaptive : NuPolicy::fixed;
        else if (key == "nu0") cfg.nu0 = val.get<double>();
        else if (key == "tau") cfg.tau = val.get<double>();
        else if (key == "xi") cfg.xi = val.get<double>();
        else if (key == "steps") cfg.steps = val.get<int>();
        else if (key == "batch") cfg.batch = val.get<int>();
        else if (key == "loss") cfg.loss = parse_loss_kind(val.get<std::string>());
        else if (key == "seed") cfg.seed = val.get<std::uint64_t>();
        else if (key == "delta_rule") cfg.delta_rule = val.get<std::string>() == "mean_norm" ? DeltaRule::mean_norm : DeltaRule::running_max;
        else throw UsageError("unknown config key: " + key);
    }
    return cfg;
}

json config_to_json(const PenaltyConfig& cfg) {
    return json{{"mu", cfg.mu},
                {"nu_policy", cfg.nu_policy == NuPolicy::adaptive ? "adaptive" : "fixed"},
                {"nu0", cfg.nu0},
                {"tau", cfg.tau},
                {"xi", cfg.xi},
                {"steps", cfg.steps},
                {"batch", cfg.batch},
                {"loss", loss_kind_name(cfg.loss)},
                {"seed", cfg.seed},
                {"delta_rule", cfg.delta_rule == DeltaRule::mean_norm ? "mean_norm" : "running_max"}};
}

// deterministic split: every k-th sample to test, classes stay balanced
void split_dataset(const DatasetBundle& ds, double test_frac, Tensor* Xtr, Tensor* Ytr, Tensor* Xte,
                   Tensor* Yte) {
    const int m = ds.m;
    const int period = std::max(2, static_cast<int>(std::lround(1.0 / std::max(0.01, test_frac))));
    std::vector<int> train_rows, test_rows;
    for (int i = 0; i < m; ++i) (i % period == period - 1 ? test_rows : train_rows).push_back(i);
    auto take = [&](const std::vector<int>& rows, const Tensor& src) {
        std::vector<int> shape(src.shape().begin() + 1, src.shape().end());
        const std::size_t stride = shape_numel(shape);
        shape.insert(shape.begin(), static_cast<int>(rows.size()));
        Tensor out(shape);
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy(src.data() + static_cast<size_t>(rows[i]) * stride,
                      src.data() + static_cast<size_t>(rows[i] + 1) * stride,
                      out.data() + i * stride);
        return out;
    };
    *Xtr = take(train_rows, ds.X);
    *Ytr = take(train_rows, ds.Y);
    *Xte = take(test_rows, ds.X);
    *Yte = take(test_rows, ds.Y);
}

// ---- verify suites ---------------------------------------------------------

void suite_ntk(std::uint64_t seed) {
    const CellSpace space = micro_vec_space();
    const DatasetBundle ds = gen_dataset("blobs", {{"m", 16}, {"n0", 16}, {"classes", 4}}, seed);
    const auto archs = enumerate(space);
    Rng rng(mix64(seed, 1));
    for (int trial = 0; trial < 50; ++trial) {
        const ArchId arch = archs[rng.below(archs.size())];
        const ArchInstance inst(space, arch, mix64(seed, 2, static_cast<std::uint64_t>(trial)));
        const NtkGram gram = exact_ntk(inst, ds.X);
        const int mn = gram.matrix.dim(0);
        for (int r = 0; r < mn; ++r)
            for (int c = 0; c < r; ++c)
                expect(std::abs(gram.matrix[static_cast<size_t>(r) * mn + c] -
                                gram.matrix[static_cast<size_t>(c) * mn + r]) < 1e-10,
                       "gram not symmetric");
        for (double lam : gram.eigenvalues) expect(lam >= -1e-8, "negative eigenvalue");
        const double tr_gram = gram.trace();
        const double tr_direct = trace_norm_exact(inst, ds.X);
        const double denom = std::max(1e-12, std::abs(tr_gram));
        expect(std::abs(tr_gram - tr_direct) / denom < 1e-8,
               "two-path trace identity violated: " + std::to_string(tr_gram) + " vs " +
                   std::to_string(tr_direct));
    }
    std::cout << "ntk suite: 50 instances, symmetry/PSD/trace identity ok\n";
}

void suite_chain(std::uint64_t seed) {
    const CellSpace space = micro_vec_space();
    const DatasetBundle ds = gen_dataset("blobs", {{"m", 32}, {"n0", 16}, {"classes", 4}}, seed);
    const auto archs = enumerate(space);
    Rng rng(mix64(seed, 3));
    for (int trial = 0; trial < 100; ++trial) {
        const ArchId arch = archs[rng.below(archs.size())];
        const ArchInstance inst(space, arch, mix64(seed, 4, static_cast<std::uint64_t>(trial)));
        for (LossKind kind : {LossKind::mse, LossKind::cross_entropy_softmax}) {
            const TraceEstimates est = trace_lower_bounds(inst, ds.X, ds.Y, kind, 8,
                                                          mix64(seed, 5, static_cast<std::uint64_t>(trial)));
            const double slack = 1e-8 * std::max(1.0, est.exact);
            expect(est.exact >= est.grad_sum - slack, "exact >= grad_sum violated");
            expect(est.grad_sum >= est.batch_chain - slack, "grad_sum >= batch chain violated");
            expect(est.minibatch >= 0 && est.scaled >= 0, "negative estimate");
        }
    }
    std::cout << "chain suite: 100 architectures x {mse, ce} ok\n";
}

void suite_dynamics(std::uint64_t seed) {
    const int m = 16, n = 4, n0 = 16;
    const DatasetBundle ds = gen_dataset("blobs", {{"m", m}, {"n0", n0}, {"classes", n}}, seed);
    const MlpChain net(n0, 512, 2, n, mix64(seed, 6));
    const NtkGram gram = exact_ntk(net, ds.X);
    Tensor resid({m * n});
    const Tensor f0 = forward_batch(net, ds.X);
    for (int i = 0; i < m * n; ++i) resid[static_cast<size_t>(i)] = ds.Y[static_cast<size_t>(i)] - f0[static_cast<size_t>(i)];
    const double eta = 0.5 / gram.eigenvalues[0];
    const LossTrajectory sim = linearized_train(net, ds.X, Tensor({m * n}, std::vector<double>(ds.Y.data(), ds.Y.data() + m * n)), eta, 100);
    const LossTrajectory closed = mse_trajectory(gram, resid, eta, {10, 50, 100});
    for (std::size_t i = 0; i < closed.times.size(); ++i) {
        const double a = closed.losses[i];
        const double b = sim.losses[static_cast<size_t>(closed.times[i])];
        expect(std::abs(a - b) / std::max(1e-12, std::abs(a)) < 0.05,
               "closed form vs simulation diverged at t=" + std::to_string(closed.times[i]));
    }
    bool raised = false;
    try {
        prop1_leading_bound(gram, 2.0 / gram.mean_eigenvalue, m, n, 1.0);
    } catch (const FeasibilityError&) {
        raised = true;
    }
    expect(raised, "feasibility error not raised for eta*mean >= 1");
    expect(prop1_leading_bound(gram, eta, m, n, 1.0) > 0, "leading bound not positive");
    std::cout << "dynamics suite: closed form within 5% of simulation; feasibility signal ok\n";
}

void suite_agnostic(std::uint64_t seed) {
    // 10x10 inputs with wide noise: the input dimension and distribution
    // closeness that the data-agnosticism bound asks for
    const CellSpace space = micro_conv_space(4, 1, 10, 4, 8);
    const DatasetBundle ds = gen_dataset(
        "image_patches", {{"m", 128}, {"h", 10}, {"w", 10}, {"c", 1}, {"classes", 4}, {"noise", 0.4}},
        seed);
    ScorerOptions opt;
    opt.batch = 64;
    opt.seed = mix64(seed, 7);
    const CorrelationReport labels = agnostic_experiment(space, ds.X, ds.Y, AgnosticMode::random_labels, opt);
    expect(!labels.degenerate && labels.pearson >= 0.9,
           "label-agnostic correlation " + std::to_string(labels.pearson) + " < 0.9");
    const CorrelationReport data = agnostic_experiment(space, ds.X, ds.Y, AgnosticMode::random_data, opt);
    expect(!data.degenerate && data.pearson >= 0.8,
           "data-agnostic correlation " + std::to_string(data.pearson) + " < 0.8");
    std::cout << "agnostic suite: labels rho=" << labels.pearson << " data rho=" << data.pearson
              << " ok\n";
}

void suite_prop2(std::uint64_t seed) {
    const int n0 = 64, m = 16, L = 3;
    for (int trial = 0; trial < 20; ++trial) {
        const std::uint64_t s = mix64(seed, 8, static_cast<std::uint64_t>(trial));
        DatasetBundle p = gen_dataset("gaussian_noise", {{"m", m}, {"n0", n0}, {"classes", 2}}, s);
        DatasetBundle q = gen_dataset("blobs", {{"m", m}, {"n0", n0}, {"classes", 2}, {"noise", 0.05}},
                                      mix64(s, 9));
        const MlpChain net(n0, 512, L, 1, mix64(s, 10));
        const GapCheck chk = prop2_gap_check(net, p.X, q.X);
        expect(chk.gap <= chk.bound,
               "trial " + std::to_string(trial) + ": gap " + std::to_string(chk.gap) +
                   " exceeds bound " + std::to_string(chk.bound));
    }
    std::cout << "prop2 suite: 20/20 trials within the bound " << prop2_bound(1.0, L, n0) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"training-free architecture scoring and search on NTK trace norms"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "bound worker parallelism (0 = hardware default)");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
    std::string gen_kind = "blobs", gen_out;
    std::uint64_t gen_seed = 0;
    std::map<std::string, double> gen_params;
    int gm = 256, gn0 = 16, gclasses = 4, gh = 8, gw = 8, gc = 1;
    double gnoise = -1.0;
    gen->add_option("--kind", gen_kind, "blobs | spirals | gaussian_noise | image_patches");
    gen->add_option("--out", gen_out)->required();
    gen->add_option("--seed", gen_seed);
    gen->add_option("--m", gm);
    gen->add_option("--n0", gn0);
    gen->add_option("--classes", gclasses);
    gen->add_option("--noise", gnoise);
    gen->add_option("--height", gh);
    gen->add_option("--width", gw);
    gen->add_option("--channels", gc);

    // enumerate
    auto* enu = app.add_subcommand("enumerate", "count and list a space canonically");
    std::string enu_space;
    long long enu_cap = 100000;
    bool enu_quiet = false;
    enu->add_option("--space", enu_space)->required();
    enu->add_option("--cap", enu_cap);
    enu->add_flag("--count-only", enu_quiet, "print only the count");

    // score
    auto* sco = app.add_subcommand("score", "score one architecture");
    std::string sco_space, sco_arch, sco_data, sco_method = "approx", sco_loss = "mse", sco_out;
    int sco_batch = 64;
    std::uint64_t sco_seed = 0;
    long long sco_rank = -1;
    sco->add_option("--space", sco_space)->required();
    sco->add_option("--arch", sco_arch, "architecture string, e.g. \"2:1.0 3:0.2\"");
    sco->add_option("--rank", sco_rank, "architecture rank (alternative to --arch)");
    sco->add_option("--data", sco_data)->required();
    sco->add_option("--method", sco_method, "exact | approx");
    sco->add_option("--batch-size", sco_batch);
    sco->add_option("--loss", sco_loss);
    sco->add_option("--seed", sco_seed);
    sco->add_option("--out", sco_out);

    // search
    auto* sea = app.add_subcommand("search", "run the one-step search");
    std::string sea_space, sea_data, sea_config, sea_out;
    std::uint64_t sea_seed = 0;
    bool sea_no_labels = false;
    sea->add_option("--space", sea_space)->required();
    sea->add_option("--data", sea_data)->required();
    sea->add_option("--config", sea_config, "JSON config file (PenaltyConfig fields)");
    sea->add_option("--out", sea_out, "output directory")->required();
    sea->add_option("--seed", sea_seed, "override the config seed");
    sea->add_flag("--ignore-labels", sea_no_labels, "search with random labels");

    // rank
    auto* rnk = app.add_subcommand("rank", "score every architecture in a space");
    std::string rnk_space, rnk_data, rnk_out, rnk_loss = "mse";
    std::vector<std::string> rnk_scorers{"exact", "approx"};
    int rnk_batch = 64;
    std::uint64_t rnk_seed = 0;
    rnk->add_option("--space", rnk_space)->required();
    rnk->add_option("--data", rnk_data)->required();
    rnk->add_option("--scorers", rnk_scorers, "exact approx params snip synflow");
    rnk->add_option("--batch-size", rnk_batch);
    rnk->add_option("--loss", rnk_loss);
    rnk->add_option("--seed", rnk_seed);
    rnk->add_option("--out", rnk_out)->required();

    // train-all
    auto* tra = app.add_subcommand("train-all", "train every architecture for ground truth");
    std::string tra_space, tra_data, tra_out;
    int tra_epochs = 30, tra_batch = 32;
    double tra_lr = 0.5, tra_test_frac = 0.25;
    std::uint64_t tra_seed = 0;
    tra->add_option("--space", tra_space)->required();
    tra->add_option("--data", tra_data)->required();
    tra->add_option("--epochs", tra_epochs);
    tra->add_option("--lr", tra_lr);
    tra->add_option("--batch-size", tra_batch);
    tra->add_option("--test-frac", tra_test_frac);
    tra->add_option("--seed", tra_seed);
    tra->add_option("--out", tra_out)->required();

    // correlate
    auto* cor = app.add_subcommand("correlate", "correlation report for two score files");
    std::string cor_a, cor_b, cor_key_a, cor_key_b;
    cor->add_option("--a", cor_a)->required();
    cor->add_option("--b", cor_b)->required();
    cor->add_option("--key-a", cor_key_a, "score key when --a is a cache file");
    cor->add_option("--key-b", cor_key_b, "score key when --b is a cache file");

    // verify
    auto* ver = app.add_subcommand("verify", "run a named property suite");
    std::string ver_suite;
    std::uint64_t ver_seed = 0;
    ver->add_option("--suite", ver_suite, "ntk | chain | dynamics | agnostic | prop2")->required();
    ver->add_option("--seed", ver_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }

    if (threads > 0) set_max_threads(threads);

    try {
        if (*gen) {
            gen_params["m"] = gm;
            gen_params["n0"] = gn0;
            gen_params["classes"] = gclasses;
            gen_params["h"] = gh;
            gen_params["w"] = gw;
            gen_params["c"] = gc;
            if (gnoise >= 0) gen_params["noise"] = gnoise;
            const DatasetBundle ds = gen_dataset(gen_kind, gen_params, effective_seed(gen_seed));
            save_dataset(ds, gen_out);
            std::cout << "wrote " << ds.m << " samples to " << gen_out << "\n";
        } else if (*enu) {
            const CellSpace space = load_space(enu_space);
            const auto archs = enumerate(space, enu_cap);
            std::cout << archs.size() << "\n";
            if (!enu_quiet)
                for (const auto& a : archs) std::cout << a.to_string() << "\n";
        } else if (*sco) {
            const CellSpace space = load_space(sco_space);
            const DatasetBundle ds = load_dataset(sco_data);
            ArchId arch;
            if (sco_rank >= 0)
                arch = arch_unrank(space, sco_rank);
            else if (!sco_arch.empty())
                arch = ArchId::from_string(sco_arch);
            else
                throw UsageError("score: pass --arch or --rank");
            validate_arch(space, arch);
            const std::uint64_t seed = effective_seed(sco_seed);
            const ArchInstance inst(space, arch, mix64(seed, 0x696e73ULL,
                                                       static_cast<std::uint64_t>(arch_rank(space, arch))));
            const LossKind loss = parse_loss_kind(sco_loss);
            json rec{{"arch", arch.to_string()},
                     {"rank", arch_rank(space, arch)},
                     {"method", sco_method},
                     {"loss", loss_kind_name(loss)},
                     {"seed", seed}};
            if (sco_method == "exact") {
                rec["value"] = trace_norm_exact(inst, ds.X);
            } else if (sco_method == "approx") {
                const TraceEstimates est =
                    trace_lower_bounds(inst, ds.X, ds.Y, loss, std::min(sco_batch, ds.m), seed);
                rec["value"] = est.scaled;
                rec["minibatch"] = est.minibatch;
                rec["gamma"] = est.gamma;
                rec["batch_size"] = est.batch_size;
                rec["batch_indices"] = est.batch_indices;
            } else {
                throw UsageError("score method must be exact or approx");
            }
            const std::string text = rec.dump(2) + "\n";
            if (sco_out.empty())
                std::cout << text;
            else
                atomic_write(sco_out, text);
        } else if (*sea) {
            const CellSpace space = load_space(sea_space);
            const DatasetBundle ds = load_dataset(sea_data);
            PenaltyConfig cfg;
            if (!sea_config.empty()) cfg = config_from_json(json::parse(read_file(sea_config)));
            if (sea->count("--seed")) cfg.seed = sea_seed;
            bool env_override = false;
            cfg.seed = effective_seed(cfg.seed, &env_override);
            const auto t0 = std::chrono::steady_clock::now();
            const SearchLog log =
                run_search(space, ds.X, sea_no_labels ? Tensor() : ds.Y, cfg);
            const double wall =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

            fs::create_directories(sea_out);
            std::ostringstream lines;
            json head{{"schema", 1},
                      {"command", "search"},
                      {"space", space_to_text(space)},
                      {"data", sea_data},
                      {"config", config_to_json(cfg)},
                      {"seed_env_override", env_override},
                      {"random_labels", log.random_labels},
                      {"nu0", log.nu0_used}};
            lines << head.dump() << "\n";
            for (const auto& st : log.steps)
                lines << json{{"step", st.step},     {"arch", st.arch.to_string()},
                              {"trace", st.trace},   {"R", st.R},
                              {"nu", st.nu},         {"grad_norm", st.grad_norm}}
                             .dump()
                      << "\n";
            lines << json{{"selected", log.selected.to_string()},
                          {"rank", log.selected_rank},
                          {"delta_norm", log.delta_norm},
                          {"wall_s", wall}}
                         .dump()
                  << "\n";
            atomic_write(sea_out + "/run.jsonl", lines.str());
            atomic_write(sea_out + "/selected.json", arch_json(space, log.selected).dump(2) + "\n");
            std::cout << "selected " << log.selected.to_string() << " (rank " << log.selected_rank
                      << ") in " << wall << " s\n";
        } else if (*rnk) {
            const CellSpace space = load_space(rnk_space);
            const DatasetBundle ds = load_dataset(rnk_data);
            ScorerOptions opt;
            opt.batch = rnk_batch;
            opt.loss = parse_loss_kind(rnk_loss);
            opt.seed = effective_seed(rnk_seed);
            const RankedSpace ranked = rank_space(space, ds.X, ds.Y, rnk_scorers, opt);
            std::ostringstream lines;
            for (const auto& row : ranked.rows) {
                json rec{{"rank", row.rank}, {"arch", row.arch.to_string()}};
                for (const auto& [k, v] : row.scores) rec[k] = v;
                lines << rec.dump() << "\n";
            }
            atomic_write(rnk_out, lines.str());
            std::cout << "scored " << ranked.rows.size() << " architectures -> " << rnk_out << "\n";
        } else if (*tra) {
            const CellSpace space = load_space(tra_space);
            const DatasetBundle ds = load_dataset(tra_data);
            const std::uint64_t seed = effective_seed(tra_seed);
            Tensor Xtr, Ytr, Xte, Yte;
            split_dataset(ds, tra_test_frac, &Xtr, &Ytr, &Xte, &Yte);
            const auto archs = enumerate(space);

            // append-only cache: reuse existing rows, verify on overlap
            std::map<long long, json> cache;
            if (fs::exists(tra_out)) {
                std::istringstream in(read_file(tra_out));
                std::string line;
                while (std::getline(in, line)) {
                    if (line.empty()) continue;
                    const json rec = json::parse(line);
                    cache[rec.at("rank").get<long long>()] = rec;
                }
            }
            std::vector<json> rows(archs.size());
            std::vector<long long> todo;
            for (long long r = 0; r < static_cast<long long>(archs.size()); ++r) {
                const auto it = cache.find(r);
                if (it != cache.end())
                    rows[static_cast<size_t>(r)] = it->second;
                else
                    todo.push_back(r);
            }
            parallel_for(todo.size(), [&](std::size_t i) {
                const long long r = todo[i];
                const TrainResult res =
                    sgd_train_eval(space, archs[static_cast<size_t>(r)], Xtr, Ytr, Xte, Yte,
                                   tra_epochs, tra_lr, tra_batch, mix64(seed, 0x7472ULL,
                                                                        static_cast<std::uint64_t>(r)));
                rows[static_cast<size_t>(r)] =
                    json{{"rank", r},
                         {"arch", archs[static_cast<size_t>(r)].to_string()},
                         {"test_error", res.test_error},
                         {"diverged", res.diverged},
                         {"epochs", tra_epochs},
                         {"lr", tra_lr},
                         {"seed", seed}};
            });
            // verify cached rows against the requested configuration
            for (const auto& [r, rec] : cache) {
                if (r >= static_cast<long long>(rows.size())) throw UsageError("cache has extra rows");
                if (rec.at("epochs").get<int>() != tra_epochs || rec.at("lr").get<double>() != tra_lr ||
                    rec.at("seed").get<std::uint64_t>() != seed)
                    throw UsageError("cache was built with a different configuration; refusing to mix");
            }
            std::ostringstream lines;
            for (const auto& rec : rows) lines << rec.dump() << "\n";
            atomic_write(tra_out, lines.str());
            std::cout << "trained " << todo.size() << " architectures (" << cache.size()
                      << " cached) -> " << tra_out << "\n";
        } else if (*cor) {
            auto load_scores = [](const std::string& path, const std::string& key) {
                std::vector<double> out;
                const std::string text = read_file(path);
                const std::string trimmed = text.substr(text.find_first_not_of(" \t\r\n"));
                if (trimmed.rfind('[', 0) == 0) {
                    for (const auto& v : json::parse(text)) out.push_back(v.get<double>());
                    return out;
                }
                std::istringstream in(text);
                std::string line;
                while (std::getline(in, line)) {
                    if (line.empty()) continue;
                    const json rec = json::parse(line);
                    if (key.empty()) throw UsageError("cache file input needs --key-a/--key-b");
                    out.push_back(rec.at(key).get<double>());
                }
                return out;
            };
            const auto a = load_scores(cor_a, cor_key_a);
            const auto b = load_scores(cor_b, cor_key_b);
            const CorrelationReport rep = correlation(a, b);
            std::cout << json{{"pearson", rep.pearson},
                              {"spearman", rep.spearman},
                              {"kendall", rep.kendall},
                              {"n", rep.n},
                              {"degenerate", rep.degenerate}}
                             .dump(2)
                      << "\n";
        } else if (*ver) {
            const std::uint64_t seed = effective_seed(ver_seed);
            if (ver_suite == "ntk") suite_ntk(seed);
            else if (ver_suite == "chain") suite_chain(seed);
            else if (ver_suite == "dynamics") suite_dynamics(seed);
            else if (ver_suite == "agnostic") suite_agnostic(seed);
            else if (ver_suite == "prop2") suite_prop2(seed);
            else throw UsageError("unknown suite: " + ver_suite);
        }
    } catch (const SuiteFailure& e) {
        std::cerr << "FAILED: " << e.what() << "\n";
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
