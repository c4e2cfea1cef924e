#include "tracenas/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tracenas/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tracenas {

namespace {

void round_to_f32(Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(static_cast<float>(t[i]));
}

void normalize_rows_cap(Tensor& X, int m) {
    // scale rows individually so every ||x|| <= 1 (rows above the cap shrink)
    const std::size_t stride = X.size() / static_cast<size_t>(m);
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t q = 0; q < stride; ++q) {
            const double v = X[static_cast<size_t>(i) * stride + q];
            s += v * v;
        }
        const double norm = std::sqrt(s);
        if (norm > 1.0)
            for (std::size_t q = 0; q < stride; ++q) X[static_cast<size_t>(i) * stride + q] /= norm;
    }
}

double param_or(const std::map<std::string, double>& params, const std::string& key, double dflt) {
    const auto it = params.find(key);
    return it == params.end() ? dflt : it->second;
}

Tensor onehot(const std::vector<int>& labels, int classes) {
    Tensor Y({static_cast<int>(labels.size()), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) Y[i * classes + static_cast<size_t>(labels[i])] = 1.0;
    return Y;
}

// generators assign classes round-robin; a final shuffle keeps any prefix or
// strided train/test split class-balanced
void shuffle_rows(Tensor& X, std::vector<int>& labels, Rng& rng) {
    const int m = X.dim(0);
    const std::size_t stride = X.size() / static_cast<size_t>(m);
    std::vector<double> buf(stride);
    for (int i = m - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
        if (j == i) continue;
        double* a = X.data() + static_cast<size_t>(i) * stride;
        double* b = X.data() + static_cast<size_t>(j) * stride;
        std::copy(a, a + stride, buf.data());
        std::copy(b, b + stride, a);
        std::copy(buf.begin(), buf.end(), b);
        std::swap(labels[static_cast<size_t>(i)], labels[static_cast<size_t>(j)]);
    }
}

}  // namespace

DatasetBundle gen_dataset(const std::string& kind, const std::map<std::string, double>& params,
                          std::uint64_t seed) {
    DatasetBundle ds;
    ds.kind = kind;
    ds.seed = seed;
    Rng rng(mix64(seed, 0x647367ULL));

    const int m = static_cast<int>(param_or(params, "m", 256));
    if (m < 1) throw UsageError("gen_dataset: m must be >= 1");
    ds.m = m;

    if (kind == "blobs" || kind == "spirals" || kind == "gaussian_noise") {
        const int n0 = static_cast<int>(param_or(params, "n0", 16));
        const int classes = static_cast<int>(param_or(params, "classes", kind == "spirals" ? 2 : 4));
        const double noise = param_or(params, "noise", 0.1);
        ds.input.image = false;
        ds.input.n0 = n0;
        ds.classes = classes;
        ds.X = Tensor({m, n0});
        std::vector<int> labels(static_cast<size_t>(m));

        if (kind == "blobs") {
            // class centers on a sphere of radius 0.6, spread `noise`
            Tensor centers({classes, n0});
            for (int k = 0; k < classes; ++k) {
                double s = 0.0;
                for (int q = 0; q < n0; ++q) {
                    const double v = rng.normal();
                    centers[static_cast<size_t>(k) * n0 + q] = v;
                    s += v * v;
                }
                const double scale = 0.6 / std::sqrt(s);
                for (int q = 0; q < n0; ++q) centers[static_cast<size_t>(k) * n0 + q] *= scale;
            }
            for (int i = 0; i < m; ++i) {
                const int k = i % classes;
                labels[static_cast<size_t>(i)] = k;
                for (int q = 0; q < n0; ++q)
                    ds.X[static_cast<size_t>(i) * n0 + q] =
                        centers[static_cast<size_t>(k) * n0 + q] + noise * rng.normal();
            }
        } else if (kind == "spirals") {
            if (n0 < 2) throw UsageError("spirals need n0 >= 2");
            for (int i = 0; i < m; ++i) {
                const int k = i % classes;
                labels[static_cast<size_t>(i)] = k;
                const double t = 0.15 + 0.85 * rng.uniform();
                const double ang = 3.0 * 3.14159265358979323846 * t +
                                   2.0 * 3.14159265358979323846 * k / classes;
                ds.X[static_cast<size_t>(i) * n0 + 0] = 0.9 * t * std::cos(ang) + noise * rng.normal();
                ds.X[static_cast<size_t>(i) * n0 + 1] = 0.9 * t * std::sin(ang) + noise * rng.normal();
                for (int q = 2; q < n0; ++q)
                    ds.X[static_cast<size_t>(i) * n0 + q] = noise * rng.normal();
            }
        } else {  // gaussian_noise
            double max_norm = 0.0;
            for (int i = 0; i < m; ++i) {
                labels[static_cast<size_t>(i)] =
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
                double s = 0.0;
                for (int q = 0; q < n0; ++q) {
                    const double v = rng.normal();
                    ds.X[static_cast<size_t>(i) * n0 + q] = v;
                    s += v * v;
                }
                max_norm = std::max(max_norm, std::sqrt(s));
            }
            ds.X *= 1.0 / max_norm;  // global rescale to max row norm 1
        }
        normalize_rows_cap(ds.X, m);
        shuffle_rows(ds.X, labels, rng);
        ds.Y = onehot(labels, classes);
    } else if (kind == "image_patches") {
        const int h = static_cast<int>(param_or(params, "h", 8));
        const int w = static_cast<int>(param_or(params, "w", 8));
        const int classes = static_cast<int>(param_or(params, "classes", 4));
        const double noise = param_or(params, "noise", 0.15);
        // style 0: class-located gaussian bump. style 1: two sign bits carried
        // by per-pixel channel correlations (position-agnostic; needs a
        // nonlinear per-pixel channel mix to read out).
        const int style = static_cast<int>(param_or(params, "style", 0));
        const int c = static_cast<int>(param_or(params, "c", style == 1 ? 4 : 1));
        ds.input.image = true;
        ds.input.c = c;
        ds.input.h = h;
        ds.input.w = w;
        ds.classes = classes;
        ds.X = Tensor({m, c, h, w});
        std::vector<int> labels(static_cast<size_t>(m));
        if (style == 1) {
            if (c < 4 || classes != 4)
                throw UsageError("image_patches style 1 needs c >= 4 and classes == 4");
            const double amp = param_or(params, "amp", 1.0);
            const int hw = h * w;
            for (int i = 0; i < m; ++i) {
                const int b1 = (i / 2) % 2 ? 1 : -1;
                const int b2 = i % 2 ? 1 : -1;
                labels[static_cast<size_t>(i)] = 2 * (b1 > 0) + (b2 > 0);
                double* base = ds.X.data() + static_cast<size_t>(i) * c * hw;
                for (int q = 0; q < c * hw; ++q) base[q] = noise * rng.normal();
                for (int p = 0; p < hw; ++p) {
                    const double z = rng.normal();
                    base[p] += amp * z;
                    base[hw + p] += amp * b1 * z;
                    const double u = rng.normal();
                    base[2 * hw + p] += amp * u;
                    base[3 * hw + p] += amp * b2 * u;
                }
            }
        } else {
            // class k: gaussian bump at a class-specific location
            for (int i = 0; i < m; ++i) {
                const int k = i % classes;
                labels[static_cast<size_t>(i)] = k;
                const double cy = h * (0.3 + 0.4 * ((k / 2) % 2)) + 0.35 * rng.normal();
                const double cx = w * (0.3 + 0.4 * (k % 2)) + 0.35 * rng.normal();
                for (int ch = 0; ch < c; ++ch)
                    for (int y = 0; y < h; ++y)
                        for (int x = 0; x < w; ++x) {
                            const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                            ds.X[((static_cast<size_t>(i) * c + ch) * h + y) * w + x] =
                                std::exp(-d2 / 3.0) + noise * rng.normal();
                        }
            }
        }
        normalize_rows_cap(ds.X, m);
        shuffle_rows(ds.X, labels, rng);
        ds.Y = onehot(labels, classes);
    } else {
        throw UsageError("unknown dataset kind: " + kind);
    }

    round_to_f32(ds.X);
    round_to_f32(ds.Y);
    ds.normalized = true;
    return ds;
}

// ---- dataset serialization ----------------------------------------------------------

namespace {

void write_f32(const std::string& path, const Tensor& t) {
    std::vector<float> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t[i]);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

Tensor read_f32(const std::string& path, std::vector<int> shape) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read " + path);
    std::vector<float> buf(shape_numel(shape));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float))
        throw UsageError("short read from " + path);
    std::vector<double> data(buf.begin(), buf.end());
    return Tensor(std::move(shape), std::move(data));
}

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& what) {
    for (const auto& [key, _] : j.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw UsageError("unknown key '" + key + "' in " + what);
}

}  // namespace

void save_dataset(const DatasetBundle& ds, const std::string& dir) {
    fs::create_directories(dir);
    json meta;
    meta["schema"] = 1;
    meta["kind"] = ds.kind;
    meta["seed"] = ds.seed;
    meta["normalized"] = ds.normalized;
    meta["classes"] = ds.classes;
    meta["m"] = ds.m;
    if (ds.input.image)
        meta["input"] = {{"type", "image"}, {"c", ds.input.c}, {"h", ds.input.h}, {"w", ds.input.w}};
    else
        meta["input"] = {{"type", "vector"}, {"n0", ds.input.n0}};
    atomic_write(dir + "/meta.json", meta.dump(2) + "\n");
    write_f32(dir + "/X.f32", ds.X);
    write_f32(dir + "/Y.f32", ds.Y);
}

DatasetBundle load_dataset(const std::string& dir) {
    const json meta = json::parse(read_file(dir + "/meta.json"));
    check_keys(meta, {"schema", "kind", "seed", "normalized", "classes", "m", "input"}, "meta.json");
    if (meta.at("schema").get<int>() != 1) throw UsageError("unsupported dataset schema");
    DatasetBundle ds;
    ds.kind = meta.at("kind").get<std::string>();
    ds.seed = meta.at("seed").get<std::uint64_t>();
    ds.normalized = meta.at("normalized").get<bool>();
    ds.classes = meta.at("classes").get<int>();
    ds.m = meta.at("m").get<int>();
    const json& in = meta.at("input");
    if (in.at("type") == "image") {
        check_keys(in, {"type", "c", "h", "w"}, "meta.json input");
        ds.input.image = true;
        ds.input.c = in.at("c").get<int>();
        ds.input.h = in.at("h").get<int>();
        ds.input.w = in.at("w").get<int>();
        ds.X = read_f32(dir + "/X.f32", {ds.m, ds.input.c, ds.input.h, ds.input.w});
    } else {
        check_keys(in, {"type", "n0"}, "meta.json input");
        ds.input.image = false;
        ds.input.n0 = in.at("n0").get<int>();
        ds.X = read_f32(dir + "/X.f32", {ds.m, ds.input.n0});
    }
    ds.Y = read_f32(dir + "/Y.f32", {ds.m, ds.classes});
    return ds;
}

// ---- space files ------------------------------------------------------------------------

std::string space_to_text(const CellSpace& space) {
    std::ostringstream os;
    os << "# cell search space\n";
    os << "nodes = " << space.num_nodes << "\n";
    os << "catalog = ";
    for (std::size_t i = 0; i < space.catalog.size(); ++i)
        os << (i ? ", " : "") << node_op_name(space.catalog[i]);
    os << "\n";
    os << "merge = " << (space.merge == MergeRule::sum ? "sum" : "concat") << "\n";
    if (space.input.image)
        os << "input = img:" << space.input.c << "x" << space.input.h << "x" << space.input.w << "\n";
    else
        os << "input = vec:" << space.input.n0 << "\n";
    os << "output = " << space.output_dim << "\n";
    os << "width = " << space.width << "\n";
    os << "cells = " << space.num_cells << "\n";
    os << "seed = " << space.seed << "\n";
    return os.str();
}

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

CellSpace parse_space_text(const std::string& text) {
    CellSpace space;
    space.catalog.clear();
    std::istringstream is(text);
    std::string line;
    std::vector<std::string> seen;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw UsageError("bad space file line: " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (std::find(seen.begin(), seen.end(), key) != seen.end())
            throw UsageError("duplicate space file key: " + key);
        seen.push_back(key);
        if (key == "nodes") {
            space.num_nodes = std::stoi(val);
        } else if (key == "catalog") {
            std::istringstream cs(val);
            std::string tok;
            while (std::getline(cs, tok, ',')) space.catalog.push_back(parse_node_op(trim(tok)));
        } else if (key == "merge") {
            if (val == "sum")
                space.merge = MergeRule::sum;
            else if (val == "concat")
                space.merge = MergeRule::concat;
            else
                throw UsageError("merge must be sum or concat");
        } else if (key == "input") {
            if (val.rfind("vec:", 0) == 0) {
                space.input.image = false;
                space.input.n0 = std::stoi(val.substr(4));
            } else if (val.rfind("img:", 0) == 0) {
                space.input.image = true;
                if (std::sscanf(val.c_str() + 4, "%dx%dx%d", &space.input.c, &space.input.h,
                                &space.input.w) != 3)
                    throw UsageError("bad image input spec: " + val);
            } else {
                throw UsageError("input must be vec:<n0> or img:<c>x<h>x<w>");
            }
        } else if (key == "output") {
            space.output_dim = std::stoi(val);
        } else if (key == "width") {
            space.width = std::stoi(val);
        } else if (key == "cells") {
            space.num_cells = std::stoi(val);
        } else if (key == "seed") {
            space.seed = std::stoull(val);
        } else {
            throw UsageError("unknown space file key: " + key);
        }
    }
    space.validate();
    return space;
}

CellSpace load_space(const std::string& path) { return parse_space_text(read_file(path)); }

void save_space(const CellSpace& space, const std::string& path) {
    atomic_write(path, space_to_text(space));
}

// ---- misc ---------------------------------------------------------------------------------

void atomic_write(const std::string& path, const std::string& content) {
    const fs::path target(path);
    const fs::path tmp = target.parent_path().empty()
                             ? fs::path(target.string() + ".tmp")
                             : target.parent_path() / (target.filename().string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw UsageError("cannot write " + tmp.string());
        out << content;
    }
    fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::uint64_t effective_seed(std::uint64_t seed, bool* overridden) {
    if (overridden) *overridden = false;
    const char* env = std::getenv("TRACENAS_SEED");
    if (env && *env) {
        if (overridden) *overridden = true;
        return std::stoull(env);
    }
    return seed;
}

}  // namespace tracenas
