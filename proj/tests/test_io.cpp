#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "tracenas/io.hpp"

using namespace tracenas;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("tracenas_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

double row_norm(const Tensor& X, int i) {
    const std::size_t stride = X.size() / static_cast<size_t>(X.dim(0));
    double s = 0.0;
    for (std::size_t q = 0; q < stride; ++q) {
        const double v = X[static_cast<size_t>(i) * stride + q];
        s += v * v;
    }
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("blobs: counts, one-hot labels, norm cap") {
    const DatasetBundle ds = gen_dataset("blobs", {{"m", 200}, {"n0", 16}, {"classes", 2}}, 3);
    CHECK(ds.m == 200);
    CHECK(ds.X.shape() == std::vector<int>{200, 16});
    CHECK(ds.Y.shape() == std::vector<int>{200, 2});
    for (int i = 0; i < 200; ++i) {
        CHECK(row_norm(ds.X, i) <= 1.0 + 1e-6);
        double sum = 0.0;
        for (int c = 0; c < 2; ++c) sum += ds.Y[static_cast<size_t>(i) * 2 + c];
        CHECK(sum == 1.0);
    }
}

TEST_CASE("gaussian_noise rescales to max row norm 1") {
    const DatasetBundle ds = gen_dataset("gaussian_noise", {{"m", 64}, {"n0", 64}}, 5);
    double mx = 0.0;
    for (int i = 0; i < 64; ++i) mx = std::max(mx, row_norm(ds.X, i));
    CHECK(mx <= 1.0 + 1e-6);
    CHECK(mx > 0.999);
}

TEST_CASE("image_patches produce image tensors") {
    const DatasetBundle ds =
        gen_dataset("image_patches", {{"m", 12}, {"h", 6}, {"w", 6}, {"c", 2}, {"classes", 4}}, 7);
    CHECK(ds.input.image);
    CHECK(ds.X.shape() == std::vector<int>{12, 2, 6, 6});
    for (int i = 0; i < 12; ++i) CHECK(row_norm(ds.X, i) <= 1.0 + 1e-6);
}

TEST_CASE("dataset save/load round-trips bit-identically") {
    const std::string dir = temp_dir("ds");
    for (const char* kind : {"blobs", "image_patches", "spirals"}) {
        const DatasetBundle ds = gen_dataset(kind, {{"m", 24}}, 11);
        save_dataset(ds, dir + "/" + kind);
        const DatasetBundle back = load_dataset(dir + "/" + kind);
        CHECK(back.kind == ds.kind);
        CHECK(back.m == ds.m);
        REQUIRE(back.X.size() == ds.X.size());
        for (std::size_t q = 0; q < ds.X.size(); ++q) CHECK(back.X[q] == ds.X[q]);
        for (std::size_t q = 0; q < ds.Y.size(); ++q) CHECK(back.Y[q] == ds.Y[q]);
    }
}

TEST_CASE("unknown meta keys are rejected") {
    const std::string dir = temp_dir("meta");
    const DatasetBundle ds = gen_dataset("blobs", {{"m", 8}}, 1);
    save_dataset(ds, dir);
    const std::string meta = read_file(dir + "/meta.json");
    atomic_write(dir + "/meta.json",
                 meta.substr(0, meta.rfind('}')) + ",\"surprise\": 1}\n");
    CHECK_THROWS_AS(load_dataset(dir), UsageError);
}

TEST_CASE("space files round-trip and reject bad input") {
    CellSpace s = micro_conv_space(5);
    s.merge = MergeRule::concat;
    s.num_cells = 2;
    s.seed = 77;
    const std::string text = space_to_text(s);
    const CellSpace back = parse_space_text(text);
    CHECK(back.num_nodes == s.num_nodes);
    CHECK(back.catalog == s.catalog);
    CHECK(back.merge == s.merge);
    CHECK(back.input.image == s.input.image);
    CHECK(back.input.c == s.input.c);
    CHECK(back.input.h == s.input.h);
    CHECK(back.output_dim == s.output_dim);
    CHECK(back.width == s.width);
    CHECK(back.num_cells == s.num_cells);
    CHECK(back.seed == s.seed);
    CHECK(space_to_text(back) == text);  // lossless

    CHECK_THROWS_AS(parse_space_text(text + "mystery = 3\n"), UsageError);
    CHECK_THROWS_AS(parse_space_text(text + "nodes = 4\n"), UsageError);  // duplicate
    CHECK_THROWS_AS(parse_space_text("nodes = 4\n"), UsageError);         // incomplete
}

TEST_CASE("atomic_write replaces content whole") {
    const std::string dir = temp_dir("aw");
    atomic_write(dir + "/f.txt", "hello\n");
    CHECK(read_file(dir + "/f.txt") == "hello\n");
    atomic_write(dir + "/f.txt", "bye\n");
    CHECK(read_file(dir + "/f.txt") == "bye\n");
    CHECK_FALSE(fs::exists(dir + "/f.txt.tmp"));
}

TEST_CASE("environment variable overrides the seed") {
    bool overridden = true;
    unsetenv("TRACENAS_SEED");
    CHECK(effective_seed(5, &overridden) == 5);
    CHECK_FALSE(overridden);
    setenv("TRACENAS_SEED", "99", 1);
    CHECK(effective_seed(5, &overridden) == 99);
    CHECK(overridden);
    unsetenv("TRACENAS_SEED");
}
