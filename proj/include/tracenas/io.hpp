#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tracenas/archspace.hpp"
#include "tracenas/tensor.hpp"

namespace tracenas {

/// Dataset with metadata. X is stored on disk as little-endian float32 and
/// promoted to float64 on load; in-memory values are pre-rounded to storage
/// precision so save/load round-trips bit-identically.
struct DatasetBundle {
    std::string kind;
    std::uint64_t seed = 0;
    bool normalized = true;  // every row has ||x||_2 <= 1
    int classes = 0;
    InputSpec input;
    int m = 0;
    Tensor X;  // (m, n0) or (m, c, h, w)
    Tensor Y;  // (m, classes), one-hot
};

/// Synthetic dataset generators: "blobs", "spirals", "gaussian_noise",
/// "image_patches". Parameters (all optional, generator-specific defaults):
/// m, n0, classes, noise, h, w, c.
DatasetBundle gen_dataset(const std::string& kind, const std::map<std::string, double>& params,
                          std::uint64_t seed);

void save_dataset(const DatasetBundle& ds, const std::string& dir);
DatasetBundle load_dataset(const std::string& dir);

// ---- space files -------------------------------------------------------------

/// Key-value space file ("key = value" lines, '#' comments). Keys: nodes,
/// catalog, merge, input, output, width, cells, seed. Unknown keys are
/// rejected; writing then reading reproduces the space exactly.
CellSpace load_space(const std::string& path);
void save_space(const CellSpace& space, const std::string& path);
CellSpace parse_space_text(const std::string& text);
std::string space_to_text(const CellSpace& space);

// ---- misc ---------------------------------------------------------------------

/// Write via a temp file in the same directory plus rename.
void atomic_write(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

/// Global seed override: returns `seed` unless the TRACENAS_SEED environment
/// variable is set, in which case that value wins.
std::uint64_t effective_seed(std::uint64_t seed, bool* overridden = nullptr);

}  // namespace tracenas
