#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tracenas/tape.hpp"
#include "tracenas/tensor.hpp"

namespace tracenas {

// Node-level operations available inside a cell. These are small compositions
// of the primitive catalog (a dense/conv step fused with its nonlinearity).
enum class NodeOp {
    identity,
    zero,
    dense_relu,
    dense_tanh,
    conv3_relu,
    conv1_relu,
    mean_pool3,
};

const char* node_op_name(NodeOp op);
NodeOp parse_node_op(const std::string& name);
bool node_op_needs_image(NodeOp op);
bool node_op_needs_vector(NodeOp op);

enum class MergeRule { sum, concat };

struct InputSpec {
    bool image = false;
    int n0 = 0;           // vector inputs
    int c = 0, h = 0, w = 0;  // image inputs
    std::size_t numel() const { return image ? static_cast<std::size_t>(c) * h * w : n0; }
    std::vector<int> shape() const {
        return image ? std::vector<int>{c, h, w} : std::vector<int>{n0};
    }
};

/// Cell-DAG micro search space. Nodes 0..1 are cell inputs, 2..num_nodes-1 are
/// intermediate nodes (one op applied to one predecessor each), and an implicit
/// output node merges all intermediates. A fixed stem maps raw inputs to the
/// cell width and a fixed linear head maps the merged features to output_dim.
struct CellSpace {
    int num_nodes = 4;                 // N >= 3
    std::vector<NodeOp> catalog;
    MergeRule merge = MergeRule::sum;
    InputSpec input;
    int output_dim = 4;                // n
    int width = 8;                     // k: hidden width / channels
    int num_cells = 1;
    std::uint64_t seed = 0;            // weight seed recorded with the space

    int num_intermediate() const { return num_nodes - 2; }
    long long enum_size() const;
    void validate() const;
};

/// One discrete architecture: per intermediate node, (op index, input index).
struct ArchId {
    std::vector<std::pair<int, int>> choices;

    bool operator==(const ArchId& o) const { return choices == o.choices; }
    std::string to_string() const;  // e.g. "2:1.0 3:0.2"
    static ArchId from_string(const std::string& s);
};

long long arch_rank(const CellSpace& space, const ArchId& arch);
ArchId arch_unrank(const CellSpace& space, long long rank);
void validate_arch(const CellSpace& space, const ArchId& arch);

/// Exhaustive canonical enumeration (rank order). Refuses when the space
/// exceeds `cap` architectures.
std::vector<ArchId> enumerate(const CellSpace& space, long long cap = 100000);

// ---- architecture distribution ---------------------------------------------

/// Distribution parameters: per intermediate node i, logits over catalog ops
/// and logits over the i candidate inputs. Initialized to zeros.
struct AlphaParams {
    std::vector<std::vector<double>> op_logits;   // [node][op]
    std::vector<std::vector<double>> in_logits;   // [node][pred]

    static AlphaParams zeros(const CellSpace& space);
    std::size_t flat_size() const;
    std::vector<double> flatten() const;
    static AlphaParams unflatten(const CellSpace& space, const std::vector<double>& v);
    bool all_finite() const;
};

struct GumbelSample {
    ArchId arch;
    AlphaParams soft;  // softmax((alpha+g)/tau) per block, kept for the ST backward
};

/// Straight-Through Gumbel sampling: per node, argmax over softmax((a+g)/tau)
/// independently for the op choice and the input choice. Ties break toward the
/// lowest index.
GumbelSample sample_architecture(const CellSpace& space, const AlphaParams& alpha,
                                 const AlphaParams& gumbel, double tau);

/// Per-node argmax of the logits themselves (used for the final selection).
ArchId argmax_arch(const CellSpace& space, const AlphaParams& alpha);

// ---- instantiated networks ---------------------------------------------------

struct ParamSlot {
    std::size_t offset = 0;
    std::vector<int> shape;  // empty: the op carries no parameters
    std::size_t numel() const { return shape.empty() ? 0 : shape_numel(shape); }
};

/// A per-sample forward pass recorded on a tape, with parameter leaves mapped
/// back to their slices of the flat parameter vector.
struct TapeNet {
    Tape tape;
    int out = -1;
    std::vector<std::pair<int, ParamSlot>> params;  // leaf id -> theta slice
};

void apply_theta(TapeNet& net, const Tensor& theta);  // set leaves + replay
Tensor flatten_grads(const TapeNet& net, const std::vector<Tensor>& node_grads, std::size_t p);

class Network {
public:
    virtual ~Network() = default;
    virtual const Tensor& theta() const = 0;
    virtual void set_theta(Tensor t) = 0;
    virtual std::size_t param_count() const = 0;
    virtual int output_dim() const = 0;
    virtual std::vector<int> input_shape() const = 0;
    virtual TapeNet build(const Tensor& x) const = 0;
};

/// Concrete architecture with NTK-parameterized weights (N(0,1) entries,
/// forward scaling 1/sqrt(fan_in), no bias), deterministic in (arch, seed).
/// Weights per (cell, node, op) come from per-coordinate streams shared with
/// SuperNet, so an instantiated architecture agrees with the one-shot graph.
class ArchInstance : public Network {
public:
    ArchInstance(CellSpace space, ArchId arch, std::uint64_t seed);

    const CellSpace& space() const { return space_; }
    const ArchId& arch() const { return arch_; }
    std::uint64_t seed() const { return seed_; }

    const Tensor& theta() const override { return theta_; }
    void set_theta(Tensor t) override;
    std::size_t param_count() const override { return theta_.size(); }
    int output_dim() const override { return space_.output_dim; }
    std::vector<int> input_shape() const override { return space_.input.shape(); }
    TapeNet build(const Tensor& x) const override;

private:
    CellSpace space_;
    ArchId arch_;
    std::uint64_t seed_;
    Tensor theta_;
    ParamSlot stem_, head_;
    std::vector<std::array<ParamSlot, 2>> proj_;      // per cell >0, inputs 0/1
    std::vector<ParamSlot> node_param_;               // per (cell, intermediate)
};

ArchInstance instantiate(const CellSpace& space, const ArchId& arch, std::uint64_t seed);

/// Analytic parameter count for (space, arch); instantiate() must match it.
std::size_t param_count_formula(const CellSpace& space, const ArchId& arch);

/// Fully connected chain x -> [dense+relu] x (depth-1) -> dense, NTK
/// parameterization throughout; the subject of the infinite-width oracles.
class MlpChain : public Network {
public:
    MlpChain(int n0, int width, int depth, int n_out, std::uint64_t seed);

    int depth() const { return depth_; }
    int width() const { return width_; }

    const Tensor& theta() const override { return theta_; }
    void set_theta(Tensor t) override;
    std::size_t param_count() const override { return theta_.size(); }
    int output_dim() const override { return n_out_; }
    std::vector<int> input_shape() const override { return {n0_}; }
    TapeNet build(const Tensor& x) const override;

private:
    int n0_, width_, depth_, n_out_;
    Tensor theta_;
    std::vector<ParamSlot> layers_;
};

/// One-shot graph over the whole space: every candidate op of every node is
/// materialized, node values are convex combinations driven by per-choice
/// scalar weight leaves (hard one-hot in ST mode, softmax weights in relaxed
/// mode). All sampled architectures share this fixed theta.
class SuperNet {
public:
    SuperNet(CellSpace space, std::uint64_t seed);

    const CellSpace& space() const { return space_; }
    const Tensor& theta() const { return theta_; }
    std::size_t param_count() const { return theta_.size(); }

    struct MixedTape {
        Tape tape;
        int out = -1;
        std::vector<std::pair<int, ParamSlot>> params;
        std::vector<std::vector<int>> op_w;  // [node][op] scalar weight leaf ids
        std::vector<std::vector<int>> in_w;  // [node][pred]
    };

    MixedTape build_mixed(const Tensor& x, const GumbelSample& sample, bool hard) const;

private:
    CellSpace space_;
    std::uint64_t seed_;
    Tensor theta_;
    ParamSlot stem_, head_;
    std::vector<std::array<ParamSlot, 2>> proj_;
    std::vector<ParamSlot> node_op_param_;  // per (cell, intermediate, op)
};

// Default micro catalogs.
std::vector<NodeOp> default_vector_catalog();   // identity, zero, dense-relu, dense-tanh
std::vector<NodeOp> default_image_catalog();    // identity, zero, conv3x3/conv1x1-relu, mean-pool3x3

// Named presets used across tests and the acceptance suite.
CellSpace micro_vec_space(int num_nodes = 4, int n0 = 16, int n_out = 4, int width = 8);
CellSpace micro_conv_space(int num_nodes = 4, int channels = 1, int hw = 8, int n_out = 4,
                           int width = 8);

}  // namespace tracenas
