#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tracenas/tensor.hpp"

namespace tracenas {

// Primitive operations recorded on a Tape. The first block is the public
// catalog exposed through forward_op; the rest exist so that every VJP is
// again a composition of tape primitives (needed when a gradient has to be
// differentiated a second time, as in the search objective).
enum class Op : std::uint8_t {
    leaf,
    constant,
    // catalog-facing primitives; the linear families carry a scale attribute
    // so their adjoints are again family members (dense is matvec with the
    // 1/sqrt(fan_in) factor)
    matvec,       // c * W (r,k) * x (k) -> (r)
    matvec_t,     // c * W^T g
    outer,        // c * u v^T -> (r,k)
    conv3,        // c * 3x3 conv, stride 1, zero pad 1; (K, X)
    conv3_dx,     // adjoint in X
    conv3_dw,     // adjoint in K
    conv1,        // c * 1x1 conv; (K, X)
    conv1_dx,
    conv1_dw,
    relu,
    tanh_fn,
    add,
    concat_ch,    // feature/channel concatenation
    mean_pool,    // 3x3, stride 1, zero pad, weight 1/9 (self-adjoint)
    max_pool,     // 3x3, stride 1, -inf pad
    scale,        // multiply by the constant attribute
    softmax,
    identity,
    zero_fn,
    // internal
    mul,
    sub,
    smul,         // scalar (1) times tensor
    sumall,       // -> (1)
    bcast,        // (1) -> target shape
    heaviside,    // 1[x > 0]; gradient defined as zero
    unpool,       // scatter through stored argmax indices
    gather,       // read through stored argmax indices
    gap,          // (c,h,w) -> (c) mean over spatial dims
    gap_t,        // (c) -> (c,h,w), spread 1/(h*w)
    reshape,
    slice_ch,     // channel range [i0, i0+i1)
    pad_ch,       // embed channels at offset i0 into i1 total channels
    ce_softmax,   // (logits, onehot) -> (1)
};

const char* op_name(Op op);

struct Node {
    Op op;
    int a = -1, b = -1;            // input node ids
    Tensor val;
    double c = 0.0;                // scale constant
    int i0 = 0, i1 = 0;            // generic int attributes (slice/pad ranges)
    std::vector<int> tshape;       // bcast/reshape/unpool target shape
    std::shared_ptr<std::vector<int>> idx;  // max_pool argmax, shared with unpool/gather
};

/// Eager single-owner computation graph. Node values are computed on insertion;
/// replay() recomputes every value from the current leaf values along the
/// identical code path, so identical inputs reproduce identical bits.
class Tape {
public:
    int leaf(Tensor v);
    int constant(Tensor v);

    int dense(int params, int x);          // matvec with c = 1/sqrt(fan_in)
    int conv3(int params, int x);          // c = 1/sqrt(ci*9)
    int conv1(int params, int x);          // c = 1/sqrt(ci)
    int relu(int x);
    int tanh_fn(int x);
    int add(int a, int b);
    int concat_ch(int a, int b);
    int mean_pool(int x);
    int max_pool(int x);
    int scale(int x, double c);
    int softmax(int x);
    int identity(int x);
    int zero_fn(int x);

    int matvec(int w, int x, double c = 1.0);
    int matvec_t(int w, int g, double c = 1.0);
    int outer(int u, int v, double c = 1.0);
    int mul(int a, int b);
    int sub(int a, int b);
    int smul(int s, int x);
    int sumall(int x);
    int bcast(int s, std::vector<int> shape);
    int heaviside(int x);
    int gap(int x);
    int gap_t(int s, int h, int w);
    int reshape(int x, std::vector<int> shape);
    int slice_ch(int x, int offset, int count);
    int pad_ch(int x, int offset, int total);
    int ce_softmax(int logits, int onehot);

    int mse_sum(int pred, int target);   // composition: sumall((pred-target)^2)
    int dot(int a, int b);               // composition: sumall(a*b)

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    int size() const { return static_cast<int>(nodes_.size()); }

    void set_leaf_value(int id, Tensor v);
    void replay();  // recompute all non-terminal values from current leaves

    /// Gradient of <output, seed> with respect to every node; index by node id.
    /// Nodes untouched by the graph keep empty tensors. May be called repeatedly.
    std::vector<Tensor> backward(int output, const Tensor& seed) const;

    /// Backward pass that records the gradient computation as new tape nodes,
    /// making the result differentiable in turn. Returns grad node id per node
    /// (-1 where no gradient flows). Only nodes < size-at-entry are assigned.
    std::vector<int> backward_graph(int output, int seed_node);

private:
    int push(Node n);
    Tensor eval(const Node& n) const;
    std::vector<Node> nodes_;
};

// ---- public catalog surface ----------------------------------------------

enum class OpKind {
    dense, conv2d_3x3, conv2d_1x1, relu, tanh, add, concat_channels,
    mean_pool, max_pool, scale_by_constant, softmax, identity, zero,
};

const char* op_kind_name(OpKind k);
OpKind parse_op_kind(const std::string& name);

/// Apply one catalog operation. `inputs` and `params` are node ids on `tape`;
/// parameterized kinds (dense/conv) take exactly one params entry. `c` is only
/// read by scale-by-constant.
int forward_op(Tape& tape, OpKind kind, const std::vector<int>& inputs,
               const std::vector<int>& params, double c = 1.0);

}  // namespace tracenas
