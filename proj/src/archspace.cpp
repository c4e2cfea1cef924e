#include "tracenas/archspace.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "tracenas/rng.hpp"

namespace tracenas {

const char* node_op_name(NodeOp op) {
    switch (op) {
        case NodeOp::identity: return "identity";
        case NodeOp::zero: return "zero";
        case NodeOp::dense_relu: return "dense-relu";
        case NodeOp::dense_tanh: return "dense-tanh";
        case NodeOp::conv3_relu: return "conv3x3-relu";
        case NodeOp::conv1_relu: return "conv1x1-relu";
        case NodeOp::mean_pool3: return "mean-pool3x3";
    }
    return "?";
}

NodeOp parse_node_op(const std::string& name) {
    for (NodeOp op : {NodeOp::identity, NodeOp::zero, NodeOp::dense_relu, NodeOp::dense_tanh,
                      NodeOp::conv3_relu, NodeOp::conv1_relu, NodeOp::mean_pool3})
        if (name == node_op_name(op)) return op;
    throw UsageError("unknown node op: " + name);
}

bool node_op_needs_image(NodeOp op) {
    return op == NodeOp::conv3_relu || op == NodeOp::conv1_relu || op == NodeOp::mean_pool3;
}

bool node_op_needs_vector(NodeOp op) {
    return op == NodeOp::dense_relu || op == NodeOp::dense_tanh;
}

long long CellSpace::enum_size() const {
    long long size = 1;
    for (int i = 2; i < num_nodes; ++i) {
        size *= static_cast<long long>(catalog.size()) * i;
        if (size < 0 || size > (1LL << 56)) throw UsageError("enumeration size overflow");
    }
    return size;
}

void CellSpace::validate() const {
    if (num_nodes < 3) throw UsageError("num_nodes must be >= 3");
    if (catalog.empty()) throw UsageError("op catalog must be nonempty");
    if (width <= 0 || output_dim <= 0 || num_cells <= 0) throw UsageError("invalid space dimensions");
    if (input.image) {
        if (input.c <= 0 || input.h <= 0 || input.w <= 0) throw UsageError("invalid image input dims");
    } else if (input.n0 <= 0) {
        throw UsageError("invalid vector input dim");
    }
    for (NodeOp op : catalog) {
        if (input.image && node_op_needs_vector(op))
            throw UsageError(std::string(node_op_name(op)) + " requires vector inputs");
        if (!input.image && node_op_needs_image(op))
            throw UsageError(std::string(node_op_name(op)) + " requires image inputs");
    }
}

std::string ArchId::to_string() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < choices.size(); ++i) {
        if (i) os << " ";
        os << (i + 2) << ":" << choices[i].first << "." << choices[i].second;
    }
    return os.str();
}

ArchId ArchId::from_string(const std::string& s) {
    ArchId a;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) {
        const auto colon = tok.find(':');
        const auto dot = tok.find('.', colon);
        if (colon == std::string::npos || dot == std::string::npos)
            throw UsageError("bad architecture string: " + s);
        a.choices.emplace_back(std::stoi(tok.substr(colon + 1, dot - colon - 1)),
                               std::stoi(tok.substr(dot + 1)));
    }
    return a;
}

void validate_arch(const CellSpace& space, const ArchId& arch) {
    if (static_cast<int>(arch.choices.size()) != space.num_intermediate())
        throw UsageError("architecture has wrong node count");
    for (int i = 2; i < space.num_nodes; ++i) {
        const auto [op, in] = arch.choices[static_cast<size_t>(i - 2)];
        if (op < 0 || op >= static_cast<int>(space.catalog.size()))
            throw UsageError("op index out of range at node " + std::to_string(i));
        if (in < 0 || in >= i) throw UsageError("input index out of range at node " + std::to_string(i));
    }
}

long long arch_rank(const CellSpace& space, const ArchId& arch) {
    validate_arch(space, arch);
    const long long c = static_cast<long long>(space.catalog.size());
    long long rank = 0;
    for (int i = 2; i < space.num_nodes; ++i) {
        const auto [op, in] = arch.choices[static_cast<size_t>(i - 2)];
        rank = rank * (c * i) + (static_cast<long long>(op) * i + in);
    }
    return rank;
}

ArchId arch_unrank(const CellSpace& space, long long rank) {
    const long long c = static_cast<long long>(space.catalog.size());
    ArchId a;
    a.choices.resize(static_cast<size_t>(space.num_intermediate()));
    for (int i = space.num_nodes - 1; i >= 2; --i) {
        const long long radix = c * i;
        const long long d = rank % radix;
        rank /= radix;
        a.choices[static_cast<size_t>(i - 2)] = {static_cast<int>(d / i), static_cast<int>(d % i)};
    }
    if (rank != 0) throw UsageError("architecture rank out of range");
    return a;
}

std::vector<ArchId> enumerate(const CellSpace& space, long long cap) {
    space.validate();
    const long long size = space.enum_size();
    if (size > cap)
        throw UsageError("enumeration refused: space has " + std::to_string(size) +
                         " architectures, cap is " + std::to_string(cap));
    std::vector<ArchId> out;
    out.reserve(static_cast<size_t>(size));
    for (long long r = 0; r < size; ++r) out.push_back(arch_unrank(space, r));
    return out;
}

// ---- alpha ------------------------------------------------------------------

AlphaParams AlphaParams::zeros(const CellSpace& space) {
    AlphaParams a;
    for (int i = 2; i < space.num_nodes; ++i) {
        a.op_logits.emplace_back(space.catalog.size(), 0.0);
        a.in_logits.emplace_back(static_cast<size_t>(i), 0.0);
    }
    return a;
}

std::size_t AlphaParams::flat_size() const {
    std::size_t n = 0;
    for (const auto& v : op_logits) n += v.size();
    for (const auto& v : in_logits) n += v.size();
    return n;
}

std::vector<double> AlphaParams::flatten() const {
    std::vector<double> out;
    out.reserve(flat_size());
    for (std::size_t i = 0; i < op_logits.size(); ++i) {
        out.insert(out.end(), op_logits[i].begin(), op_logits[i].end());
        out.insert(out.end(), in_logits[i].begin(), in_logits[i].end());
    }
    return out;
}

AlphaParams AlphaParams::unflatten(const CellSpace& space, const std::vector<double>& v) {
    AlphaParams a = zeros(space);
    std::size_t p = 0;
    for (std::size_t i = 0; i < a.op_logits.size(); ++i) {
        for (auto& x : a.op_logits[i]) x = v.at(p++);
        for (auto& x : a.in_logits[i]) x = v.at(p++);
    }
    if (p != v.size()) throw UsageError("alpha vector has wrong length");
    return a;
}

bool AlphaParams::all_finite() const {
    for (const auto& blk : {std::cref(op_logits), std::cref(in_logits)})
        for (const auto& v : blk.get())
            for (double x : v)
                if (!std::isfinite(x)) return false;
    return true;
}

namespace {

std::vector<double> softmax_vec(const std::vector<double>& z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    std::vector<double> out(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - mx);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

int argmax_lowest(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
    return best;
}

}  // namespace

GumbelSample sample_architecture(const CellSpace& space, const AlphaParams& alpha,
                                 const AlphaParams& gumbel, double tau) {
    if (tau <= 0.0) throw UsageError("tau must be positive");
    GumbelSample s;
    s.soft = AlphaParams::zeros(space);
    for (std::size_t i = 0; i < alpha.op_logits.size(); ++i) {
        std::vector<double> zo(alpha.op_logits[i].size()), zi(alpha.in_logits[i].size());
        for (std::size_t j = 0; j < zo.size(); ++j)
            zo[j] = (alpha.op_logits[i][j] + gumbel.op_logits[i][j]) / tau;
        for (std::size_t j = 0; j < zi.size(); ++j)
            zi[j] = (alpha.in_logits[i][j] + gumbel.in_logits[i][j]) / tau;
        s.soft.op_logits[i] = softmax_vec(zo);
        s.soft.in_logits[i] = softmax_vec(zi);
        s.arch.choices.emplace_back(argmax_lowest(s.soft.op_logits[i]),
                                    argmax_lowest(s.soft.in_logits[i]));
    }
    return s;
}

ArchId argmax_arch(const CellSpace& space, const AlphaParams& alpha) {
    ArchId a;
    for (std::size_t i = 0; i < alpha.op_logits.size(); ++i)
        a.choices.emplace_back(argmax_lowest(alpha.op_logits[i]), argmax_lowest(alpha.in_logits[i]));
    validate_arch(space, a);
    return a;
}

// ---- parameter layout ---------------------------------------------------------

namespace {

constexpr std::uint64_t kStemTag = 1, kHeadTag = 2, kProjTag = 3, kNodeTag = 4;

std::vector<int> node_op_param_shape(const CellSpace& space, NodeOp op) {
    const int k = space.width;
    switch (op) {
        case NodeOp::dense_relu:
        case NodeOp::dense_tanh: return {k, k};
        case NodeOp::conv3_relu: return {k, k, 3, 3};
        case NodeOp::conv1_relu: return {k, k, 1, 1};
        default: return {};
    }
}

int merged_width(const CellSpace& space) {
    return space.merge == MergeRule::concat ? space.width * space.num_intermediate() : space.width;
}

std::vector<int> stem_shape(const CellSpace& space) {
    return space.input.image ? std::vector<int>{space.width, space.input.c, 1, 1}
                             : std::vector<int>{space.width, space.input.n0};
}

std::vector<int> proj_shape(const CellSpace& space, int in_width) {
    if (in_width == space.width) return {};
    return space.input.image ? std::vector<int>{space.width, in_width, 1, 1}
                             : std::vector<int>{space.width, in_width};
}

std::vector<int> head_shape(const CellSpace& space) {
    // image features pass through a global average pool before the head
    return {space.output_dim, merged_width(space)};
}

void fill_normal(Tensor& theta, const ParamSlot& slot, std::uint64_t stream) {
    if (slot.numel() == 0) return;
    Rng rng(stream);
    double* p = theta.data() + slot.offset;
    for (std::size_t i = 0; i < slot.numel(); ++i) p[i] = rng.normal();
}

Tensor slice_theta(const Tensor& theta, const ParamSlot& slot) {
    return Tensor(slot.shape, std::vector<double>(theta.data() + slot.offset,
                                                  theta.data() + slot.offset + slot.numel()));
}

// Width of the wires feeding cell c (c >= 1); input 0 is the previous cell's
// merged output, input 1 the one before (the stem output for c == 1).
int cell_input_width(const CellSpace& space, int c, int which) {
    if (c == 0) return space.width;
    if (which == 0) return merged_width(space);
    return c >= 2 ? merged_width(space) : space.width;
}

int apply_node_op(Tape& tape, NodeOp op, int param_leaf, int in_wire) {
    switch (op) {
        case NodeOp::identity: return tape.identity(in_wire);
        case NodeOp::zero: return tape.zero_fn(in_wire);
        case NodeOp::dense_relu: return tape.relu(tape.dense(param_leaf, in_wire));
        case NodeOp::dense_tanh: return tape.tanh_fn(tape.dense(param_leaf, in_wire));
        case NodeOp::conv3_relu: return tape.relu(tape.conv3(param_leaf, in_wire));
        case NodeOp::conv1_relu: return tape.relu(tape.conv1(param_leaf, in_wire));
        case NodeOp::mean_pool3: return tape.mean_pool(in_wire);
    }
    throw UsageError("apply_node_op: unknown op");
}

int merge_wires(Tape& tape, MergeRule rule, const std::vector<int>& wires) {
    int acc = wires[0];
    for (std::size_t i = 1; i < wires.size(); ++i)
        acc = rule == MergeRule::sum ? tape.add(acc, wires[i]) : tape.concat_ch(acc, wires[i]);
    return acc;
}

int apply_stem(Tape& tape, const CellSpace& space, int stem_leaf, int x_wire) {
    return space.input.image ? tape.conv1(stem_leaf, x_wire) : tape.dense(stem_leaf, x_wire);
}

int apply_proj(Tape& tape, const CellSpace& space, int proj_leaf, int wire) {
    return space.input.image ? tape.conv1(proj_leaf, wire) : tape.dense(proj_leaf, wire);
}

}  // namespace

std::size_t param_count_formula(const CellSpace& space, const ArchId& arch) {
    std::size_t p = shape_numel(stem_shape(space));
    for (int c = 1; c < space.num_cells; ++c)
        for (int which = 0; which < 2; ++which) {
            const auto shape = proj_shape(space, cell_input_width(space, c, which));
            if (!shape.empty()) p += shape_numel(shape);
        }
    for (int c = 0; c < space.num_cells; ++c)
        for (int i = 2; i < space.num_nodes; ++i) {
            const NodeOp op = space.catalog[static_cast<size_t>(arch.choices[static_cast<size_t>(i - 2)].first)];
            const auto shape = node_op_param_shape(space, op);
            if (!shape.empty()) p += shape_numel(shape);
        }
    return p + shape_numel(head_shape(space));
}

// ---- ArchInstance -------------------------------------------------------------

ArchInstance::ArchInstance(CellSpace space, ArchId arch, std::uint64_t seed)
    : space_(std::move(space)), arch_(std::move(arch)), seed_(seed) {
    space_.validate();
    validate_arch(space_, arch_);

    std::size_t off = 0;
    auto alloc = [&](std::vector<int> shape) {
        ParamSlot s;
        s.shape = std::move(shape);
        s.offset = off;
        off += s.numel();
        return s;
    };

    stem_ = alloc(stem_shape(space_));
    proj_.assign(static_cast<size_t>(space_.num_cells), {});
    for (int c = 1; c < space_.num_cells; ++c)
        for (int which = 0; which < 2; ++which) {
            const auto shape = proj_shape(space_, cell_input_width(space_, c, which));
            if (!shape.empty()) proj_[static_cast<size_t>(c)][static_cast<size_t>(which)] = alloc(shape);
        }
    for (int c = 0; c < space_.num_cells; ++c)
        for (int i = 2; i < space_.num_nodes; ++i) {
            const int op_idx = arch_.choices[static_cast<size_t>(i - 2)].first;
            const auto shape = node_op_param_shape(space_, space_.catalog[static_cast<size_t>(op_idx)]);
            node_param_.push_back(shape.empty() ? ParamSlot{} : alloc(shape));
        }
    head_ = alloc(head_shape(space_));

    theta_ = Tensor({static_cast<int>(off)});
    fill_normal(theta_, stem_, mix64(seed_, kStemTag));
    fill_normal(theta_, head_, mix64(seed_, kHeadTag));
    for (int c = 1; c < space_.num_cells; ++c)
        for (int which = 0; which < 2; ++which)
            fill_normal(theta_, proj_[static_cast<size_t>(c)][static_cast<size_t>(which)],
                        mix64(seed_, kProjTag, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(which)));
    for (int c = 0; c < space_.num_cells; ++c)
        for (int i = 2; i < space_.num_nodes; ++i) {
            const int op_idx = arch_.choices[static_cast<size_t>(i - 2)].first;
            const ParamSlot& slot =
                node_param_[static_cast<size_t>(c) * space_.num_intermediate() + (i - 2)];
            fill_normal(theta_, slot,
                        mix64(seed_, kNodeTag, static_cast<std::uint64_t>(c) * 1000 + i,
                              static_cast<std::uint64_t>(op_idx)));
        }
}

void ArchInstance::set_theta(Tensor t) {
    if (t.size() != theta_.size()) throw ShapeError("set_theta: wrong parameter count");
    theta_ = std::move(t);
}

TapeNet ArchInstance::build(const Tensor& x) const {
    if (x.shape() != space_.input.shape())
        throw ShapeError("input shape " + x.shape_str() + " does not match space input " +
                         shape_to_string(space_.input.shape()));
    TapeNet net;
    Tape& T = net.tape;
    auto make_leaf = [&](const ParamSlot& slot) {
        const int id = T.leaf(slice_theta(theta_, slot));
        net.params.emplace_back(id, slot);
        return id;
    };

    const int xin = T.constant(x);
    const int stem_out = apply_stem(T, space_, make_leaf(stem_), xin);

    int prev = stem_out, prevprev = stem_out;
    std::vector<int> node_val(static_cast<size_t>(space_.num_nodes));
    for (int c = 0; c < space_.num_cells; ++c) {
        if (c == 0) {
            node_val[0] = node_val[1] = stem_out;
        } else {
            const auto& p0 = proj_[static_cast<size_t>(c)][0];
            const auto& p1 = proj_[static_cast<size_t>(c)][1];
            node_val[0] = p0.numel() ? apply_proj(T, space_, make_leaf(p0), prev) : prev;
            node_val[1] = p1.numel() ? apply_proj(T, space_, make_leaf(p1), prevprev) : prevprev;
        }
        std::vector<int> intermediates;
        for (int i = 2; i < space_.num_nodes; ++i) {
            const auto [op_idx, in_idx] = arch_.choices[static_cast<size_t>(i - 2)];
            const ParamSlot& slot =
                node_param_[static_cast<size_t>(c) * space_.num_intermediate() + (i - 2)];
            const int param_leaf = slot.numel() ? make_leaf(slot) : -1;
            node_val[static_cast<size_t>(i)] = apply_node_op(
                T, space_.catalog[static_cast<size_t>(op_idx)], param_leaf,
                node_val[static_cast<size_t>(in_idx)]);
            intermediates.push_back(node_val[static_cast<size_t>(i)]);
        }
        const int merged = merge_wires(T, space_.merge, intermediates);
        prevprev = c == 0 ? stem_out : prev;
        prev = merged;
    }

    const int feat = space_.input.image ? T.gap(prev) : prev;
    net.out = T.dense(make_leaf(head_), feat);
    return net;
}

ArchInstance instantiate(const CellSpace& space, const ArchId& arch, std::uint64_t seed) {
    return ArchInstance(space, arch, seed);
}

// ---- MlpChain ------------------------------------------------------------------

MlpChain::MlpChain(int n0, int width, int depth, int n_out, std::uint64_t seed)
    : n0_(n0), width_(width), depth_(depth), n_out_(n_out) {
    if (depth < 1) throw UsageError("depth must be >= 1");
    std::size_t off = 0;
    for (int l = 0; l < depth; ++l) {
        const int rows = l == depth - 1 ? n_out : width;
        const int cols = l == 0 ? n0 : width;
        ParamSlot s;
        s.shape = {rows, cols};
        s.offset = off;
        off += s.numel();
        layers_.push_back(std::move(s));
    }
    theta_ = Tensor({static_cast<int>(off)});
    for (int l = 0; l < depth; ++l)
        fill_normal(theta_, layers_[static_cast<size_t>(l)], mix64(seed, 10, static_cast<std::uint64_t>(l)));
}

void MlpChain::set_theta(Tensor t) {
    if (t.size() != theta_.size()) throw ShapeError("set_theta: wrong parameter count");
    theta_ = std::move(t);
}

TapeNet MlpChain::build(const Tensor& x) const {
    if (static_cast<int>(x.size()) != n0_)
        throw ShapeError("input size " + std::to_string(x.size()) + " does not match n0 " +
                         std::to_string(n0_));
    TapeNet net;
    Tape& T = net.tape;
    int h = T.constant(x);
    for (int l = 0; l < depth_; ++l) {
        const ParamSlot& slot = layers_[static_cast<size_t>(l)];
        const int leaf = T.leaf(slice_theta(theta_, slot));
        net.params.emplace_back(leaf, slot);
        h = T.dense(leaf, h);
        if (l < depth_ - 1) h = T.relu(h);
    }
    net.out = h;
    return net;
}

// ---- SuperNet -------------------------------------------------------------------

SuperNet::SuperNet(CellSpace space, std::uint64_t seed) : space_(std::move(space)), seed_(seed) {
    space_.validate();
    std::size_t off = 0;
    auto alloc = [&](std::vector<int> shape) {
        ParamSlot s;
        s.shape = std::move(shape);
        s.offset = off;
        off += s.numel();
        return s;
    };
    stem_ = alloc(stem_shape(space_));
    proj_.assign(static_cast<size_t>(space_.num_cells), {});
    for (int c = 1; c < space_.num_cells; ++c)
        for (int which = 0; which < 2; ++which) {
            const auto shape = proj_shape(space_, cell_input_width(space_, c, which));
            if (!shape.empty()) proj_[static_cast<size_t>(c)][static_cast<size_t>(which)] = alloc(shape);
        }
    for (int c = 0; c < space_.num_cells; ++c)
        for (int i = 2; i < space_.num_nodes; ++i)
            for (std::size_t o = 0; o < space_.catalog.size(); ++o) {
                const auto shape = node_op_param_shape(space_, space_.catalog[o]);
                node_op_param_.push_back(shape.empty() ? ParamSlot{} : alloc(shape));
            }
    head_ = alloc(head_shape(space_));

    theta_ = Tensor({static_cast<int>(off)});
    fill_normal(theta_, stem_, mix64(seed_, kStemTag));
    fill_normal(theta_, head_, mix64(seed_, kHeadTag));
    for (int c = 1; c < space_.num_cells; ++c)
        for (int which = 0; which < 2; ++which)
            fill_normal(theta_, proj_[static_cast<size_t>(c)][static_cast<size_t>(which)],
                        mix64(seed_, kProjTag, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(which)));
    const std::size_t cat = space_.catalog.size();
    for (int c = 0; c < space_.num_cells; ++c)
        for (int i = 2; i < space_.num_nodes; ++i)
            for (std::size_t o = 0; o < cat; ++o) {
                const std::size_t idx =
                    (static_cast<size_t>(c) * space_.num_intermediate() + (i - 2)) * cat + o;
                fill_normal(theta_, node_op_param_[idx],
                            mix64(seed_, kNodeTag, static_cast<std::uint64_t>(c) * 1000 + i,
                                  static_cast<std::uint64_t>(o)));
            }
}

SuperNet::MixedTape SuperNet::build_mixed(const Tensor& x, const GumbelSample& sample,
                                          bool hard) const {
    if (x.shape() != space_.input.shape())
        throw ShapeError("input shape " + x.shape_str() + " does not match space input " +
                         shape_to_string(space_.input.shape()));
    MixedTape net;
    Tape& T = net.tape;
    auto make_leaf = [&](const ParamSlot& slot) {
        const int id = T.leaf(slice_theta(theta_, slot));
        net.params.emplace_back(id, slot);
        return id;
    };

    // one weight leaf per (node, choice); shared across stacked cells
    const std::size_t cat = space_.catalog.size();
    net.op_w.resize(static_cast<size_t>(space_.num_intermediate()));
    net.in_w.resize(static_cast<size_t>(space_.num_intermediate()));
    for (int i = 2; i < space_.num_nodes; ++i) {
        const std::size_t ni = static_cast<size_t>(i - 2);
        const auto [sel_op, sel_in] = sample.arch.choices[ni];
        for (std::size_t o = 0; o < cat; ++o) {
            const double v = hard ? (static_cast<int>(o) == sel_op ? 1.0 : 0.0)
                                  : sample.soft.op_logits[ni][o];
            net.op_w[ni].push_back(T.leaf(Tensor::scalar(v)));
        }
        for (int j = 0; j < i; ++j) {
            const double v = hard ? (j == sel_in ? 1.0 : 0.0)
                                  : sample.soft.in_logits[ni][static_cast<size_t>(j)];
            net.in_w[ni].push_back(T.leaf(Tensor::scalar(v)));
        }
    }

    const int xin = T.constant(x);
    const int stem_out = apply_stem(T, space_, make_leaf(stem_), xin);

    int prev = stem_out, prevprev = stem_out;
    std::vector<int> node_val(static_cast<size_t>(space_.num_nodes));
    for (int c = 0; c < space_.num_cells; ++c) {
        if (c == 0) {
            node_val[0] = node_val[1] = stem_out;
        } else {
            const auto& p0 = proj_[static_cast<size_t>(c)][0];
            const auto& p1 = proj_[static_cast<size_t>(c)][1];
            node_val[0] = p0.numel() ? apply_proj(T, space_, make_leaf(p0), prev) : prev;
            node_val[1] = p1.numel() ? apply_proj(T, space_, make_leaf(p1), prevprev) : prevprev;
        }
        std::vector<int> intermediates;
        for (int i = 2; i < space_.num_nodes; ++i) {
            const std::size_t ni = static_cast<size_t>(i - 2);
            int mixed_in = -1;
            for (int j = 0; j < i; ++j) {
                const int term = T.smul(net.in_w[ni][static_cast<size_t>(j)],
                                        node_val[static_cast<size_t>(j)]);
                mixed_in = mixed_in < 0 ? term : T.add(mixed_in, term);
            }
            int mixed_out = -1;
            for (std::size_t o = 0; o < cat; ++o) {
                const std::size_t idx = (static_cast<size_t>(c) * space_.num_intermediate() + ni) * cat + o;
                const ParamSlot& slot = node_op_param_[idx];
                const int param_leaf = slot.numel() ? make_leaf(slot) : -1;
                const int v = apply_node_op(T, space_.catalog[o], param_leaf, mixed_in);
                const int term = T.smul(net.op_w[ni][o], v);
                mixed_out = mixed_out < 0 ? term : T.add(mixed_out, term);
            }
            node_val[static_cast<size_t>(i)] = mixed_out;
            intermediates.push_back(mixed_out);
        }
        const int merged = merge_wires(T, space_.merge, intermediates);
        prevprev = c == 0 ? stem_out : prev;
        prev = merged;
    }

    const int feat = space_.input.image ? T.gap(prev) : prev;
    net.out = T.dense(make_leaf(head_), feat);
    return net;
}

// ---- shared tape utilities -------------------------------------------------------

void apply_theta(TapeNet& net, const Tensor& theta) {
    for (const auto& [leaf, slot] : net.params) net.tape.set_leaf_value(leaf, slice_theta(theta, slot));
    net.tape.replay();
}

Tensor flatten_grads(const TapeNet& net, const std::vector<Tensor>& node_grads, std::size_t p) {
    Tensor flat({static_cast<int>(p)});
    for (const auto& [leaf, slot] : net.params) {
        const Tensor& g = node_grads[static_cast<size_t>(leaf)];
        if (g.size() == 0) continue;  // leaf untouched by the output: zero gradient
        std::copy(g.data(), g.data() + g.size(), flat.data() + slot.offset);
    }
    return flat;
}

// ---- presets ----------------------------------------------------------------------

std::vector<NodeOp> default_vector_catalog() {
    return {NodeOp::identity, NodeOp::zero, NodeOp::dense_relu, NodeOp::dense_tanh};
}

std::vector<NodeOp> default_image_catalog() {
    return {NodeOp::identity, NodeOp::zero, NodeOp::conv3_relu, NodeOp::conv1_relu,
            NodeOp::mean_pool3};
}

CellSpace micro_vec_space(int num_nodes, int n0, int n_out, int width) {
    CellSpace s;
    s.num_nodes = num_nodes;
    s.catalog = default_vector_catalog();
    s.merge = MergeRule::sum;
    s.input.image = false;
    s.input.n0 = n0;
    s.output_dim = n_out;
    s.width = width;
    s.num_cells = 1;
    return s;
}

CellSpace micro_conv_space(int num_nodes, int channels, int hw, int n_out, int width) {
    CellSpace s;
    s.num_nodes = num_nodes;
    // four ops keep the N=4 space at 96 architectures with the complexity
    // extremes (zero / identity / 1x1 / 3x3) still represented; concatenation
    // keeps duplicated intermediate wires from inflating the merged signal
    s.catalog = {NodeOp::identity, NodeOp::zero, NodeOp::conv1_relu, NodeOp::conv3_relu};
    s.merge = MergeRule::concat;
    s.input.image = true;
    s.input.c = channels;
    s.input.h = hw;
    s.input.w = hw;
    s.output_dim = n_out;
    s.width = width;
    s.num_cells = 1;
    return s;
}

}  // namespace tracenas
