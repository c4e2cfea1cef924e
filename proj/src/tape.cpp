#include "tracenas/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tracenas {

namespace {

[[noreturn]] void shape_fail(const char* kind, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(kind) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
}

void expect_matrix(const char* kind, const Tensor& w) {
    if (w.rank() != 2) throw ShapeError(std::string(kind) + ": expected matrix, got " + w.shape_str());
}

void expect_image(const char* kind, const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError(std::string(kind) + ": expected (c,h,w) tensor, got " + x.shape_str());
}

void expect_kernel(const char* kind, const Tensor& k, int ks) {
    if (k.rank() != 4 || k.dim(2) != ks || k.dim(3) != ks)
        throw ShapeError(std::string(kind) + ": expected (co,ci," + std::to_string(ks) + "," +
                         std::to_string(ks) + ") kernel, got " + k.shape_str());
}

// ---- kernels ---------------------------------------------------------------

Tensor k_matvec(const Tensor& w, const Tensor& x, double c) {
    const int r = w.dim(0), k = w.dim(1);
    Tensor y({r});
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        const double* row = w.data() + static_cast<size_t>(i) * k;
        for (int j = 0; j < k; ++j) s += row[j] * x[static_cast<size_t>(j)];
        y[static_cast<size_t>(i)] = c * s;
    }
    return y;
}

Tensor k_matvec_t(const Tensor& w, const Tensor& g, double c) {
    const int r = w.dim(0), k = w.dim(1);
    Tensor y({k});
    for (int i = 0; i < r; ++i) {
        const double* row = w.data() + static_cast<size_t>(i) * k;
        const double gi = c * g[static_cast<size_t>(i)];
        for (int j = 0; j < k; ++j) y[static_cast<size_t>(j)] += gi * row[j];
    }
    return y;
}

Tensor k_outer(const Tensor& u, const Tensor& v, double c) {
    const int r = static_cast<int>(u.size()), k = static_cast<int>(v.size());
    Tensor y({r, k});
    for (int i = 0; i < r; ++i) {
        const double ui = c * u[static_cast<size_t>(i)];
        double* row = y.data() + static_cast<size_t>(i) * k;
        for (int j = 0; j < k; ++j) row[j] = ui * v[static_cast<size_t>(j)];
    }
    return y;
}

// 3x3, stride 1, zero pad 1
Tensor k_conv3(const Tensor& kk, const Tensor& x, double c) {
    const int co = kk.dim(0), ci = kk.dim(1), h = x.dim(1), w = x.dim(2);
    Tensor y({co, h, w});
    for (int o = 0; o < co; ++o)
        for (int i = 0; i < ci; ++i) {
            const double* kbase = kk.data() + (static_cast<size_t>(o) * ci + i) * 9;
            const double* xbase = x.data() + static_cast<size_t>(i) * h * w;
            double* ybase = y.data() + static_cast<size_t>(o) * h * w;
            for (int yy = 0; yy < h; ++yy)
                for (int dy = 0; dy < 3; ++dy) {
                    const int sy = yy + dy - 1;
                    if (sy < 0 || sy >= h) continue;
                    const double* xrow = xbase + static_cast<size_t>(sy) * w;
                    double* yrow = ybase + static_cast<size_t>(yy) * w;
                    for (int dx = 0; dx < 3; ++dx) {
                        const double kv = kbase[dy * 3 + dx];
                        const int off = dx - 1;
                        const int x0 = std::max(0, -off), x1 = std::min(w, w - off);
                        for (int xx = x0; xx < x1; ++xx) yrow[xx] += kv * xrow[xx + off];
                    }
                }
        }
    if (c != 1.0)
        for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c;
    return y;
}

Tensor k_conv3_dx(const Tensor& g, const Tensor& kk, double c) {
    const int co = kk.dim(0), ci = kk.dim(1), h = g.dim(1), w = g.dim(2);
    Tensor dx({ci, h, w});
    for (int o = 0; o < co; ++o)
        for (int i = 0; i < ci; ++i) {
            const double* kbase = kk.data() + (static_cast<size_t>(o) * ci + i) * 9;
            const double* gbase = g.data() + static_cast<size_t>(o) * h * w;
            double* xbase = dx.data() + static_cast<size_t>(i) * h * w;
            for (int yy = 0; yy < h; ++yy)
                for (int dy = 0; dy < 3; ++dy) {
                    const int sy = yy + dy - 1;  // output row this input row fed
                    if (sy < 0 || sy >= h) continue;
                    // dX[i,yy,xx] += G[o, yy+dy-1 ... ] with reflected taps
                    const double* grow = gbase + static_cast<size_t>(sy) * w;
                    double* xrow = xbase + static_cast<size_t>(yy) * w;
                    for (int dx_ = 0; dx_ < 3; ++dx_) {
                        const double kv = kbase[(2 - dy) * 3 + (2 - dx_)];
                        const int off = dx_ - 1;
                        const int x0 = std::max(0, -off), x1 = std::min(w, w - off);
                        for (int xx = x0; xx < x1; ++xx) xrow[xx] += kv * grow[xx + off];
                    }
                }
        }
    if (c != 1.0)
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= c;
    return dx;
}

Tensor k_conv3_dw(const Tensor& x, const Tensor& g, double c) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2), co = g.dim(0);
    Tensor dk({co, ci, 3, 3});
    for (int o = 0; o < co; ++o)
        for (int i = 0; i < ci; ++i) {
            double* kbase = dk.data() + (static_cast<size_t>(o) * ci + i) * 9;
            const double* gbase = g.data() + static_cast<size_t>(o) * h * w;
            const double* xbase = x.data() + static_cast<size_t>(i) * h * w;
            for (int dy = 0; dy < 3; ++dy)
                for (int dx_ = 0; dx_ < 3; ++dx_) {
                    double s = 0.0;
                    for (int yy = 0; yy < h; ++yy) {
                        const int sy = yy + dy - 1;
                        if (sy < 0 || sy >= h) continue;
                        const double* grow = gbase + static_cast<size_t>(yy) * w;
                        const double* xrow = xbase + static_cast<size_t>(sy) * w;
                        const int off = dx_ - 1;
                        const int x0 = std::max(0, -off), x1 = std::min(w, w - off);
                        for (int xx = x0; xx < x1; ++xx) s += grow[xx] * xrow[xx + off];
                    }
                    kbase[dy * 3 + dx_] = c * s;
                }
        }
    return dk;
}

Tensor k_conv1(const Tensor& kk, const Tensor& x, double c) {
    const int co = kk.dim(0), ci = kk.dim(1), h = x.dim(1), w = x.dim(2);
    const int hw = h * w;
    Tensor y({co, h, w});
    for (int o = 0; o < co; ++o) {
        double* ybase = y.data() + static_cast<size_t>(o) * hw;
        for (int i = 0; i < ci; ++i) {
            const double kv = c * kk[static_cast<size_t>(o) * ci + i];
            const double* xbase = x.data() + static_cast<size_t>(i) * hw;
            for (int p = 0; p < hw; ++p) ybase[p] += kv * xbase[p];
        }
    }
    return y;
}

Tensor k_conv1_dx(const Tensor& g, const Tensor& kk, double c) {
    const int co = kk.dim(0), ci = kk.dim(1), h = g.dim(1), w = g.dim(2);
    const int hw = h * w;
    Tensor dx({ci, h, w});
    for (int o = 0; o < co; ++o) {
        const double* gbase = g.data() + static_cast<size_t>(o) * hw;
        for (int i = 0; i < ci; ++i) {
            const double kv = c * kk[static_cast<size_t>(o) * ci + i];
            double* xbase = dx.data() + static_cast<size_t>(i) * hw;
            for (int p = 0; p < hw; ++p) xbase[p] += kv * gbase[p];
        }
    }
    return dx;
}

Tensor k_conv1_dw(const Tensor& x, const Tensor& g, double c) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2), co = g.dim(0);
    const int hw = h * w;
    Tensor dk({co, ci, 1, 1});
    for (int o = 0; o < co; ++o) {
        const double* gbase = g.data() + static_cast<size_t>(o) * hw;
        for (int i = 0; i < ci; ++i) {
            const double* xbase = x.data() + static_cast<size_t>(i) * hw;
            double s = 0.0;
            for (int p = 0; p < hw; ++p) s += gbase[p] * xbase[p];
            dk[static_cast<size_t>(o) * ci + i] = c * s;
        }
    }
    return dk;
}

Tensor k_mean_pool(const Tensor& x) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y({ci, h, w});
    for (int i = 0; i < ci; ++i) {
        const double* xbase = x.data() + static_cast<size_t>(i) * h * w;
        double* ybase = y.data() + static_cast<size_t>(i) * h * w;
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) {
                double s = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int sy = yy + dy, sx = xx + dx;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                        s += xbase[sy * w + sx];
                    }
                ybase[yy * w + xx] = s / 9.0;
            }
    }
    return y;
}

Tensor k_max_pool(const Tensor& x, std::vector<int>& idx) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y({ci, h, w});
    idx.assign(x.size(), 0);
    for (int i = 0; i < ci; ++i) {
        const std::size_t base = static_cast<size_t>(i) * h * w;
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) {
                double best = -std::numeric_limits<double>::infinity();
                int bestp = -1;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int sy = yy + dy, sx = xx + dx;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                        const int p = sy * w + sx;
                        const double v = x[base + static_cast<size_t>(p)];
                        if (v > best) {  // ties keep the first (lowest flat index)
                            best = v;
                            bestp = p;
                        }
                    }
                y[base + static_cast<size_t>(yy * w + xx)] = best;
                idx[base + static_cast<size_t>(yy * w + xx)] = static_cast<int>(base) + bestp;
            }
    }
    return y;
}

Tensor k_softmax(const Tensor& x) {
    Tensor y(x.shape());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < x.size(); ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = std::exp(x[i] - mx);
        z += y[i];
    }
    for (std::size_t i = 0; i < y.size(); ++i) y[i] /= z;
    return y;
}

double k_logsumexp(const Tensor& x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < x.size(); ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) z += std::exp(x[i] - mx);
    return mx + std::log(z);
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::constant: return "constant";
        case Op::matvec: return "matvec";
        case Op::matvec_t: return "matvec_t";
        case Op::outer: return "outer";
        case Op::conv3: return "conv3";
        case Op::conv3_dx: return "conv3_dx";
        case Op::conv3_dw: return "conv3_dw";
        case Op::conv1: return "conv1";
        case Op::conv1_dx: return "conv1_dx";
        case Op::conv1_dw: return "conv1_dw";
        case Op::relu: return "relu";
        case Op::tanh_fn: return "tanh";
        case Op::add: return "add";
        case Op::concat_ch: return "concat-channels";
        case Op::mean_pool: return "mean-pool";
        case Op::max_pool: return "max-pool";
        case Op::scale: return "scale";
        case Op::softmax: return "softmax";
        case Op::identity: return "identity";
        case Op::zero_fn: return "zero";
        case Op::mul: return "mul";
        case Op::sub: return "sub";
        case Op::smul: return "smul";
        case Op::sumall: return "sumall";
        case Op::bcast: return "bcast";
        case Op::heaviside: return "heaviside";
        case Op::unpool: return "unpool";
        case Op::gather: return "gather";
        case Op::gap: return "gap";
        case Op::gap_t: return "gap_t";
        case Op::reshape: return "reshape";
        case Op::slice_ch: return "slice_ch";
        case Op::pad_ch: return "pad_ch";
        case Op::ce_softmax: return "ce_softmax";
    }
    return "?";
}

Tensor Tape::eval(const Node& n) const {
    const auto& A = [&]() -> const Tensor& { return nodes_[static_cast<size_t>(n.a)].val; };
    const auto& B = [&]() -> const Tensor& { return nodes_[static_cast<size_t>(n.b)].val; };
    switch (n.op) {
        case Op::leaf:
        case Op::constant: return n.val;
        case Op::matvec: return k_matvec(A(), B(), n.c);
        case Op::matvec_t: return k_matvec_t(A(), B(), n.c);
        case Op::outer: return k_outer(A(), B(), n.c);
        case Op::conv3: return k_conv3(A(), B(), n.c);
        case Op::conv3_dx: return k_conv3_dx(A(), B(), n.c);
        case Op::conv3_dw: return k_conv3_dw(A(), B(), n.c);
        case Op::conv1: return k_conv1(A(), B(), n.c);
        case Op::conv1_dx: return k_conv1_dx(A(), B(), n.c);
        case Op::conv1_dw: return k_conv1_dw(A(), B(), n.c);
        case Op::relu: {
            Tensor y(A().shape());
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = A()[i] > 0.0 ? A()[i] : 0.0;
            return y;
        }
        case Op::tanh_fn: {
            Tensor y(A().shape());
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(A()[i]);
            return y;
        }
        case Op::add: {
            Tensor y = A();
            y += B();
            return y;
        }
        case Op::concat_ch: {
            const Tensor &a = A(), &b = B();
            std::vector<int> shape = a.shape();
            shape[0] += b.dim(0);
            Tensor y(shape);
            std::copy(a.data(), a.data() + a.size(), y.data());
            std::copy(b.data(), b.data() + b.size(), y.data() + a.size());
            return y;
        }
        case Op::mean_pool: return k_mean_pool(A());
        case Op::max_pool: return k_max_pool(A(), *n.idx);
        case Op::scale: {
            Tensor y = A();
            y *= n.c;
            return y;
        }
        case Op::softmax: return k_softmax(A());
        case Op::identity: return A();
        case Op::zero_fn: return Tensor::zeros(A().shape());
        case Op::mul: {
            Tensor y(A().shape());
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = A()[i] * B()[i];
            return y;
        }
        case Op::sub: {
            Tensor y = A();
            y.axpy(-1.0, B());
            return y;
        }
        case Op::smul: {
            Tensor y = B();
            y *= A()[0];
            return y;
        }
        case Op::sumall: return Tensor::scalar(A().sum());
        case Op::bcast: return Tensor::full(n.tshape, A()[0]);
        case Op::heaviside: {
            Tensor y(A().shape());
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = A()[i] > 0.0 ? 1.0 : 0.0;
            return y;
        }
        case Op::unpool: {
            Tensor y(n.tshape);
            const Tensor& g = A();
            for (std::size_t i = 0; i < g.size(); ++i) y[static_cast<size_t>((*n.idx)[i])] += g[i];
            return y;
        }
        case Op::gather: {
            Tensor y(n.tshape);
            const Tensor& u = A();
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = u[static_cast<size_t>((*n.idx)[i])];
            return y;
        }
        case Op::gap: {
            const Tensor& x = A();
            const int ci = x.dim(0), hw = x.dim(1) * x.dim(2);
            Tensor y({ci});
            for (int i = 0; i < ci; ++i) {
                double s = 0.0;
                const double* base = x.data() + static_cast<size_t>(i) * hw;
                for (int p = 0; p < hw; ++p) s += base[p];
                y[static_cast<size_t>(i)] = s / hw;
            }
            return y;
        }
        case Op::gap_t: {
            const Tensor& s = A();
            const int ci = static_cast<int>(s.size()), h = n.i0, w = n.i1;
            Tensor y({ci, h, w});
            for (int i = 0; i < ci; ++i) {
                const double v = s[static_cast<size_t>(i)] / (h * w);
                double* base = y.data() + static_cast<size_t>(i) * h * w;
                for (int p = 0; p < h * w; ++p) base[p] = v;
            }
            return y;
        }
        case Op::reshape: {
            Tensor y = A();
            return Tensor(n.tshape, std::vector<double>(y.data(), y.data() + y.size()));
        }
        case Op::slice_ch: {
            const Tensor& x = A();
            std::vector<int> shape = x.shape();
            const std::size_t stride = x.size() / static_cast<size_t>(shape[0]);
            shape[0] = n.i1;
            Tensor y(shape);
            std::copy(x.data() + static_cast<size_t>(n.i0) * stride,
                      x.data() + static_cast<size_t>(n.i0 + n.i1) * stride, y.data());
            return y;
        }
        case Op::pad_ch: {
            const Tensor& x = A();
            std::vector<int> shape = x.shape();
            const std::size_t stride = x.size() / static_cast<size_t>(shape[0]);
            shape[0] = n.i1;
            Tensor y(shape);
            std::copy(x.data(), x.data() + x.size(), y.data() + static_cast<size_t>(n.i0) * stride);
            return y;
        }
        case Op::ce_softmax: return Tensor::scalar(k_logsumexp(A()) - A().dot(B()));
    }
    throw UsageError("eval: unknown op");
}

int Tape::push(Node n) {
    if (n.op != Op::leaf && n.op != Op::constant) n.val = eval(n);
    if (!n.val.all_finite())
        throw NumericError(std::string("non-finite output from ") + op_name(n.op));
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Tensor v) {
    if (!v.all_finite()) throw NumericError("non-finite leaf tensor");
    Node n;
    n.op = Op::leaf;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::constant(Tensor v) {
    if (!v.all_finite()) throw NumericError("non-finite constant tensor");
    Node n;
    n.op = Op::constant;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::matvec(int w, int x, double c) {
    expect_matrix("matvec", value(w));
    if (value(w).dim(1) != static_cast<int>(value(x).size()))
        shape_fail("matvec", value(w), value(x));
    Node n;
    n.op = Op::matvec;
    n.a = w;
    n.b = x;
    n.c = c;
    return push(std::move(n));
}

int Tape::matvec_t(int w, int g, double c) {
    expect_matrix("matvec_t", value(w));
    if (value(w).dim(0) != static_cast<int>(value(g).size()))
        shape_fail("matvec_t", value(w), value(g));
    Node n;
    n.op = Op::matvec_t;
    n.a = w;
    n.b = g;
    n.c = c;
    return push(std::move(n));
}

int Tape::outer(int u, int v, double c) {
    Node n;
    n.op = Op::outer;
    n.a = u;
    n.b = v;
    n.c = c;
    return push(std::move(n));
}

int Tape::dense(int params, int x) {
    expect_matrix("dense", value(params));
    const int fan_in = value(params).dim(1);
    if (fan_in != static_cast<int>(value(x).size())) shape_fail("dense", value(params), value(x));
    return matvec(params, x, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

int Tape::conv3(int params, int x) {
    expect_kernel("conv2d-3x3", value(params), 3);
    expect_image("conv2d-3x3", value(x));
    if (value(params).dim(1) != value(x).dim(0)) shape_fail("conv2d-3x3", value(params), value(x));
    Node n;
    n.op = Op::conv3;
    n.a = params;
    n.b = x;
    n.c = 1.0 / std::sqrt(static_cast<double>(value(params).dim(1) * 9));
    return push(std::move(n));
}

int Tape::conv1(int params, int x) {
    expect_kernel("conv2d-1x1", value(params), 1);
    expect_image("conv2d-1x1", value(x));
    if (value(params).dim(1) != value(x).dim(0)) shape_fail("conv2d-1x1", value(params), value(x));
    Node n;
    n.op = Op::conv1;
    n.a = params;
    n.b = x;
    n.c = 1.0 / std::sqrt(static_cast<double>(value(params).dim(1)));
    return push(std::move(n));
}

int Tape::relu(int x) {
    Node n;
    n.op = Op::relu;
    n.a = x;
    return push(std::move(n));
}

int Tape::tanh_fn(int x) {
    Node n;
    n.op = Op::tanh_fn;
    n.a = x;
    return push(std::move(n));
}

int Tape::add(int a, int b) {
    if (!value(a).same_shape(value(b))) shape_fail("add", value(a), value(b));
    Node n;
    n.op = Op::add;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

int Tape::concat_ch(int a, int b) {
    const Tensor &ta = value(a), &tb = value(b);
    if (ta.rank() != tb.rank()) shape_fail("concat-channels", ta, tb);
    for (int d = 1; d < ta.rank(); ++d)
        if (ta.dim(d) != tb.dim(d)) shape_fail("concat-channels", ta, tb);
    Node n;
    n.op = Op::concat_ch;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

int Tape::mean_pool(int x) {
    expect_image("mean-pool", value(x));
    Node n;
    n.op = Op::mean_pool;
    n.a = x;
    return push(std::move(n));
}

int Tape::max_pool(int x) {
    expect_image("max-pool", value(x));
    Node n;
    n.op = Op::max_pool;
    n.a = x;
    n.idx = std::make_shared<std::vector<int>>();
    return push(std::move(n));
}

int Tape::scale(int x, double c) {
    Node n;
    n.op = Op::scale;
    n.a = x;
    n.c = c;
    return push(std::move(n));
}

int Tape::softmax(int x) {
    Node n;
    n.op = Op::softmax;
    n.a = x;
    return push(std::move(n));
}

int Tape::identity(int x) {
    Node n;
    n.op = Op::identity;
    n.a = x;
    return push(std::move(n));
}

int Tape::zero_fn(int x) {
    Node n;
    n.op = Op::zero_fn;
    n.a = x;
    return push(std::move(n));
}

int Tape::mul(int a, int b) {
    if (!value(a).same_shape(value(b))) shape_fail("mul", value(a), value(b));
    Node n;
    n.op = Op::mul;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

int Tape::sub(int a, int b) {
    if (!value(a).same_shape(value(b))) shape_fail("sub", value(a), value(b));
    Node n;
    n.op = Op::sub;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

int Tape::smul(int s, int x) {
    if (value(s).size() != 1) throw ShapeError("smul: scalar operand must have size 1");
    Node n;
    n.op = Op::smul;
    n.a = s;
    n.b = x;
    return push(std::move(n));
}

int Tape::sumall(int x) {
    Node n;
    n.op = Op::sumall;
    n.a = x;
    return push(std::move(n));
}

int Tape::bcast(int s, std::vector<int> shape) {
    if (value(s).size() != 1) throw ShapeError("bcast: scalar operand must have size 1");
    Node n;
    n.op = Op::bcast;
    n.a = s;
    n.tshape = std::move(shape);
    return push(std::move(n));
}

int Tape::heaviside(int x) {
    Node n;
    n.op = Op::heaviside;
    n.a = x;
    return push(std::move(n));
}

int Tape::gap(int x) {
    expect_image("gap", value(x));
    Node n;
    n.op = Op::gap;
    n.a = x;
    return push(std::move(n));
}

int Tape::gap_t(int s, int h, int w) {
    Node n;
    n.op = Op::gap_t;
    n.a = s;
    n.i0 = h;
    n.i1 = w;
    return push(std::move(n));
}

int Tape::reshape(int x, std::vector<int> shape) {
    if (shape_numel(shape) != value(x).size())
        throw ShapeError("reshape: size mismatch for " + shape_to_string(shape));
    Node n;
    n.op = Op::reshape;
    n.a = x;
    n.tshape = std::move(shape);
    return push(std::move(n));
}

int Tape::slice_ch(int x, int offset, int count) {
    if (offset < 0 || count <= 0 || offset + count > value(x).dim(0))
        throw ShapeError("slice_ch: range out of bounds");
    Node n;
    n.op = Op::slice_ch;
    n.a = x;
    n.i0 = offset;
    n.i1 = count;
    return push(std::move(n));
}

int Tape::pad_ch(int x, int offset, int total) {
    if (offset < 0 || offset + value(x).dim(0) > total) throw ShapeError("pad_ch: range out of bounds");
    Node n;
    n.op = Op::pad_ch;
    n.a = x;
    n.i0 = offset;
    n.i1 = total;
    return push(std::move(n));
}

int Tape::ce_softmax(int logits, int onehot) {
    if (!value(logits).same_shape(value(onehot))) shape_fail("ce_softmax", value(logits), value(onehot));
    Node n;
    n.op = Op::ce_softmax;
    n.a = logits;
    n.b = onehot;
    return push(std::move(n));
}

int Tape::mse_sum(int pred, int target) {
    const int d = sub(pred, target);
    return sumall(mul(d, d));
}

int Tape::dot(int a, int b) { return sumall(mul(a, b)); }

void Tape::set_leaf_value(int id, Tensor v) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.op != Op::leaf && n.op != Op::constant) throw UsageError("set_leaf_value: node is not a terminal");
    if (!v.same_shape(n.val)) shape_fail("set_leaf_value", v, n.val);
    n.val = std::move(v);
}

void Tape::replay() {
    for (auto& n : nodes_) {
        if (n.op == Op::leaf || n.op == Op::constant) continue;
        n.val = eval(n);
        if (!n.val.all_finite())
            throw NumericError(std::string("non-finite output from ") + op_name(n.op) + " during replay");
    }
}

// ---- plain (value-level) backward ------------------------------------------

namespace {

void accum(std::vector<Tensor>& g, int j, Tensor contrib) {
    Tensor& slot = g[static_cast<size_t>(j)];
    if (slot.size() == 0)
        slot = std::move(contrib);
    else
        slot += contrib;
}

void accum_scaled(std::vector<Tensor>& g, int j, const Tensor& contrib, double c) {
    Tensor& slot = g[static_cast<size_t>(j)];
    if (slot.size() == 0) {
        slot = Tensor::zeros(contrib.shape());
    }
    slot.axpy(c, contrib);
}

}  // namespace

std::vector<Tensor> Tape::backward(int output, const Tensor& seed) const {
    if (output < 0 || output >= size()) throw UsageError("backward: output id out of range");
    if (!seed.same_shape(value(output)))
        throw UsageError("backward: seed shape " + seed.shape_str() + " does not match output shape " +
                         value(output).shape_str());
    std::vector<Tensor> g(nodes_.size());
    g[static_cast<size_t>(output)] = seed;
    for (int i = output; i >= 0; --i) {
        const Node& n = nodes_[static_cast<size_t>(i)];
        Tensor& gi = g[static_cast<size_t>(i)];
        if (gi.size() == 0) continue;
        const auto& A = [&]() -> const Tensor& { return nodes_[static_cast<size_t>(n.a)].val; };
        const auto& B = [&]() -> const Tensor& { return nodes_[static_cast<size_t>(n.b)].val; };
        switch (n.op) {
            case Op::leaf:
            case Op::constant: break;
            case Op::matvec:
                accum(g, n.a, k_outer(gi, B(), n.c));
                accum(g, n.b, k_matvec_t(A(), gi, n.c));
                break;
            case Op::matvec_t:
                accum(g, n.a, k_outer(B(), gi, n.c));
                accum(g, n.b, k_matvec(A(), gi, n.c));
                break;
            case Op::outer:
                accum(g, n.a, k_matvec(gi, B(), n.c));
                accum(g, n.b, k_matvec_t(gi, A(), n.c));
                break;
            case Op::conv3:
                accum(g, n.a, k_conv3_dw(B(), gi, n.c));
                accum(g, n.b, k_conv3_dx(gi, A(), n.c));
                break;
            case Op::conv3_dx:
                // out = c * A_K^T g  with inputs (g, K)
                accum(g, n.a, k_conv3(B(), gi, n.c));
                accum(g, n.b, k_conv3_dw(gi, A(), n.c));
                break;
            case Op::conv3_dw:
                // out = c * B(x, g) with inputs (x, g)
                accum(g, n.a, k_conv3_dx(B(), gi, n.c));
                accum(g, n.b, k_conv3(gi, A(), n.c));
                break;
            case Op::conv1:
                accum(g, n.a, k_conv1_dw(B(), gi, n.c));
                accum(g, n.b, k_conv1_dx(gi, A(), n.c));
                break;
            case Op::conv1_dx:
                accum(g, n.a, k_conv1(B(), gi, n.c));
                accum(g, n.b, k_conv1_dw(gi, A(), n.c));
                break;
            case Op::conv1_dw:
                accum(g, n.a, k_conv1_dx(B(), gi, n.c));
                accum(g, n.b, k_conv1(gi, A(), n.c));
                break;
            case Op::relu: {
                Tensor d(gi.shape());
                for (std::size_t p = 0; p < d.size(); ++p) d[p] = A()[p] > 0.0 ? gi[p] : 0.0;
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::tanh_fn: {
                Tensor d(gi.shape());
                for (std::size_t p = 0; p < d.size(); ++p) d[p] = gi[p] * (1.0 - n.val[p] * n.val[p]);
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::add:
                accum(g, n.a, gi);
                accum(g, n.b, gi);
                break;
            case Op::concat_ch: {
                const std::size_t na = A().size();
                Tensor da(A().shape()), db(B().shape());
                std::copy(gi.data(), gi.data() + na, da.data());
                std::copy(gi.data() + na, gi.data() + gi.size(), db.data());
                accum(g, n.a, std::move(da));
                accum(g, n.b, std::move(db));
                break;
            }
            case Op::mean_pool: accum(g, n.a, k_mean_pool(gi)); break;
            case Op::max_pool: {
                Tensor d(A().shape());
                for (std::size_t p = 0; p < gi.size(); ++p)
                    d[static_cast<size_t>((*n.idx)[p])] += gi[p];
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::scale: accum_scaled(g, n.a, gi, n.c); break;
            case Op::softmax: {
                const double dot_gy = gi.dot(n.val);
                Tensor d(gi.shape());
                for (std::size_t p = 0; p < d.size(); ++p) d[p] = n.val[p] * (gi[p] - dot_gy);
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::identity: accum(g, n.a, gi); break;
            case Op::zero_fn: break;
            case Op::mul: {
                Tensor da(gi.shape()), db(gi.shape());
                for (std::size_t p = 0; p < gi.size(); ++p) {
                    da[p] = gi[p] * B()[p];
                    db[p] = gi[p] * A()[p];
                }
                accum(g, n.a, std::move(da));
                accum(g, n.b, std::move(db));
                break;
            }
            case Op::sub:
                accum(g, n.a, gi);
                accum_scaled(g, n.b, gi, -1.0);
                break;
            case Op::smul: {
                accum(g, n.a, Tensor::scalar(gi.dot(B())));
                accum_scaled(g, n.b, gi, A()[0]);
                break;
            }
            case Op::sumall: accum(g, n.a, Tensor::full(A().shape(), gi[0])); break;
            case Op::bcast: accum(g, n.a, Tensor::scalar(gi.sum())); break;
            case Op::heaviside: break;
            case Op::unpool: {
                Tensor d(A().shape());
                for (std::size_t p = 0; p < d.size(); ++p) d[p] = gi[static_cast<size_t>((*n.idx)[p])];
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::gather: {
                Tensor d(A().shape());
                for (std::size_t p = 0; p < gi.size(); ++p)
                    d[static_cast<size_t>((*n.idx)[p])] += gi[p];
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::gap: {
                const int h = A().dim(1), w = A().dim(2);
                Tensor d(A().shape());
                for (int ci = 0; ci < A().dim(0); ++ci) {
                    const double v = gi[static_cast<size_t>(ci)] / (h * w);
                    double* base = d.data() + static_cast<size_t>(ci) * h * w;
                    for (int p = 0; p < h * w; ++p) base[p] = v;
                }
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::gap_t: {
                const int hw = n.i0 * n.i1;
                Tensor d(A().shape());
                for (std::size_t ci = 0; ci < d.size(); ++ci) {
                    double s = 0.0;
                    const double* base = gi.data() + ci * static_cast<size_t>(hw);
                    for (int p = 0; p < hw; ++p) s += base[p];
                    d[ci] = s / hw;
                }
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::reshape:
                accum(g, n.a,
                      Tensor(A().shape(), std::vector<double>(gi.data(), gi.data() + gi.size())));
                break;
            case Op::slice_ch: {
                Tensor d(A().shape());
                const std::size_t stride = A().size() / static_cast<size_t>(A().dim(0));
                std::copy(gi.data(), gi.data() + gi.size(),
                          d.data() + static_cast<size_t>(n.i0) * stride);
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::pad_ch: {
                Tensor d(A().shape());
                const std::size_t stride = A().size() / static_cast<size_t>(A().dim(0));
                std::copy(gi.data() + static_cast<size_t>(n.i0) * stride,
                          gi.data() + static_cast<size_t>(n.i0) * stride + d.size(), d.data());
                accum(g, n.a, std::move(d));
                break;
            }
            case Op::ce_softmax: {
                Tensor p = k_softmax(A());
                p.axpy(-1.0, B());
                p *= gi[0];
                accum(g, n.a, std::move(p));
                break;
            }
        }
    }
    return g;
}

// ---- recording backward ----------------------------------------------------

std::vector<int> Tape::backward_graph(int output, int seed_node) {
    if (output < 0 || output >= size()) throw UsageError("backward_graph: output id out of range");
    if (!value(seed_node).same_shape(value(output)))
        throw UsageError("backward_graph: seed shape does not match output shape");
    const int n0 = size();
    std::vector<int> g(static_cast<size_t>(n0), -1);
    g[static_cast<size_t>(output)] = seed_node;
    auto acc = [&](int j, int contrib) {
        int& slot = g[static_cast<size_t>(j)];
        slot = slot < 0 ? contrib : add(slot, contrib);
    };
    for (int i = output; i >= 0; --i) {
        const Node n = nodes_[static_cast<size_t>(i)];  // copy: push may reallocate
        const int gi = g[static_cast<size_t>(i)];
        if (gi < 0) continue;
        switch (n.op) {
            case Op::leaf:
            case Op::constant: break;
            case Op::matvec:
                acc(n.a, outer(gi, n.b, n.c));
                acc(n.b, matvec_t(n.a, gi, n.c));
                break;
            case Op::matvec_t:
                acc(n.a, outer(n.b, gi, n.c));
                acc(n.b, matvec(n.a, gi, n.c));
                break;
            case Op::outer: {
                Node du;
                du.op = Op::matvec;
                du.a = gi;
                du.b = n.b;
                du.c = n.c;
                acc(n.a, push(std::move(du)));
                Node dv;
                dv.op = Op::matvec_t;
                dv.a = gi;
                dv.b = n.a;
                dv.c = n.c;
                acc(n.b, push(std::move(dv)));
                break;
            }
            case Op::conv3: {
                Node dw;
                dw.op = Op::conv3_dw;
                dw.a = n.b;
                dw.b = gi;
                dw.c = n.c;
                acc(n.a, push(std::move(dw)));
                Node dx;
                dx.op = Op::conv3_dx;
                dx.a = gi;
                dx.b = n.a;
                dx.c = n.c;
                acc(n.b, push(std::move(dx)));
                break;
            }
            case Op::conv3_dx: {
                Node dg;
                dg.op = Op::conv3;
                dg.a = n.b;
                dg.b = gi;
                dg.c = n.c;
                acc(n.a, push(std::move(dg)));
                Node dk;
                dk.op = Op::conv3_dw;
                dk.a = gi;
                dk.b = n.a;
                dk.c = n.c;
                acc(n.b, push(std::move(dk)));
                break;
            }
            case Op::conv3_dw: {
                Node dx;
                dx.op = Op::conv3_dx;
                dx.a = n.b;
                dx.b = gi;
                dx.c = n.c;
                acc(n.a, push(std::move(dx)));
                Node dg;
                dg.op = Op::conv3;
                dg.a = gi;
                dg.b = n.a;
                dg.c = n.c;
                acc(n.b, push(std::move(dg)));
                break;
            }
            case Op::conv1: {
                Node dw;
                dw.op = Op::conv1_dw;
                dw.a = n.b;
                dw.b = gi;
                dw.c = n.c;
                acc(n.a, push(std::move(dw)));
                Node dx;
                dx.op = Op::conv1_dx;
                dx.a = gi;
                dx.b = n.a;
                dx.c = n.c;
                acc(n.b, push(std::move(dx)));
                break;
            }
            case Op::conv1_dx: {
                Node dg;
                dg.op = Op::conv1;
                dg.a = n.b;
                dg.b = gi;
                dg.c = n.c;
                acc(n.a, push(std::move(dg)));
                Node dk;
                dk.op = Op::conv1_dw;
                dk.a = gi;
                dk.b = n.a;
                dk.c = n.c;
                acc(n.b, push(std::move(dk)));
                break;
            }
            case Op::conv1_dw: {
                Node dx;
                dx.op = Op::conv1_dx;
                dx.a = n.b;
                dx.b = gi;
                dx.c = n.c;
                acc(n.a, push(std::move(dx)));
                Node dg;
                dg.op = Op::conv1;
                dg.a = gi;
                dg.b = n.a;
                dg.c = n.c;
                acc(n.b, push(std::move(dg)));
                break;
            }
            case Op::relu: acc(n.a, mul(gi, heaviside(n.a))); break;
            case Op::tanh_fn: {
                const int ones = constant(Tensor::ones(n.val.shape()));
                acc(n.a, mul(gi, sub(ones, mul(i, i))));
                break;
            }
            case Op::add:
                acc(n.a, gi);
                acc(n.b, gi);
                break;
            case Op::concat_ch: {
                const int ca = nodes_[static_cast<size_t>(n.a)].val.dim(0);
                const int cb = nodes_[static_cast<size_t>(n.b)].val.dim(0);
                acc(n.a, slice_ch(gi, 0, ca));
                acc(n.b, slice_ch(gi, ca, cb));
                break;
            }
            case Op::mean_pool: acc(n.a, mean_pool(gi)); break;
            case Op::max_pool: {
                Node d;
                d.op = Op::unpool;
                d.a = gi;
                d.idx = n.idx;
                d.tshape = nodes_[static_cast<size_t>(n.a)].val.shape();
                acc(n.a, push(std::move(d)));
                break;
            }
            case Op::scale: acc(n.a, scale(gi, n.c)); break;
            case Op::softmax: acc(n.a, mul(i, sub(gi, bcast(dot(gi, i), n.val.shape())))); break;
            case Op::identity: acc(n.a, gi); break;
            case Op::zero_fn: break;
            case Op::mul:
                acc(n.a, mul(gi, n.b));
                acc(n.b, mul(gi, n.a));
                break;
            case Op::sub:
                acc(n.a, gi);
                acc(n.b, scale(gi, -1.0));
                break;
            case Op::smul:
                acc(n.a, dot(n.b, gi));
                acc(n.b, smul(n.a, gi));
                break;
            case Op::sumall: acc(n.a, bcast(gi, nodes_[static_cast<size_t>(n.a)].val.shape())); break;
            case Op::bcast: acc(n.a, sumall(gi)); break;
            case Op::heaviside: break;
            case Op::unpool: {
                Node d;
                d.op = Op::gather;
                d.a = gi;
                d.idx = n.idx;
                d.tshape = nodes_[static_cast<size_t>(n.a)].val.shape();
                acc(n.a, push(std::move(d)));
                break;
            }
            case Op::gather: {
                Node d;
                d.op = Op::unpool;
                d.a = gi;
                d.idx = n.idx;
                d.tshape = nodes_[static_cast<size_t>(n.a)].val.shape();
                acc(n.a, push(std::move(d)));
                break;
            }
            case Op::gap: {
                const Tensor& x = nodes_[static_cast<size_t>(n.a)].val;
                acc(n.a, gap_t(gi, x.dim(1), x.dim(2)));
                break;
            }
            case Op::gap_t: acc(n.a, gap(gi)); break;
            case Op::reshape: acc(n.a, reshape(gi, nodes_[static_cast<size_t>(n.a)].val.shape())); break;
            case Op::slice_ch:
                acc(n.a, pad_ch(gi, n.i0, nodes_[static_cast<size_t>(n.a)].val.dim(0)));
                break;
            case Op::pad_ch: {
                const int count = nodes_[static_cast<size_t>(n.a)].val.dim(0);
                acc(n.a, slice_ch(gi, n.i0, count));
                break;
            }
            case Op::ce_softmax: acc(n.a, smul(gi, sub(softmax(n.a), n.b))); break;
        }
    }
    return g;
}

// ---- public catalog surface -------------------------------------------------

const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::dense: return "dense";
        case OpKind::conv2d_3x3: return "conv2d-3x3";
        case OpKind::conv2d_1x1: return "conv2d-1x1";
        case OpKind::relu: return "relu";
        case OpKind::tanh: return "tanh";
        case OpKind::add: return "add";
        case OpKind::concat_channels: return "concat-channels";
        case OpKind::mean_pool: return "mean-pool";
        case OpKind::max_pool: return "max-pool";
        case OpKind::scale_by_constant: return "scale-by-constant";
        case OpKind::softmax: return "softmax";
        case OpKind::identity: return "identity";
        case OpKind::zero: return "zero";
    }
    return "?";
}

OpKind parse_op_kind(const std::string& name) {
    for (OpKind k :
         {OpKind::dense, OpKind::conv2d_3x3, OpKind::conv2d_1x1, OpKind::relu, OpKind::tanh,
          OpKind::add, OpKind::concat_channels, OpKind::mean_pool, OpKind::max_pool,
          OpKind::scale_by_constant, OpKind::softmax, OpKind::identity, OpKind::zero})
        if (name == op_kind_name(k)) return k;
    throw UsageError("unknown operation kind: " + name);
}

int forward_op(Tape& tape, OpKind kind, const std::vector<int>& inputs,
               const std::vector<int>& params, double c) {
    auto need = [&](std::size_t nin, std::size_t npar) {
        if (inputs.size() != nin || params.size() != npar)
            throw ShapeError(std::string(op_kind_name(kind)) + ": expected " + std::to_string(nin) +
                             " inputs and " + std::to_string(npar) + " params, got " +
                             std::to_string(inputs.size()) + "/" + std::to_string(params.size()));
    };
    switch (kind) {
        case OpKind::dense: need(1, 1); return tape.dense(params[0], inputs[0]);
        case OpKind::conv2d_3x3: need(1, 1); return tape.conv3(params[0], inputs[0]);
        case OpKind::conv2d_1x1: need(1, 1); return tape.conv1(params[0], inputs[0]);
        case OpKind::relu: need(1, 0); return tape.relu(inputs[0]);
        case OpKind::tanh: need(1, 0); return tape.tanh_fn(inputs[0]);
        case OpKind::add: need(2, 0); return tape.add(inputs[0], inputs[1]);
        case OpKind::concat_channels: need(2, 0); return tape.concat_ch(inputs[0], inputs[1]);
        case OpKind::mean_pool: need(1, 0); return tape.mean_pool(inputs[0]);
        case OpKind::max_pool: need(1, 0); return tape.max_pool(inputs[0]);
        case OpKind::scale_by_constant: need(1, 0); return tape.scale(inputs[0], c);
        case OpKind::softmax: need(1, 0); return tape.softmax(inputs[0]);
        case OpKind::identity: need(1, 0); return tape.identity(inputs[0]);
        case OpKind::zero: need(1, 0); return tape.zero_fn(inputs[0]);
    }
    throw UsageError("forward_op: unknown kind");
}

}  // namespace tracenas
