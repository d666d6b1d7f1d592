#include "flowpolicy/adcore.hpp"

#include <algorithm>
#include <cmath>

namespace flowpolicy::ad {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

template <class T>
Param<T>* ParamStore<T>::add(const std::string& name, int rows, int cols) {
    if (find(name)) throw ValidationError("duplicate parameter name " + name);
    auto p = std::make_unique<Param<T>>();
    p->name = name;
    p->shape = {rows, cols};
    p->value.assign(std::size_t(rows) * cols, T(0));
    params_.push_back(std::move(p));
    return params_.back().get();
}

template <class T>
Param<T>* ParamStore<T>::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

template <class T>
std::size_t ParamStore<T>::total_size() const {
    std::size_t s = 0;
    for (const auto& p : params_) s += p->size();
    return s;
}

template <class Dst, class Src>
ParamStore<Dst> mirror_store(const ParamStore<Src>& src) {
    ParamStore<Dst> out;
    for (const auto& p : src.all()) {
        Param<Dst>* q = out.add(p->name, p->rows(), p->cols());
        for (std::size_t i = 0; i < p->value.size(); ++i) q->value[i] = Dst(p->value[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matmul kernels
// ---------------------------------------------------------------------------

namespace {
constexpr long kMatmulParallelFlops = 1L << 17;
}

template <class T>
void matmul_serial(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T* ci = c + std::size_t(i) * n;
        std::fill(ci, ci + n, T(0));
        const T* ai = a + std::size_t(i) * k;
        for (int p = 0; p < k; ++p) {
            const T ap = ai[p];
            const T* bp = b + std::size_t(p) * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) ci[j] += ap * bp[j];
        }
    }
}

template <class T>
void matmul_omp(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (long(m) * k * n >= kMatmulParallelFlops)
    for (int i = 0; i < m; ++i) {
        T* ci = c + std::size_t(i) * n;
        std::fill(ci, ci + n, T(0));
        const T* ai = a + std::size_t(i) * k;
        for (int p = 0; p < k; ++p) {
            const T ap = ai[p];
            const T* bp = b + std::size_t(p) * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) ci[j] += ap * bp[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

template <class T>
void Graph<T>::require(bool cond, const std::string& what) const {
    if (!cond) throw ShapeMismatch(what);
}

template <class T>
std::string Graph<T>::shape_str(int node) const {
    const Shape& s = nodes_[node].shape;
    return "(" + std::to_string(s[0]) + "x" + std::to_string(s[1]) + ")";
}

template <class T>
int Graph<T>::push(Node n) {
    n.val.assign(std::size_t(n.shape[0]) * n.shape[1], T(0));
    n.grd.assign(n.val.size(), T(0));
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

template <class T>
const T* Graph<T>::data(int node) const {
    const Node& n = nodes_[node];
    if (n.op == OpKind::ParamRef) return n.par->value.data();
    return n.val.data();
}

template <class T>
T* Graph<T>::grad_buf(int node) {
    return nodes_[node].grd.data();
}

template <class T>
int Graph<T>::pgrad_slot(Param<T>* p) {
    auto it = pgrad_index_.find(p);
    if (it != pgrad_index_.end()) return it->second;
    int idx = int(pgrads_.size());
    pgrads_.push_back({p, std::vector<T>(p->size(), T(0))});
    pgrad_index_[p] = idx;
    return idx;
}

template <class T>
int Graph<T>::input(int rows, int cols) {
    Node n;
    n.op = OpKind::Input;
    n.shape = {rows, cols};
    return push(std::move(n));
}

template <class T>
int Graph<T>::constant(int rows, int cols, std::vector<T> values) {
    require(int(values.size()) == rows * cols, "constant data size mismatch");
    Node n;
    n.op = OpKind::Constant;
    n.shape = {rows, cols};
    int id = push(std::move(n));
    nodes_[id].val = std::move(values);
    return id;
}

template <class T>
int Graph<T>::param(Param<T>* p) {
    Node n;
    n.op = OpKind::ParamRef;
    n.shape = p->shape;
    n.par = p;
    int id = push(std::move(n));
    pgrad_slot(p);
    return id;
}

template <class T>
int Graph<T>::matmul(int a, int b) {
    require(nodes_[a].shape[1] == nodes_[b].shape[0],
            "matmul " + shape_str(a) + " x " + shape_str(b));
    Node n;
    n.op = OpKind::MatMul;
    n.shape = {nodes_[a].shape[0], nodes_[b].shape[1]};
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

template <class T>
int Graph<T>::transpose(int a) {
    Node n;
    n.op = OpKind::Transpose;
    n.shape = {nodes_[a].shape[1], nodes_[a].shape[0]};
    n.a = a;
    return push(std::move(n));
}

template <class T>
int Graph<T>::add(int a, int b) {
    bool same = nodes_[a].shape == nodes_[b].shape;
    bool bcast = nodes_[b].shape[0] == 1 && nodes_[b].shape[1] == nodes_[a].shape[1];
    require(same || bcast, "add " + shape_str(a) + " + " + shape_str(b));
    Node n;
    n.op = OpKind::Add;
    n.shape = nodes_[a].shape;
    n.a = a;
    n.b = b;
    n.i0 = bcast && !same ? 1 : 0;
    return push(std::move(n));
}

template <class T>
int Graph<T>::multiply(int a, int b) {
    bool same = nodes_[a].shape == nodes_[b].shape;
    bool bcast = nodes_[b].shape[0] == 1 && nodes_[b].shape[1] == nodes_[a].shape[1];
    require(same || bcast, "multiply " + shape_str(a) + " * " + shape_str(b));
    Node n;
    n.op = OpKind::Multiply;
    n.shape = nodes_[a].shape;
    n.a = a;
    n.b = b;
    n.i0 = bcast && !same ? 1 : 0;
    return push(std::move(n));
}

template <class T>
int Graph<T>::scale(int a, T s) {
    Node n;
    n.op = OpKind::Scale;
    n.shape = nodes_[a].shape;
    n.a = a;
    n.scalar = s;
    return push(std::move(n));
}

template <class T>
int Graph<T>::add_scalar(int a, T s) {
    Node n;
    n.op = OpKind::AddScalar;
    n.shape = nodes_[a].shape;
    n.a = a;
    n.scalar = s;
    return push(std::move(n));
}

template <class T>
int Graph<T>::concat_rows(const std::vector<int>& xs) {
    require(!xs.empty(), "concat of nothing");
    int cols = nodes_[xs[0]].shape[1], rows = 0;
    for (int x : xs) {
        require(nodes_[x].shape[1] == cols, "concat_rows column mismatch " + shape_str(x));
        rows += nodes_[x].shape[0];
    }
    Node n;
    n.op = OpKind::ConcatRows;
    n.shape = {rows, cols};
    n.list = xs;
    return push(std::move(n));
}

template <class T>
int Graph<T>::concat_cols(const std::vector<int>& xs) {
    require(!xs.empty(), "concat of nothing");
    int rows = nodes_[xs[0]].shape[0], cols = 0;
    for (int x : xs) {
        require(nodes_[x].shape[0] == rows, "concat_cols row mismatch " + shape_str(x));
        cols += nodes_[x].shape[1];
    }
    Node n;
    n.op = OpKind::ConcatCols;
    n.shape = {rows, cols};
    n.list = xs;
    return push(std::move(n));
}

template <class T>
int Graph<T>::slice_rows(int a, int begin, int len) {
    require(begin >= 0 && len >= 1 && begin + len <= nodes_[a].shape[0],
            "slice_rows out of range on " + shape_str(a));
    Node n;
    n.op = OpKind::SliceRows;
    n.shape = {len, nodes_[a].shape[1]};
    n.a = a;
    n.i0 = begin;
    n.i1 = len;
    return push(std::move(n));
}

template <class T>
int Graph<T>::slice_cols(int a, int begin, int len) {
    require(begin >= 0 && len >= 1 && begin + len <= nodes_[a].shape[1],
            "slice_cols out of range on " + shape_str(a));
    Node n;
    n.op = OpKind::SliceCols;
    n.shape = {nodes_[a].shape[0], len};
    n.a = a;
    n.i0 = begin;
    n.i1 = len;
    return push(std::move(n));
}

template <class T>
int Graph<T>::softmax(int a) {
    Node n;
    n.op = OpKind::Softmax;
    n.shape = nodes_[a].shape;
    n.a = a;
    return push(std::move(n));
}

template <class T>
int Graph<T>::layer_norm(int a) {
    Node n;
    n.op = OpKind::LayerNorm;
    n.shape = nodes_[a].shape;
    n.a = a;
    int id = push(std::move(n));
    nodes_[id].aux.assign(nodes_[id].shape[0], T(0));  // inv_std per row
    return id;
}

template <class T>
int Graph<T>::gelu(int a) {
    Node n;
    n.op = OpKind::Gelu;
    n.shape = nodes_[a].shape;
    n.a = a;
    return push(std::move(n));
}

template <class T>
int Graph<T>::sigmoid(int a) {
    Node n;
    n.op = OpKind::Sigmoid;
    n.shape = nodes_[a].shape;
    n.a = a;
    return push(std::move(n));
}

template <class T>
int Graph<T>::embedding(Param<T>* table, int count) {
    require(count >= 1, "embedding needs at least one id");
    Node n;
    n.op = OpKind::Embedding;
    n.shape = {count, table->cols()};
    n.par = table;
    n.ids.assign(count, 0);
    int id = push(std::move(n));
    pgrad_slot(table);
    return id;
}

template <class T>
int Graph<T>::sinusoidal(int scalar_node, int dim, T input_scale) {
    require(nodes_[scalar_node].val.size() == 1, "sinusoidal input must be scalar");
    require(dim % 2 == 0, "sinusoidal dim must be even");
    Node n;
    n.op = OpKind::Sinusoidal;
    n.shape = {1, dim};
    n.a = scalar_node;
    n.scalar = input_scale;
    return push(std::move(n));
}

template <class T>
int Graph<T>::rotary3d(int x, int pos, T base) {
    require(nodes_[pos].shape[1] == 3, "rotary positions must be n x 3");
    require(nodes_[pos].shape[0] == nodes_[x].shape[0],
            "rotary token/position count mismatch");
    Node n;
    n.op = OpKind::Rotary3D;
    n.shape = nodes_[x].shape;
    n.a = x;
    n.b = pos;
    n.scalar = base;
    return push(std::move(n));
}

template <class T>
int Graph<T>::sum(int a) {
    Node n;
    n.op = OpKind::Sum;
    n.shape = {1, 1};
    n.a = a;
    return push(std::move(n));
}

template <class T>
int Graph<T>::mean(int a) {
    Node n;
    n.op = OpKind::Mean;
    n.shape = {1, 1};
    n.a = a;
    return push(std::move(n));
}

template <class T>
int Graph<T>::bce_logits(int logits, int targets) {
    require(nodes_[logits].shape == nodes_[targets].shape,
            "bce_logits " + shape_str(logits) + " vs " + shape_str(targets));
    Node n;
    n.op = OpKind::BceLogits;
    n.shape = {1, 1};
    n.a = logits;
    n.b = targets;
    return push(std::move(n));
}

template <class T>
void Graph<T>::set_input(int node, const T* src, std::size_t size) {
    Node& n = nodes_[node];
    if (n.op != OpKind::Input) throw ValidationError("set_input on a non-input node");
    require(size == n.val.size(), "set_input size mismatch");
    std::copy(src, src + size, n.val.begin());
}

template <class T>
void Graph<T>::set_ids(int node, const int* ids, std::size_t count) {
    Node& n = nodes_[node];
    if (n.op != OpKind::Embedding) throw ValidationError("set_ids on a non-embedding node");
    require(count == n.ids.size(), "set_ids count mismatch");
    for (std::size_t i = 0; i < count; ++i) {
        if (ids[i] < 0 || ids[i] >= n.par->rows())
            throw ValidationError("embedding id out of range");
        n.ids[i] = ids[i];
    }
}

template <class T>
const std::vector<T>& Graph<T>::value(int node) const {
    const Node& n = nodes_[node];
    if (n.op == OpKind::ParamRef) return n.par->value;
    return n.val;
}

template <class T>
const std::vector<T>& Graph<T>::grad(int node) const {
    return nodes_[node].grd;
}

namespace {

template <class T>
inline T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

template <class T>
void Graph<T>::exec(Node& n) {
    const int rows = n.shape[0], cols = n.shape[1];
    switch (n.op) {
        case OpKind::Input:
        case OpKind::Constant:
        case OpKind::ParamRef:
            break;
        case OpKind::MatMul: {
            matmul_omp(data(n.a), data(n.b), n.val.data(), nodes_[n.a].shape[0],
                       nodes_[n.a].shape[1], nodes_[n.b].shape[1]);
            break;
        }
        case OpKind::Transpose: {
            const T* a = data(n.a);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    n.val[std::size_t(i) * cols + j] = a[std::size_t(j) * rows + i];
            break;
        }
        case OpKind::Add: {
            const T* a = data(n.a);
            const T* b = data(n.b);
            if (n.i0 == 0) {
                for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] + b[i];
            } else {
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        n.val[std::size_t(i) * cols + j] = a[std::size_t(i) * cols + j] + b[j];
            }
            break;
        }
        case OpKind::Multiply: {
            const T* a = data(n.a);
            const T* b = data(n.b);
            if (n.i0 == 0) {
                for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] * b[i];
            } else {
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        n.val[std::size_t(i) * cols + j] = a[std::size_t(i) * cols + j] * b[j];
            }
            break;
        }
        case OpKind::Scale: {
            const T* a = data(n.a);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] * n.scalar;
            break;
        }
        case OpKind::AddScalar: {
            const T* a = data(n.a);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] + n.scalar;
            break;
        }
        case OpKind::ConcatRows: {
            std::size_t off = 0;
            for (int x : n.list) {
                const T* a = data(x);
                std::size_t sz = nodes_[x].val.size();
                if (nodes_[x].op == OpKind::ParamRef) sz = nodes_[x].par->size();
                std::copy(a, a + sz, n.val.begin() + off);
                off += sz;
            }
            break;
        }
        case OpKind::ConcatCols: {
            int off = 0;
            for (int x : n.list) {
                const T* a = data(x);
                int xc = nodes_[x].shape[1];
                for (int i = 0; i < rows; ++i)
                    std::copy(a + std::size_t(i) * xc, a + std::size_t(i + 1) * xc,
                              n.val.begin() + std::size_t(i) * cols + off);
                off += xc;
            }
            break;
        }
        case OpKind::SliceRows: {
            const T* a = data(n.a);
            int ac = nodes_[n.a].shape[1];
            std::copy(a + std::size_t(n.i0) * ac, a + std::size_t(n.i0 + n.i1) * ac,
                      n.val.begin());
            break;
        }
        case OpKind::SliceCols: {
            const T* a = data(n.a);
            int ac = nodes_[n.a].shape[1];
            for (int i = 0; i < rows; ++i)
                std::copy(a + std::size_t(i) * ac + n.i0, a + std::size_t(i) * ac + n.i0 + n.i1,
                          n.val.begin() + std::size_t(i) * cols);
            break;
        }
        case OpKind::Softmax: {
            const T* a = data(n.a);
            for (int i = 0; i < rows; ++i) {
                const T* x = a + std::size_t(i) * cols;
                T* y = n.val.data() + std::size_t(i) * cols;
                T mx = x[0];
                for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
                T s = T(0);
                for (int j = 0; j < cols; ++j) {
                    y[j] = std::exp(x[j] - mx);
                    s += y[j];
                }
                T inv = T(1) / s;
                for (int j = 0; j < cols; ++j) y[j] *= inv;
            }
            break;
        }
        case OpKind::LayerNorm: {
            const T* a = data(n.a);
            constexpr T eps = T(1e-5);
            for (int i = 0; i < rows; ++i) {
                const T* x = a + std::size_t(i) * cols;
                T* y = n.val.data() + std::size_t(i) * cols;
                T mu = T(0);
                for (int j = 0; j < cols; ++j) mu += x[j];
                mu /= T(cols);
                T var = T(0);
                for (int j = 0; j < cols; ++j) {
                    T d = x[j] - mu;
                    var += d * d;
                }
                var /= T(cols);
                T inv = T(1) / std::sqrt(var + eps);
                n.aux[i] = inv;
                for (int j = 0; j < cols; ++j) y[j] = (x[j] - mu) * inv;
            }
            break;
        }
        case OpKind::Gelu: {
            const T* a = data(n.a);
            for (std::size_t i = 0; i < n.val.size(); ++i) {
                T x = a[i];
                n.val[i] = T(0.5) * x * (T(1) + T(std::erf(double(x) * kInvSqrt2)));
            }
            break;
        }
        case OpKind::Sigmoid: {
            const T* a = data(n.a);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = stable_sigmoid(a[i]);
            break;
        }
        case OpKind::Embedding: {
            const T* tab = n.par->value.data();
            for (int i = 0; i < rows; ++i)
                std::copy(tab + std::size_t(n.ids[i]) * cols,
                          tab + std::size_t(n.ids[i] + 1) * cols,
                          n.val.begin() + std::size_t(i) * cols);
            break;
        }
        case OpKind::Sinusoidal: {
            const T x = data(n.a)[0] * n.scalar;
            const int half = cols / 2;
            for (int j = 0; j < half; ++j) {
                T w = T(std::exp(-std::log(10000.0) * double(j) / half));
                n.val[2 * j] = std::sin(x * w);
                n.val[2 * j + 1] = std::cos(x * w);
            }
            break;
        }
        case OpKind::Rotary3D: {
            const T* a = data(n.a);
            const T* pos = data(n.b);
            const int rot_dim = 6 * (cols / 6);
            const int dg = rot_dim / 3;
            const int half = dg / 2;
            for (int i = 0; i < rows; ++i) {
                const T* x = a + std::size_t(i) * cols;
                T* y = n.val.data() + std::size_t(i) * cols;
                for (int g = 0; g < 3; ++g) {
                    T p = pos[std::size_t(i) * 3 + g];
                    for (int j = 0; j < half; ++j) {
                        T w = T(std::pow(double(n.scalar), -double(j) / half));
                        T ang = w * p;
                        T c = std::cos(ang), s = std::sin(ang);
                        int e = g * dg + 2 * j;
                        T xe = x[e], xo = x[e + 1];
                        y[e] = xe * c - xo * s;
                        y[e + 1] = xe * s + xo * c;
                    }
                }
                for (int j = rot_dim; j < cols; ++j) y[j] = x[j];
            }
            break;
        }
        case OpKind::Sum: {
            const Node& src = nodes_[n.a];
            const T* a = data(n.a);
            std::size_t sz = std::size_t(src.shape[0]) * src.shape[1];
            T s = T(0);
            for (std::size_t i = 0; i < sz; ++i) s += a[i];
            n.val[0] = s;
            break;
        }
        case OpKind::Mean: {
            const Node& src = nodes_[n.a];
            const T* a = data(n.a);
            std::size_t sz = std::size_t(src.shape[0]) * src.shape[1];
            T s = T(0);
            for (std::size_t i = 0; i < sz; ++i) s += a[i];
            n.val[0] = s / T(sz);
            break;
        }
        case OpKind::BceLogits: {
            const Node& src = nodes_[n.a];
            const T* z = data(n.a);
            const T* y = data(n.b);
            std::size_t sz = std::size_t(src.shape[0]) * src.shape[1];
            T s = T(0);
            for (std::size_t i = 0; i < sz; ++i) {
                T zi = std::clamp(z[i], T(-30), T(30));
                s += std::max(zi, T(0)) - zi * y[i] + std::log1p(std::exp(-std::abs(zi)));
            }
            n.val[0] = s / T(sz);
            break;
        }
    }
}

template <class T>
void Graph<T>::forward() {
    for (Node& n : nodes_) {
        exec(n);
        if (check_finite && n.op != OpKind::ParamRef) {
            for (T v : n.val)
                if (!std::isfinite(double(v)))
                    throw NonFiniteField("non-finite value in op " +
                                         std::to_string(int(n.op)));
        }
    }
    forwarded_ = true;
}

template <class T>
void Graph<T>::exec_backward(Node& n) {
    const int rows = n.shape[0], cols = n.shape[1];
    auto ga = [&](int node) { return grad_buf(node); };
    switch (n.op) {
        case OpKind::Input:
        case OpKind::Constant:
        case OpKind::ParamRef:
            break;
        case OpKind::MatMul: {
            const int m = nodes_[n.a].shape[0], k = nodes_[n.a].shape[1],
                      nn = nodes_[n.b].shape[1];
            const T* b = data(n.b);
            const T* a = data(n.a);
            const T* gc = n.grd.data();
            T* gda = ga(n.a);
            // dA += dC * B^T
            for (int i = 0; i < m; ++i) {
                const T* gci = gc + std::size_t(i) * nn;
                T* gai = gda + std::size_t(i) * k;
                for (int p = 0; p < k; ++p) {
                    const T* bp = b + std::size_t(p) * nn;
                    T s = T(0);
#pragma omp simd reduction(+ : s)
                    for (int j = 0; j < nn; ++j) s += gci[j] * bp[j];
                    gai[p] += s;
                }
            }
            // dB += A^T * dC
            T* gdb = ga(n.b);
            for (int i = 0; i < m; ++i) {
                const T* ai = a + std::size_t(i) * k;
                const T* gci = gc + std::size_t(i) * nn;
                for (int p = 0; p < k; ++p) {
                    const T ap = ai[p];
                    T* gbp = gdb + std::size_t(p) * nn;
#pragma omp simd
                    for (int j = 0; j < nn; ++j) gbp[j] += ap * gci[j];
                }
            }
            break;
        }
        case OpKind::Transpose: {
            T* g = ga(n.a);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    g[std::size_t(j) * rows + i] += n.grd[std::size_t(i) * cols + j];
            break;
        }
        case OpKind::Add: {
            T* gda = ga(n.a);
            T* gdb = ga(n.b);
            if (n.i0 == 0) {
                for (std::size_t i = 0; i < n.grd.size(); ++i) {
                    gda[i] += n.grd[i];
                    gdb[i] += n.grd[i];
                }
            } else {
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) {
                        gda[std::size_t(i) * cols + j] += n.grd[std::size_t(i) * cols + j];
                        gdb[j] += n.grd[std::size_t(i) * cols + j];
                    }
            }
            break;
        }
        case OpKind::Multiply: {
            const T* a = data(n.a);
            const T* b = data(n.b);
            T* gda = ga(n.a);
            T* gdb = ga(n.b);
            if (n.i0 == 0) {
                for (std::size_t i = 0; i < n.grd.size(); ++i) {
                    gda[i] += n.grd[i] * b[i];
                    gdb[i] += n.grd[i] * a[i];
                }
            } else {
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) {
                        std::size_t ix = std::size_t(i) * cols + j;
                        gda[ix] += n.grd[ix] * b[j];
                        gdb[j] += n.grd[ix] * a[ix];
                    }
            }
            break;
        }
        case OpKind::Scale: {
            T* g = ga(n.a);
            for (std::size_t i = 0; i < n.grd.size(); ++i) g[i] += n.grd[i] * n.scalar;
            break;
        }
        case OpKind::AddScalar: {
            T* g = ga(n.a);
            for (std::size_t i = 0; i < n.grd.size(); ++i) g[i] += n.grd[i];
            break;
        }
        case OpKind::ConcatRows: {
            std::size_t off = 0;
            for (int x : n.list) {
                std::size_t sz = std::size_t(nodes_[x].shape[0]) * nodes_[x].shape[1];
                T* g = ga(x);
                for (std::size_t i = 0; i < sz; ++i) g[i] += n.grd[off + i];
                off += sz;
            }
            break;
        }
        case OpKind::ConcatCols: {
            int off = 0;
            for (int x : n.list) {
                int xc = nodes_[x].shape[1];
                T* g = ga(x);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < xc; ++j)
                        g[std::size_t(i) * xc + j] += n.grd[std::size_t(i) * cols + off + j];
                off += xc;
            }
            break;
        }
        case OpKind::SliceRows: {
            int ac = nodes_[n.a].shape[1];
            T* g = ga(n.a);
            for (std::size_t i = 0; i < n.grd.size(); ++i)
                g[std::size_t(n.i0) * ac + i] += n.grd[i];
            break;
        }
        case OpKind::SliceCols: {
            int ac = nodes_[n.a].shape[1];
            T* g = ga(n.a);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    g[std::size_t(i) * ac + n.i0 + j] += n.grd[std::size_t(i) * cols + j];
            break;
        }
        case OpKind::Softmax: {
            T* g = ga(n.a);
            for (int i = 0; i < rows; ++i) {
                const T* y = n.val.data() + std::size_t(i) * cols;
                const T* gy = n.grd.data() + std::size_t(i) * cols;
                T dot = T(0);
                for (int j = 0; j < cols; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < cols; ++j)
                    g[std::size_t(i) * cols + j] += y[j] * (gy[j] - dot);
            }
            break;
        }
        case OpKind::LayerNorm: {
            T* g = ga(n.a);
            for (int i = 0; i < rows; ++i) {
                const T* y = n.val.data() + std::size_t(i) * cols;
                const T* gy = n.grd.data() + std::size_t(i) * cols;
                T inv = n.aux[i];
                T mg = T(0), mgy = T(0);
                for (int j = 0; j < cols; ++j) {
                    mg += gy[j];
                    mgy += gy[j] * y[j];
                }
                mg /= T(cols);
                mgy /= T(cols);
                for (int j = 0; j < cols; ++j)
                    g[std::size_t(i) * cols + j] += inv * (gy[j] - mg - y[j] * mgy);
            }
            break;
        }
        case OpKind::Gelu: {
            const T* a = data(n.a);
            T* g = ga(n.a);
            const T pdf_sign = debug_break_gelu_grad ? T(-1) : T(1);
            for (std::size_t i = 0; i < n.grd.size(); ++i) {
                T x = a[i];
                T cdf = T(0.5) * (T(1) + T(std::erf(double(x) * kInvSqrt2)));
                T pdf = T(kInvSqrt2Pi * std::exp(-0.5 * double(x) * double(x)));
                g[i] += n.grd[i] * (cdf + pdf_sign * x * pdf);
            }
            break;
        }
        case OpKind::Sigmoid: {
            T* g = ga(n.a);
            for (std::size_t i = 0; i < n.grd.size(); ++i) {
                T y = n.val[i];
                g[i] += n.grd[i] * y * (T(1) - y);
            }
            break;
        }
        case OpKind::Embedding: {
            auto& slot = pgrads_[pgrad_index_.at(n.par)];
            for (int i = 0; i < rows; ++i) {
                T* dst = slot.grad.data() + std::size_t(n.ids[i]) * cols;
                const T* src = n.grd.data() + std::size_t(i) * cols;
                for (int j = 0; j < cols; ++j) dst[j] += src[j];
            }
            break;
        }
        case OpKind::Sinusoidal: {
            const T x = data(n.a)[0] * n.scalar;
            const int half = cols / 2;
            T acc = T(0);
            for (int j = 0; j < half; ++j) {
                T w = T(std::exp(-std::log(10000.0) * double(j) / half));
                acc += n.grd[2 * j] * std::cos(x * w) * w * n.scalar;
                acc -= n.grd[2 * j + 1] * std::sin(x * w) * w * n.scalar;
            }
            ga(n.a)[0] += acc;
            break;
        }
        case OpKind::Rotary3D: {
            const T* pos = data(n.b);
            T* g = ga(n.a);
            const int rot_dim = 6 * (cols / 6);
            const int dg = rot_dim / 3;
            const int half = dg / 2;
            for (int i = 0; i < rows; ++i) {
                const T* gy = n.grd.data() + std::size_t(i) * cols;
                T* gx = g + std::size_t(i) * cols;
                for (int gax = 0; gax < 3; ++gax) {
                    T p = pos[std::size_t(i) * 3 + gax];
                    for (int j = 0; j < half; ++j) {
                        T w = T(std::pow(double(n.scalar), -double(j) / half));
                        T ang = w * p;
                        T c = std::cos(ang), s = std::sin(ang);
                        int e = gax * dg + 2 * j;
                        gx[e] += gy[e] * c + gy[e + 1] * s;
                        gx[e + 1] += -gy[e] * s + gy[e + 1] * c;
                    }
                }
                for (int j = rot_dim; j < cols; ++j) gx[j] += gy[j];
            }
            break;
        }
        case OpKind::Sum: {
            T* g = ga(n.a);
            const std::size_t sz = nodes_[n.a].grd.size();
            for (std::size_t i = 0; i < sz; ++i) g[i] += n.grd[0];
            break;
        }
        case OpKind::Mean: {
            T* g = ga(n.a);
            const std::size_t sz = nodes_[n.a].grd.size();
            const T k = n.grd[0] / T(sz);
            for (std::size_t i = 0; i < sz; ++i) g[i] += k;
            break;
        }
        case OpKind::BceLogits: {
            const T* z = data(n.a);
            const T* y = data(n.b);
            T* g = ga(n.a);
            const std::size_t sz = nodes_[n.a].grd.size();
            const T k = n.grd[0] / T(sz);
            for (std::size_t i = 0; i < sz; ++i) {
                T zi = std::clamp(z[i], T(-30), T(30));
                g[i] += k * (stable_sigmoid(zi) - y[i]);
            }
            break;
        }
    }
}

template <class T>
void Graph<T>::backward(int loss_node, T loss_grad) {
    if (!forwarded_) throw ValidationError("backward before forward");
    if (nodes_[loss_node].val.size() != 1 || nodes_[loss_node].op == OpKind::ParamRef)
        throw NonScalarLoss("loss node has shape " + shape_str(loss_node));
    for (Node& n : nodes_) std::fill(n.grd.begin(), n.grd.end(), T(0));
    nodes_[loss_node].grd[0] = loss_grad;
    for (int i = loss_node; i >= 0; --i) exec_backward(nodes_[i]);
    // fold ParamRef node gradients into the per-parameter accumulators
    for (Node& n : nodes_) {
        if (n.op != OpKind::ParamRef) continue;
        auto& slot = pgrads_[pgrad_index_.at(n.par)];
        for (std::size_t i = 0; i < n.grd.size(); ++i) slot.grad[i] += n.grd[i];
    }
}

template <class T>
void Graph<T>::zero_param_grads() {
    for (auto& pg : pgrads_) std::fill(pg.grad.begin(), pg.grad.end(), T(0));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class T>
void Adam<T>::step(const std::vector<typename Graph<T>::ParamGrad>& grads, T grad_scale) {
    ++t_;
    const double b1t = 1.0 - std::pow(double(cfg_.beta1), double(t_));
    const double b2t = 1.0 - std::pow(double(cfg_.beta2), double(t_));
    for (const auto& pg : grads) {
        Param<T>* p = pg.param;
        if (pg.grad.size() != p->size())
            throw ShapeMismatch("gradient size mismatch for " + p->name);
        Slot& s = slots_[p];
        if (s.m.empty()) {
            s.m.assign(p->size(), T(0));
            s.v.assign(p->size(), T(0));
        }
        for (std::size_t i = 0; i < p->size(); ++i) {
            T g = pg.grad[i] * grad_scale;
            s.m[i] = cfg_.beta1 * s.m[i] + (T(1) - cfg_.beta1) * g;
            s.v[i] = cfg_.beta2 * s.v[i] + (T(1) - cfg_.beta2) * g * g;
            T mh = T(double(s.m[i]) / b1t);
            T vh = T(double(s.v[i]) / b2t);
            p->value[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::unordered_map<std::string, std::vector<float>>& analytic,
                           ParamStore<double>& f64_store,
                           const std::function<double()>& loss_f64, int probes,
                           std::uint64_t seed, double fd_h, double grad_floor) {
    std::vector<Param<double>*> checked;
    for (const auto& p : f64_store.all())
        if (analytic.count(p->name)) checked.push_back(p.get());
    if (checked.empty()) throw ValidationError("no parameters to probe");

    Rng rng(seed);
    GradCheckResult res;
    res.probes = probes;
    for (int t = 0; t < probes; ++t) {
        Param<double>* p = checked[rng.uniform_int(int(checked.size()))];
        int idx = rng.uniform_int(int(p->size()));
        double old = p->value[idx];
        p->value[idx] = old + fd_h;
        double lp = loss_f64();
        p->value[idx] = old - fd_h;
        double lm = loss_f64();
        p->value[idx] = old;
        double fd = (lp - lm) / (2.0 * fd_h);
        double ga = double(analytic.at(p->name)[idx]);
        double rel = std::abs(ga - fd) / std::max({std::abs(ga), std::abs(fd), grad_floor});
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_param = p->name;
            res.worst_index = idx;
        }
    }
    return res;
}

// explicit instantiations
template struct Param<float>;
template struct Param<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template class Graph<float>;
template class Graph<double>;
template class Adam<float>;
template class Adam<double>;
template ParamStore<double> mirror_store<double, float>(const ParamStore<float>&);
template ParamStore<float> mirror_store<float, double>(const ParamStore<double>&);
template void matmul_serial<float>(const float*, const float*, float*, int, int, int);
template void matmul_serial<double>(const double*, const double*, double*, int, int, int);
template void matmul_omp<float>(const float*, const float*, float*, int, int, int);
template void matmul_omp<double>(const double*, const double*, double*, int, int, int);

}  // namespace flowpolicy::ad
