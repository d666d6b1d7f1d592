#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowpolicy/common.hpp"

namespace flowpolicy::ad {

// rows x cols; scalars are {1,1}
using Shape = std::array<int, 2>;

template <class T>
struct Param {
    std::string name;
    Shape shape{0, 0};
    std::vector<T> value;

    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }
    std::size_t size() const { return value.size(); }
};

template <class T>
class ParamStore {
  public:
    Param<T>* add(const std::string& name, int rows, int cols);
    Param<T>* find(const std::string& name) const;
    const std::vector<std::unique_ptr<Param<T>>>& all() const { return params_; }
    std::size_t total_size() const;

  private:
    std::vector<std::unique_ptr<Param<T>>> params_;
};

// Copy values/names/shapes into a store of another scalar type (f64 shadow
// evaluation for finite differences).
template <class Dst, class Src>
ParamStore<Dst> mirror_store(const ParamStore<Src>& src);

enum class OpKind {
    Input, Constant, ParamRef, MatMul, Transpose, Add, Multiply, Scale, AddScalar,
    ConcatRows, ConcatCols, SliceRows, SliceCols, Softmax, LayerNorm, Gelu,
    Sigmoid, Embedding, Sinusoidal, Rotary3D, Sum, Mean, BceLogits,
};

// A static computation graph: built once, then forward()/backward() re-execute
// in place with refreshed leaf values. No allocation happens in the hot loop.
// One backward per forward; parameter gradients accumulate across backward
// calls until zero_param_grads().
template <class T>
class Graph {
  public:
    struct ParamGrad {
        Param<T>* param;
        std::vector<T> grad;
    };

    int input(int rows, int cols);
    int constant(int rows, int cols, std::vector<T> values);
    int param(Param<T>* p);

    int matmul(int a, int b);
    int transpose(int a);
    // add/multiply accept equal shapes or a 1 x cols right operand broadcast
    // over rows
    int add(int a, int b);
    int multiply(int a, int b);
    int scale(int a, T s);
    int add_scalar(int a, T s);
    int concat_rows(const std::vector<int>& xs);
    int concat_cols(const std::vector<int>& xs);
    int slice_rows(int a, int begin, int len);
    int slice_cols(int a, int begin, int len);
    int softmax(int a);     // along the last axis
    int layer_norm(int a);  // per row, eps 1e-5, no affine
    int gelu(int a);
    int sigmoid(int a);
    int embedding(Param<T>* table, int count);
    int sinusoidal(int scalar_node, int dim, T input_scale);
    // x: n x d, pos: n x 3. Rotates the leading 6*floor(d/6) channels in three
    // axis groups; remaining channels pass through. No gradient to positions.
    int rotary3d(int x, int pos, T base);
    int sum(int a);
    int mean(int a);
    // mean over elements of BCE(sigmoid(logits), targets), logits clamped ±30
    int bce_logits(int logits, int targets);

    void set_input(int node, const T* data, std::size_t size);
    void set_ids(int node, const int* ids, std::size_t count);

    void forward();
    void backward(int loss_node, T loss_grad = T(1));

    const std::vector<T>& value(int node) const;
    const std::vector<T>& grad(int node) const;
    Shape shape(int node) const { return nodes_[node].shape; }
    int num_nodes() const { return int(nodes_.size()); }

    void zero_param_grads();
    const std::vector<ParamGrad>& param_grads() const { return pgrads_; }

    bool check_finite = false;           // NaN check hook (throws NonFiniteField)
    bool debug_break_gelu_grad = false;  // corrupts one backward rule; test hook

  private:
    struct Node {
        OpKind op;
        Shape shape;
        int a = -1, b = -1;
        std::vector<int> list;
        int i0 = 0, i1 = 0;
        T scalar = T(0);
        Param<T>* par = nullptr;
        std::vector<int> ids;
        std::vector<T> val, grd, aux;
    };

    int push(Node n);
    const T* data(int node) const;
    T* grad_buf(int node);
    void exec(Node& n);
    void exec_backward(Node& n);
    void require(bool cond, const std::string& what) const;
    std::string shape_str(int node) const;
    int pgrad_slot(Param<T>* p);

    std::vector<Node> nodes_;
    std::vector<ParamGrad> pgrads_;
    std::unordered_map<Param<T>*, int> pgrad_index_;
    bool forwarded_ = false;
};

// Raw matmul kernels (row-major, c = a[m x k] * b[k x n]). The OpenMP kernel
// computes each output element with the same accumulation order as the serial
// one, so results are bit-identical for any thread count.
template <class T>
void matmul_serial(const T* a, const T* b, T* c, int m, int k, int n);
template <class T>
void matmul_omp(const T* a, const T* b, T* c, int m, int k, int n);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class T>
struct AdamConfig {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

template <class T>
class Adam {
  public:
    explicit Adam(AdamConfig<T> cfg = {}) : cfg_(cfg) {}

    // grad_scale multiplies every gradient (1/batch for mean-over-items).
    void step(const std::vector<typename Graph<T>::ParamGrad>& grads, T grad_scale = T(1));

    std::int64_t step_count() const { return t_; }
    const AdamConfig<T>& config() const { return cfg_; }

  private:
    struct Slot {
        std::vector<T> m, v;
    };
    AdamConfig<T> cfg_;
    std::int64_t t_ = 0;
    std::unordered_map<Param<T>*, Slot> slots_;
};

// ---------------------------------------------------------------------------
// Gradient checking against a 64-bit central-difference oracle
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0;
    std::string worst_param;
    int worst_index = -1;
    int probes = 0;
    bool pass(double tol) const { return probes > 0 && max_rel_err < tol; }
};

// analytic: param name -> full gradient buffer (f32 backward output).
// f64_store: value mirror of the checked parameters; loss_f64 re-evaluates the
// loss on it. Relative error uses max(|ga|, |gf|, grad_floor) as denominator.
GradCheckResult grad_check(const std::unordered_map<std::string, std::vector<float>>& analytic,
                           ParamStore<double>& f64_store,
                           const std::function<double()>& loss_f64, int probes,
                           std::uint64_t seed, double fd_h = 1e-3,
                           double grad_floor = 1e-2);

}  // namespace flowpolicy::ad
