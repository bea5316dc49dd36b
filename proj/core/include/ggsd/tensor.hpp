#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ggsd/errors.hpp"

namespace ggsd {

// Dense row-major 64-bit tensor. Plain value semantics; all graphs here are
// desk-scale so copies are cheap relative to the math.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<std::size_t> &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }

  double *data() { return data_.data(); }
  const double *data() const { return data_.data(); }

  double &operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double &at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double &at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Tensor &o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  void fill(double v);

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Named learnable tensor plus its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor::zeros(value.shape());
  }
};

// Ordered collection of uniquely named parameters.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor init);
  Parameter &operator[](std::size_t i) { return params_[i]; }
  const Parameter &operator[](std::size_t i) const { return params_[i]; }
  std::size_t count() const { return params_.size(); }
  std::size_t element_count() const;
  void zero_grad();
  bool has(const std::string &name) const;
  Parameter &by_name(const std::string &name);

 private:
  std::vector<Parameter> params_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy.
struct Var {
  Tape *tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order; backward() walks
// them in reverse. One tape per forward pass; a tape is single-threaded.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = false);
  // Leaf bound to a parameter: after backward(), the node gradient is added
  // into the parameter's grad accumulator (scaled by grad_scale).
  Var param_leaf(ParamStore &store, std::size_t index);

  const Tensor &value(Var v) const { return nodes_[v.id].value; }
  const Tensor &grad(Var v) const { return nodes_[v.id].grad; }

  // Seeds d(loss)=1 and accumulates into every requires_grad leaf.
  // loss must be a scalar (size-1) node.
  void backward(Var loss, double grad_scale = 1.0);

  // Collects gradients of bound parameters into `out` (same layout as the
  // store) instead of the store itself; used for deterministic batch reduction.
  void backward_into(Var loss, std::vector<Tensor> &out, double grad_scale = 1.0);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend struct OpAccess;
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    int param_index = -1;  // >=0 when bound to a ParamStore slot
    std::function<void(Tape &)> backprop;  // may be empty for leaves
  };
  std::vector<Node> nodes_;
  ParamStore *bound_store_ = nullptr;
  int make_node(Tensor value, bool requires_grad, std::function<void(Tape &)> fn);
  void run_backward(Var loss);
};

// ---- Differentiable operations -------------------------------------------
// All operations are deterministic functions of their inputs, and every
// backward pass is exact (validated against central finite differences).

Var matmul(Var a, Var b);                       // [m,p]x[p,q] -> [m,q]
Var transpose(Var a);                           // [m,n] -> [n,m]
Var add(Var a, Var b);                          // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);                          // Hadamard
Var scale(Var a, double c);
Var add_rowvec(Var a, Var b);                   // [m,n] + [n]
Var mul_rowvec(Var a, Var b);                   // [m,n] * [n]
Var silu(Var a);
Var sigmoid(Var a);
Var sum(Var a);                                 // -> [1]
Var mean(Var a);                                // -> [1]
Var reshape(Var a, std::vector<std::size_t> shape);
Var concat_cols(Var a, Var b);                  // [m,p],[m,q] -> [m,p+q]
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var rows_mean(Var a);                           // [m,n] -> [n]
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);  // per-row over last dim

// Per-head scaled dot-product attention, heads concatenated.
// q:[n,d] k:[m,d] v:[m,d]; d must be divisible by heads.
Var softmax_attention(Var q, Var k, Var v, std::size_t heads);

// 1-D convolution over a length-L sequence with C_in channels.
// x:[L,C_in], w:[C_out,C_in,K] (K odd, same padding), b:[C_out] -> [L,C_out]
Var conv1d(Var x, Var w, Var b);

// Channel-wise matrix product for PPGN blocks:
// a,b: [n,n,c] -> out[i,j,ch] = sum_k a[i,k,ch]*b[k,j,ch]
Var ppgn_matmul(Var a, Var b);

// Mean binary cross-entropy on logits, numerically stable. target/weight are
// plain tensors (no gradient); weight selects and weighs entries, mean is over
// sum(weight).
Var bce_with_logits_mean(Var logits, const Tensor &target, const Tensor &weight);

// ---- Optimization ----------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  // Applies one update from the accumulated grads, then zeroes them.
  // Throws NumericError if any parameter becomes non-finite.
  void step(ParamStore &params);
  void reset();
  const AdamConfig &config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long step_count_ = 0;
};

// ---- Gradient checking -----------------------------------------------------

// f builds a scalar loss from the current parameter values on the given tape.
// Returns max over parameter elements of
//   |analytic - central_difference| / (|analytic| + |central| + eps).
// Throws NumericError if the loss is not finite.
double grad_check(const std::function<Var(Tape &)> &f, ParamStore &params,
                  double h = 1e-5);

}  // namespace ggsd
