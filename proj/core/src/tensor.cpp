#include "ggsd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

namespace ggsd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap cmap(const Tensor &t, std::size_t rows, std::size_t cols) {
  return CMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MMap mmap(Tensor &t, std::size_t rows, std::size_t cols) {
  return MMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

std::size_t shape_product(const std::vector<std::size_t> &shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void require(bool ok, const std::string &msg) {
  if (!ok) throw ContractError(msg);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(shape_product(shape_) == data_.size(), "tensor: shape does not match data length");
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// ---- ParamStore -------------------------------------------------------------

std::size_t ParamStore::add(std::string name, Tensor init) {
  for (const auto &p : params_)
    require(p.name != name, "parameter name not unique: " + name);
  params_.emplace_back(std::move(name), std::move(init));
  return params_.size() - 1;
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto &p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto &p : params_) p.grad.fill(0.0);
}

bool ParamStore::has(const std::string &name) const {
  for (const auto &p : params_)
    if (p.name == name) return true;
  return false;
}

Parameter &ParamStore::by_name(const std::string &name) {
  for (auto &p : params_)
    if (p.name == name) return p;
  throw ContractError("no such parameter: " + name);
}

// ---- Tape -------------------------------------------------------------------

struct OpAccess {
  static int make(Tape &t, Tensor v, bool rg) {
    return t.make_node(std::move(v), rg, nullptr);
  }
  static void set_fn(Tape &t, int id, std::function<void(Tape &)> fn) {
    t.nodes_[id].backprop = std::move(fn);
  }
  static const Tensor &val(const Tape &t, int id) { return t.nodes_[id].value; }
  static Tensor &grad(Tape &t, int id) { return t.nodes_[id].grad; }
  static bool rg(const Tape &t, int id) { return t.nodes_[id].requires_grad; }
};

int Tape::make_node(Tensor value, bool requires_grad, std::function<void(Tape &)> fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backprop = std::move(fn);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  int id = make_node(std::move(value), requires_grad, nullptr);
  return Var{this, id};
}

Var Tape::param_leaf(ParamStore &store, std::size_t index) {
  if (bound_store_ != nullptr && bound_store_ != &store)
    throw ContractError("tape already bound to a different parameter store");
  bound_store_ = &store;
  int id = make_node(store[index].value, true, nullptr);
  nodes_[id].param_index = static_cast<int>(index);
  return Var{this, id};
}

void Tape::run_backward(Var loss) {
  require(loss.tape == this, "backward: loss from a different tape");
  require(nodes_[loss.id].value.size() == 1, "backward: loss must be scalar");
  for (auto &n : nodes_) {
    if (!n.requires_grad) continue;
    if (n.grad.size() != n.value.size()) n.grad = Tensor::zeros(n.value.shape());
    else n.grad.fill(0.0);
  }
  nodes_[loss.id].grad[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    auto &n = nodes_[i];
    if (n.requires_grad && n.backprop) n.backprop(*this);
  }
}

void Tape::backward(Var loss, double grad_scale) {
  run_backward(loss);
  if (bound_store_ == nullptr) return;
  for (auto &n : nodes_) {
    if (n.param_index < 0 || n.grad.size() == 0) continue;
    auto &acc = (*bound_store_)[static_cast<std::size_t>(n.param_index)].grad;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grad_scale * n.grad[i];
  }
}

void Tape::backward_into(Var loss, std::vector<Tensor> &out, double grad_scale) {
  run_backward(loss);
  for (auto &n : nodes_) {
    if (n.param_index < 0 || n.grad.size() == 0) continue;
    auto &acc = out[static_cast<std::size_t>(n.param_index)];
    if (acc.size() != n.grad.size()) acc = Tensor::zeros(n.grad.shape());
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grad_scale * n.grad[i];
  }
}

// ---- op plumbing -------------------------------------------------------------

namespace {

bool wants_grad(Var a) { return OpAccess::rg(*a.tape, a.id); }
const Tensor &V(Var v) { return OpAccess::val(*v.tape, v.id); }

// Creates the output node, then attaches a backprop closure that may read its
// own gradient via the captured id.
template <typename F>
Var emit(Tape &t, Tensor value, bool rg, F &&make_fn) {
  int id = OpAccess::make(t, std::move(value), rg);
  if (rg) OpAccess::set_fn(t, id, make_fn(id));
  return Var{&t, id};
}

void same_tape(Var a, Var b) {
  require(a.tape == b.tape, "operands live on different tapes");
}

}  // namespace

// ---- operations -------------------------------------------------------------

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const Tensor &ta = V(a), &tb = V(b);
  require(ta.rank() == 2 && tb.rank() == 2, "matmul: rank-2 tensors required");
  require(ta.dim(1) == tb.dim(0), "matmul: inner dimensions disagree");
  const std::size_t m = ta.dim(0), p = ta.dim(1), q = tb.dim(1);
  Tensor out({m, q});
  mmap(out, m, q).noalias() = cmap(ta, m, p) * cmap(tb, p, q);
  const bool rga = wants_grad(a), rgb = wants_grad(b);
  const int ia = a.id, ib = b.id;
  return emit(*a.tape, std::move(out), rga || rgb, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      const Tensor &va = OpAccess::val(t, ia);
      const Tensor &vb = OpAccess::val(t, ib);
      if (rga) {
        mmap(OpAccess::grad(t, ia), m, p).noalias() +=
            cmap(g, m, q) * cmap(vb, p, q).transpose();
      }
      if (rgb) {
        mmap(OpAccess::grad(t, ib), p, q).noalias() +=
            cmap(va, m, p).transpose() * cmap(g, m, q);
      }
    };
  });
}

Var transpose(Var a) {
  const Tensor &ta = V(a);
  require(ta.rank() == 2, "transpose: rank-2 tensor required");
  const std::size_t m = ta.dim(0), n = ta.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = ta.at(i, j);
  const bool rg = wants_grad(a);
  const int ia = a.id;
  return emit(*a.tape, std::move(out), rg, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      Tensor &ga = OpAccess::grad(t, ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
    };
  });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  const Tensor &ta = V(a), &tb = V(b);
  require(ta.same_shape(tb), "add: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
  const bool rga = wants_grad(a), rgb = wants_grad(b);
  const int ia = a.id, ib = b.id;
  return emit(*a.tape, std::move(out), rga || rgb, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      if (rga) {
        Tensor &ga = OpAccess::grad(t, ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (rgb) {
        Tensor &gb = OpAccess::grad(t, ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  const Tensor &ta = V(a), &tb = V(b);
  require(ta.same_shape(tb), "sub: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= tb[i];
  const bool rga = wants_grad(a), rgb = wants_grad(b);
  const int ia = a.id, ib = b.id;
  return emit(*a.tape, std::move(out), rga || rgb, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      if (rga) {
        Tensor &ga = OpAccess::grad(t, ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (rgb) {
        Tensor &gb = OpAccess::grad(t, ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b);
  const Tensor &ta = V(a), &tb = V(b);
  require(ta.same_shape(tb), "mul: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
  const bool rga = wants_grad(a), rgb = wants_grad(b);
  const int ia = a.id, ib = b.id;
  return emit(*a.tape, std::move(out), rga || rgb, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      const Tensor &va = OpAccess::val(t, ia);
      const Tensor &vb = OpAccess::val(t, ib);
      if (rga) {
        Tensor &ga = OpAccess::grad(t, ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
      }
      if (rgb) {
        Tensor &gb = OpAccess::grad(t, ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
      }
    };
  });
}

Var scale(Var a, double c) {
  Tensor out = V(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  const bool rg = wants_grad(a);
  const int ia = a.id;
  return emit(*a.tape, std::move(out), rg, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      Tensor &ga = OpAccess::grad(t, ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    };
  });
}

Var add_rowvec(Var a, Var b) {
  same_tape(a, b);
  const Tensor &ta = V(a), &tb = V(b);
  require(ta.rank() == 2 && tb.rank() == 1 && ta.dim(1) == tb.dim(0),
          "add_rowvec: want [m,n] + [n]");
  const std::size_t m = ta.dim(0), n = ta.dim(1);
  Tensor out = ta;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += tb[j];
  const bool rga = wants_grad(a), rgb = wants_grad(b);
  const int ia = a.id, ib = b.id;
  return emit(*a.tape, std::move(out), rga || rgb, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      if (rga) {
        Tensor &ga = OpAccess::grad(t, ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (rgb) {
        Tensor &gb = OpAccess::grad(t, ib);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
      }
    };
  });
}

Var mul_rowvec(Var a, Var b) {
  same_tape(a, b);
  const Tensor &ta = V(a), &tb = V(b);
  require(ta.rank() == 2 && tb.rank() == 1 && ta.dim(1) == tb.dim(0),
          "mul_rowvec: want [m,n] * [n]");
  const std::size_t m = ta.dim(0), n = ta.dim(1);
  Tensor out = ta;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) *= tb[j];
  const bool rga = wants_grad(a), rgb = wants_grad(b);
  const int ia = a.id, ib = b.id;
  return emit(*a.tape, std::move(out), rga || rgb, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      const Tensor &va = OpAccess::val(t, ia);
      const Tensor &vb = OpAccess::val(t, ib);
      if (rga) {
        Tensor &ga = OpAccess::grad(t, ia);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(i, j) * vb[j];
      }
      if (rgb) {
        Tensor &gb = OpAccess::grad(t, ib);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g.at(i, j) * va.at(i, j);
      }
    };
  });
}

Var silu(Var a) {
  const Tensor &ta = V(a);
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-ta[i]));
    out[i] = ta[i] * s;
  }
  const bool rg = wants_grad(a);
  const int ia = a.id;
  return emit(*a.tape, std::move(out), rg, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      const Tensor &x = OpAccess::val(t, ia);
      Tensor &ga = OpAccess::grad(t, ia);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x[i]));
        ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
      }
    };
  });
}

Var sigmoid(Var a) {
  const Tensor &ta = V(a);
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-ta[i]));
  const bool rg = wants_grad(a);
  const int ia = a.id;
  return emit(*a.tape, std::move(out), rg, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      const Tensor &y = OpAccess::val(t, io);
      Tensor &ga = OpAccess::grad(t, ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    };
  });
}

Var sum(Var a) {
  const Tensor &ta = V(a);
  double s = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) s += ta[i];
  const bool rg = wants_grad(a);
  const int ia = a.id;
  return emit(*a.tape, Tensor::scalar(s), rg, [=](int io) {
    return [=](Tape &t) {
      const double g = OpAccess::grad(t, io)[0];
      Tensor &ga = OpAccess::grad(t, ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    };
  });
}

Var mean(Var a) {
  const std::size_t n = V(a).size();
  require(n > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var reshape(Var a, std::vector<std::size_t> shape) {
  const Tensor &ta = V(a);
  require(shape_product(shape) == ta.size(), "reshape: element count mismatch");
  Tensor out(std::move(shape), std::vector<double>(ta.data(), ta.data() + ta.size()));
  const bool rg = wants_grad(a);
  const int ia = a.id;
  return emit(*a.tape, std::move(out), rg, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      Tensor &ga = OpAccess::grad(t, ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  });
}

Var concat_cols(Var a, Var b) {
  same_tape(a, b);
  const Tensor &ta = V(a), &tb = V(b);
  require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(0) == tb.dim(0),
          "concat_cols: row counts disagree");
  const std::size_t m = ta.dim(0), p = ta.dim(1), q = tb.dim(1);
  Tensor out({m, p + q});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) out.at(i, j) = ta.at(i, j);
    for (std::size_t j = 0; j < q; ++j) out.at(i, p + j) = tb.at(i, j);
  }
  const bool rga = wants_grad(a), rgb = wants_grad(b);
  const int ia = a.id, ib = b.id;
  return emit(*a.tape, std::move(out), rga || rgb, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      if (rga) {
        Tensor &ga = OpAccess::grad(t, ia);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) ga.at(i, j) += g.at(i, j);
      }
      if (rgb) {
        Tensor &gb = OpAccess::grad(t, ib);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < q; ++j) gb.at(i, j) += g.at(i, p + j);
      }
    };
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor &ta = V(a);
  require(ta.rank() == 2 && begin < end && end <= ta.dim(1), "slice_cols: bad range");
  const std::size_t m = ta.dim(0), w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = ta.at(i, begin + j);
  const bool rg = wants_grad(a);
  const int ia = a.id;
  return emit(*a.tape, std::move(out), rg, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      Tensor &ga = OpAccess::grad(t, ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) ga.at(i, begin + j) += g.at(i, j);
    };
  });
}

Var rows_mean(Var a) {
  const Tensor &ta = V(a);
  require(ta.rank() == 2, "rows_mean: rank-2 tensor required");
  const std::size_t m = ta.dim(0), n = ta.dim(1);
  Tensor out({n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += ta.at(i, j);
  for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
  const bool rg = wants_grad(a);
  const int ia = a.id;
  return emit(*a.tape, std::move(out), rg, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      Tensor &ga = OpAccess::grad(t, ia);
      const double inv = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g[j] * inv;
    };
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  same_tape(x, gain);
  same_tape(x, bias);
  const Tensor &tx = V(x), &tg = V(gain), &tb = V(bias);
  require(tx.rank() == 2, "layer_norm: rank-2 input required");
  const std::size_t m = tx.dim(0), n = tx.dim(1);
  require(tg.rank() == 1 && tg.dim(0) == n && tb.rank() == 1 && tb.dim(0) == n,
          "layer_norm: gain/bias must have width of input");
  Tensor out({m, n});
  Tensor xhat({m, n});
  Tensor inv_std({m});
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += tx.at(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = tx.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (tx.at(i, j) - mu) * is;
      xhat.at(i, j) = xh;
      out.at(i, j) = tg[j] * xh + tb[j];
    }
  }
  const bool rgx = wants_grad(x), rgg = wants_grad(gain), rgb = wants_grad(bias);
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return emit(*x.tape, std::move(out), rgx || rgg || rgb,
              [=, xh = std::move(xhat), is = std::move(inv_std)](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      const Tensor &vg = OpAccess::val(t, ig);
      for (std::size_t i = 0; i < m; ++i) {
        if (rgg || rgb) {
          Tensor *gg = rgg ? &OpAccess::grad(t, ig) : nullptr;
          Tensor *gb = rgb ? &OpAccess::grad(t, ib) : nullptr;
          for (std::size_t j = 0; j < n; ++j) {
            if (gg) (*gg)[j] += g.at(i, j) * xh.at(i, j);
            if (gb) (*gb)[j] += g.at(i, j);
          }
        }
        if (rgx) {
          // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = g.at(i, j) * vg[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh.at(i, j);
          }
          mean_dxh /= static_cast<double>(n);
          mean_dxh_xh /= static_cast<double>(n);
          Tensor &gx = OpAccess::grad(t, ix);
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = g.at(i, j) * vg[j];
            gx.at(i, j) += (dxh - mean_dxh - xh.at(i, j) * mean_dxh_xh) * is[i];
          }
        }
      }
    };
  });
}

Var softmax_attention(Var q, Var k, Var v, std::size_t heads) {
  same_tape(q, k);
  same_tape(q, v);
  const Tensor &tq = V(q), &tk = V(k), &tv = V(v);
  require(tq.rank() == 2 && tk.rank() == 2 && tv.rank() == 2,
          "softmax_attention: rank-2 tensors required");
  const std::size_t n = tq.dim(0), d = tq.dim(1), m = tk.dim(0);
  require(tk.dim(1) == d && tv.dim(0) == m && tv.dim(1) == d,
          "softmax_attention: q/k/v widths disagree");
  if (heads == 0 || d % heads != 0)
    throw ConfigError("softmax_attention: width not divisible by head count");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out({n, d});
  Tensor probs({heads, n, m});
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      // scores then stable softmax over the m keys
      double maxs = -1e300;
      std::vector<double> srow(m);
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += tq.at(i, off + c) * tk.at(j, off + c);
        s *= inv_sqrt;
        srow[j] = s;
        maxs = std::max(maxs, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        srow[j] = std::exp(srow[j] - maxs);
        z += srow[j];
      }
      for (std::size_t j = 0; j < m; ++j) probs.at(h, i, j) = srow[j] / z;
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += probs.at(h, i, j) * tv.at(j, off + c);
        out.at(i, off + c) = acc;
      }
    }
  }

  const bool rgq = wants_grad(q), rgk = wants_grad(k), rgv = wants_grad(v);
  const int iq = q.id, ik = k.id, iv = v.id;
  return emit(*q.tape, std::move(out), rgq || rgk || rgv,
              [=, P = std::move(probs)](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      const Tensor &vq = OpAccess::val(t, iq);
      const Tensor &vk = OpAccess::val(t, ik);
      const Tensor &vv = OpAccess::val(t, iv);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
          // dP[i,j] = sum_c g[i,c]*v[j,c]; dS = P o (dP - sum_j dP*P)
          std::vector<double> dP(m, 0.0);
          for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < dh; ++c) acc += g.at(i, off + c) * vv.at(j, off + c);
            dP[j] = acc;
          }
          double dot = 0.0;
          for (std::size_t j = 0; j < m; ++j) dot += dP[j] * P.at(h, i, j);
          std::vector<double> dS(m);
          for (std::size_t j = 0; j < m; ++j) dS[j] = P.at(h, i, j) * (dP[j] - dot);
          if (rgv) {
            Tensor &gv = OpAccess::grad(t, iv);
            for (std::size_t j = 0; j < m; ++j) {
              const double p = P.at(h, i, j);
              for (std::size_t c = 0; c < dh; ++c) gv.at(j, off + c) += p * g.at(i, off + c);
            }
          }
          if (rgq) {
            Tensor &gq = OpAccess::grad(t, iq);
            for (std::size_t j = 0; j < m; ++j) {
              const double w = dS[j] * inv_sqrt;
              for (std::size_t c = 0; c < dh; ++c) gq.at(i, off + c) += w * vk.at(j, off + c);
            }
          }
          if (rgk) {
            Tensor &gk = OpAccess::grad(t, ik);
            for (std::size_t j = 0; j < m; ++j) {
              const double w = dS[j] * inv_sqrt;
              for (std::size_t c = 0; c < dh; ++c) gk.at(j, off + c) += w * vq.at(i, off + c);
            }
          }
        }
      }
    };
  });
}

Var conv1d(Var x, Var w, Var b) {
  same_tape(x, w);
  same_tape(x, b);
  const Tensor &tx = V(x), &tw = V(w), &tb = V(b);
  require(tx.rank() == 2 && tw.rank() == 3 && tb.rank() == 1, "conv1d: bad ranks");
  const std::size_t L = tx.dim(0), cin = tx.dim(1);
  const std::size_t cout = tw.dim(0), ks = tw.dim(2);
  require(tw.dim(1) == cin && tb.dim(0) == cout, "conv1d: channel mismatch");
  require(ks % 2 == 1, "conv1d: kernel size must be odd for same padding");
  const std::size_t half = ks / 2;
  Tensor out({L, cout});
  for (std::size_t tpos = 0; tpos < L; ++tpos) {
    for (std::size_t co = 0; co < cout; ++co) {
      double acc = tb[co];
      for (std::size_t j = 0; j < ks; ++j) {
        const long src = static_cast<long>(tpos) + static_cast<long>(j) - static_cast<long>(half);
        if (src < 0 || src >= static_cast<long>(L)) continue;
        for (std::size_t ci = 0; ci < cin; ++ci)
          acc += tx.at(static_cast<std::size_t>(src), ci) * tw.at(co, ci, j);
      }
      out.at(tpos, co) = acc;
    }
  }
  const bool rgx = wants_grad(x), rgw = wants_grad(w), rgb = wants_grad(b);
  const int ix = x.id, iw = w.id, ib = b.id;
  return emit(*x.tape, std::move(out), rgx || rgw || rgb, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      const Tensor &vx = OpAccess::val(t, ix);
      const Tensor &vw = OpAccess::val(t, iw);
      for (std::size_t tpos = 0; tpos < L; ++tpos) {
        for (std::size_t co = 0; co < cout; ++co) {
          const double go = g.at(tpos, co);
          if (rgb) OpAccess::grad(t, ib)[co] += go;
          for (std::size_t j = 0; j < ks; ++j) {
            const long src =
                static_cast<long>(tpos) + static_cast<long>(j) - static_cast<long>(half);
            if (src < 0 || src >= static_cast<long>(L)) continue;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              if (rgw) OpAccess::grad(t, iw).at(co, ci, j) +=
                  go * vx.at(static_cast<std::size_t>(src), ci);
              if (rgx) OpAccess::grad(t, ix).at(static_cast<std::size_t>(src), ci) +=
                  go * vw.at(co, ci, j);
            }
          }
        }
      }
    };
  });
}

Var ppgn_matmul(Var a, Var b) {
  same_tape(a, b);
  const Tensor &ta = V(a), &tb = V(b);
  require(ta.rank() == 3 && tb.rank() == 3, "ppgn_matmul: rank-3 tensors required");
  const std::size_t n = ta.dim(0), c = ta.dim(2);
  require(ta.dim(1) == n && tb.dim(0) == n && tb.dim(1) == n && tb.dim(2) == c,
          "ppgn_matmul: want two [n,n,c] tensors");
  Tensor out({n, n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t kk = 0; kk < n; ++kk) {
      const double *arow = ta.data() + (i * n + kk) * c;
      const double *brow = tb.data() + (kk * n) * c;
      double *orow = out.data() + (i * n) * c;
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) orow[j * c + ch] += arow[ch] * brow[j * c + ch];
    }
  const bool rga = wants_grad(a), rgb = wants_grad(b);
  const int ia = a.id, ib = b.id;
  return emit(*a.tape, std::move(out), rga || rgb, [=](int io) {
    return [=](Tape &t) {
      const Tensor &g = OpAccess::grad(t, io);
      const Tensor &va = OpAccess::val(t, ia);
      const Tensor &vb = OpAccess::val(t, ib);
      if (rga) {
        Tensor &ga = OpAccess::grad(t, ia);
        // dA[i,k,ch] += sum_j g[i,j,ch] * B[k,j,ch]
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t kk = 0; kk < n; ++kk)
            for (std::size_t j = 0; j < n; ++j)
              for (std::size_t ch = 0; ch < c; ++ch)
                ga.at(i, kk, ch) += g.at(i, j, ch) * vb.at(kk, j, ch);
      }
      if (rgb) {
        Tensor &gb = OpAccess::grad(t, ib);
        // dB[k,j,ch] += sum_i A[i,k,ch] * g[i,j,ch]
        for (std::size_t kk = 0; kk < n; ++kk)
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t ch = 0; ch < c; ++ch)
                gb.at(kk, j, ch) += va.at(i, kk, ch) * g.at(i, j, ch);
      }
    };
  });
}

Var bce_with_logits_mean(Var logits, const Tensor &target, const Tensor &weight) {
  const Tensor &tz = V(logits);
  require(tz.same_shape(target) && tz.same_shape(weight), "bce: shape mismatch");
  double wsum = 0.0;
  for (std::size_t i = 0; i < weight.size(); ++i) wsum += weight[i];
  require(wsum > 0.0, "bce: zero total weight");
  double loss = 0.0;
  for (std::size_t i = 0; i < tz.size(); ++i) {
    if (weight[i] == 0.0) continue;
    const double z = tz[i], y = target[i];
    loss += weight[i] * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
  }
  loss /= wsum;
  const bool rg = wants_grad(logits);
  const int iz = logits.id;
  return emit(*logits.tape, Tensor::scalar(loss), rg,
              [=, tgt = target, wt = weight](int io) {
    return [=](Tape &t) {
      const double g = OpAccess::grad(t, io)[0];
      const Tensor &z = OpAccess::val(t, iz);
      Tensor &gz = OpAccess::grad(t, iz);
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (wt[i] == 0.0) continue;
        const double s = 1.0 / (1.0 + std::exp(-z[i]));
        gz[i] += g * wt[i] * (s - tgt[i]) / wsum;
      }
    };
  });
}

// ---- Adam --------------------------------------------------------------------

void Adam::step(ParamStore &params) {
  if (m_.size() != params.count()) {
    m_.assign(params.count(), Tensor());
    v_.assign(params.count(), Tensor());
    for (std::size_t i = 0; i < params.count(); ++i) {
      m_[i] = Tensor::zeros(params[i].value.shape());
      v_[i] = Tensor::zeros(params[i].value.shape());
    }
    step_count_ = 0;
  }
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params.count(); ++i) {
    Parameter &p = params[i];
    Tensor &m = m_[i];
    Tensor &v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p.value[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
    if (!p.value.all_finite())
      throw NumericError("adam: parameter '" + p.name + "' became non-finite");
    p.grad.fill(0.0);
  }
}

void Adam::reset() {
  m_.clear();
  v_.clear();
  step_count_ = 0;
}

// ---- grad_check ---------------------------------------------------------------

double grad_check(const std::function<Var(Tape &)> &f, ParamStore &params, double h) {
  params.zero_grad();
  double base;
  {
    Tape tape;
    Var loss = f(tape);
    base = tape.value(loss)[0];
    if (!std::isfinite(base)) throw NumericError("grad_check: loss is not finite");
    tape.backward(loss);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) analytic.push_back(params[i].grad);
  params.zero_grad();

  const auto eval = [&]() {
    Tape tape;
    Var loss = f(tape);
    const double v = tape.value(loss)[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: perturbed loss is not finite");
    return v;
  };

  // Denominator floor absorbs finite-difference roundoff (~1e-11 at h=1e-5)
  // without masking real gradients.
  const double eps = 1e-6;
  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.count(); ++pi) {
    Parameter &p = params[pi];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double orig = p.value[j];
      p.value[j] = orig + h;
      const double fp = eval();
      p.value[j] = orig - h;
      const double fm = eval();
      p.value[j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double ana = analytic[pi][j];
      const double rel = std::abs(ana - numeric) / (std::abs(ana) + std::abs(numeric) + eps);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace ggsd
