#pragma once

#include <cassert>
#include <functional>
#include <memory>
#include <vector>

#include "jneus/core.hpp"
#include "jneus/params.hpp"

namespace jneus {

// Reverse-mode tape over dense row-major matrices. Nodes are created
// define-by-run; creation order is a valid topological order, so backward()
// is a single reverse sweep. One tape per loss evaluation; cleared between
// optimization steps.
template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr; }
  const Mat<T>& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
};

template <class T>
class Tape {
 public:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool needs_grad = false;
    ParamTensor<T>* param = nullptr;
    // Propagates this node's grad into its parents' grad buffers.
    std::function<void(Tape&, Node&)> backprop;
  };

  Var<T> constant(Mat<T> v) {
    return push(std::move(v), false, nullptr, nullptr);
  }
  Var<T> constant_scalar(T v) {
    Mat<T> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  Var<T> param(ParamTensor<T>& p) {
    return push(p.value, true, &p, nullptr);
  }

  // Building block for custom differentiable ops. `force_grad` marks the
  // node differentiable even without Var parents (ops that scatter straight
  // into ParamTensor buffers, e.g. hash-table gathers).
  Var<T> make_node(Mat<T> value, std::vector<Var<T>> parents,
                   std::function<void(Tape&, Node&)> backprop, bool force_grad = false) {
    bool ng = force_grad;
    for (auto& pv : parents) ng = ng || node(pv.id).needs_grad;
    return push(std::move(value), ng, nullptr, ng ? std::move(backprop) : nullptr);
  }

  Node& node(int id) { return nodes_[size_t(id)]; }
  const Node& node(int id) const { return nodes_[size_t(id)]; }

  Mat<T>& grad_of(const Var<T>& v) {
    Node& n = node(v.id);
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(const Var<T>& v, const Mat<T>& g) {
    if (!node(v.id).needs_grad) return;
    grad_of(v) += g;
  }

  // Seeds d(loss)/d(loss)=1 and sweeps the tape in reverse. Parameter-leaf
  // grads are accumulated into their ParamTensor buffers.
  void backward(const Var<T>& loss) {
    Node& ln = node(loss.id);
    if (!ln.value.allFinite()) throw std::runtime_error("backward: non-finite loss");
    if (ln.value.size() != 1) throw std::runtime_error("backward: loss must be scalar");
    grad_of(loss).setConstant(T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.param != nullptr) {
        n.param->grad += n.grad.template cast<double>();
      } else if (n.backprop) {
        n.backprop(*this, n);
      }
    }
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // ---- elementwise / structural ops ----

  Var<T> add(Var<T> a, Var<T> b) {
    same_shape(a, b);
    return make_node(a.val() + b.val(), {a, b}, [a, b](Tape& t, Node& n) {
      t.accumulate(a, n.grad);
      t.accumulate(b, n.grad);
    });
  }

  Var<T> sub(Var<T> a, Var<T> b) {
    same_shape(a, b);
    return make_node(a.val() - b.val(), {a, b}, [a, b](Tape& t, Node& n) {
      t.accumulate(a, n.grad);
      if (t.node(b.id).needs_grad) t.grad_of(b) -= n.grad;
    });
  }

  Var<T> mul(Var<T> a, Var<T> b) {
    same_shape(a, b);
    return make_node(a.val().cwiseProduct(b.val()), {a, b}, [a, b](Tape& t, Node& n) {
      if (t.node(a.id).needs_grad) t.grad_of(a) += n.grad.cwiseProduct(t.node(b.id).value);
      if (t.node(b.id).needs_grad) t.grad_of(b) += n.grad.cwiseProduct(t.node(a.id).value);
    });
  }

  Var<T> div(Var<T> a, Var<T> b) {
    same_shape(a, b);
    return make_node(a.val().cwiseQuotient(b.val()), {a, b}, [a, b](Tape& t, Node& n) {
      const Mat<T>& bv = t.node(b.id).value;
      if (t.node(a.id).needs_grad) t.grad_of(a) += n.grad.cwiseQuotient(bv);
      if (t.node(b.id).needs_grad)
        t.grad_of(b) -= n.grad.cwiseProduct(n.value).cwiseQuotient(bv);
    });
  }

  Var<T> scale(Var<T> a, T s) {
    return make_node(a.val() * s, {a}, [a, s](Tape& t, Node& n) {
      t.accumulate(a, n.grad * s);
    });
  }

  Var<T> add_scalar(Var<T> a, T s) {
    return make_node(a.val().array() + s, {a}, [a](Tape& t, Node& n) {
      t.accumulate(a, n.grad);
    });
  }

  Var<T> neg(Var<T> a) { return scale(a, T(-1)); }

  Var<T> square(Var<T> a) {
    return make_node(a.val().cwiseProduct(a.val()), {a}, [a](Tape& t, Node& n) {
      t.accumulate(a, T(2) * n.grad.cwiseProduct(t.node(a.id).value));
    });
  }

  Var<T> sqrt_eps(Var<T> a, T eps) {
    Mat<T> v = (a.val().array() + eps).sqrt();
    return make_node(std::move(v), {a}, [a](Tape& t, Node& n) {
      t.accumulate(a, (n.grad.array() * T(0.5) / n.value.array()).matrix());
    });
  }

  Var<T> abs(Var<T> a) {
    return make_node(a.val().cwiseAbs(), {a}, [a](Tape& t, Node& n) {
      Mat<T> sign = t.node(a.id).value.unaryExpr(
          [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
      t.accumulate(a, n.grad.cwiseProduct(sign));
    });
  }

  Var<T> relu(Var<T> a) {
    return make_node(a.val().cwiseMax(T(0)), {a}, [a](Tape& t, Node& n) {
      Mat<T> mask = t.node(a.id).value.unaryExpr([](T x) { return x > T(0) ? T(1) : T(0); });
      t.accumulate(a, n.grad.cwiseProduct(mask));
    });
  }

  Var<T> softplus(Var<T> a) {
    Mat<T> v = a.val().unaryExpr([](T x) {
      // log(1+exp(x)) = max(x,0) + log1p(exp(-|x|))
      return std::max(x, T(0)) + T(std::log1p(std::exp(-std::abs(double(x)))));
    });
    return make_node(std::move(v), {a}, [a](Tape& t, Node& n) {
      Mat<T> s = t.node(a.id).value.unaryExpr(
          [](T x) { return T(1.0 / (1.0 + std::exp(-double(x)))); });
      t.accumulate(a, n.grad.cwiseProduct(s));
    });
  }

  Var<T> sigmoid(Var<T> a) {
    Mat<T> v = a.val().unaryExpr([](T x) { return T(1.0 / (1.0 + std::exp(-double(x)))); });
    return make_node(std::move(v), {a}, [a](Tape& t, Node& n) {
      Mat<T> d = n.value.cwiseProduct((Mat<T>::Ones(n.value.rows(), n.value.cols()) - n.value));
      t.accumulate(a, n.grad.cwiseProduct(d));
    });
  }

  // exp of pre-activation clamped to [lo, hi]; clamped entries get zero
  // gradient, keeping density finite without aborting a batch.
  Var<T> exp_clamped(Var<T> a, T lo, T hi) {
    Mat<T> v = a.val().unaryExpr(
        [lo, hi](T x) { return T(std::exp(double(std::clamp(x, lo, hi)))); });
    return make_node(std::move(v), {a}, [a, lo, hi](Tape& t, Node& n) {
      const Mat<T>& av = t.node(a.id).value;
      Mat<T> g = n.grad.cwiseProduct(n.value);
      for (Eigen::Index i = 0; i < av.size(); ++i)
        if (av(i) <= lo || av(i) >= hi) g(i) = T(0);
      t.accumulate(a, g);
    });
  }

  Var<T> log_eps(Var<T> a, T eps) {
    Mat<T> v = (a.val().array() + eps).log();
    return make_node(std::move(v), {a, }, [a, eps](Tape& t, Node& n) {
      t.accumulate(a, (n.grad.array() / (t.node(a.id).value.array() + eps)).matrix());
    });
  }

  Var<T> maximum(Var<T> a, Var<T> b) {
    same_shape(a, b);
    return make_node(a.val().cwiseMax(b.val()), {a, b}, [a, b](Tape& t, Node& n) {
      const Mat<T>& av = t.node(a.id).value;
      const Mat<T>& bv = t.node(b.id).value;
      if (t.node(a.id).needs_grad) {
        Mat<T> mask = (av.array() >= bv.array()).template cast<T>();
        t.grad_of(a) += n.grad.cwiseProduct(mask);
      }
      if (t.node(b.id).needs_grad) {
        Mat<T> mask = (av.array() < bv.array()).template cast<T>();
        t.grad_of(b) += n.grad.cwiseProduct(mask);
      }
    });
  }

  Var<T> max0(Var<T> a) { return relu(a); }

  Var<T> mul_const(Var<T> a, const Mat<T>& c) {
    Mat<T> cc = c;
    return make_node(a.val().cwiseProduct(cc), {a}, [a, cc](Tape& t, Node& n) {
      t.accumulate(a, n.grad.cwiseProduct(cc));
    });
  }

  // (n,k) times a (1,1) scalar variable.
  Var<T> scale_var(Var<T> a, Var<T> s) {
    assert(s.rows() == 1 && s.cols() == 1);
    return make_node(a.val() * s.val()(0, 0), {a, s}, [a, s](Tape& t, Node& n) {
      if (t.node(a.id).needs_grad) t.grad_of(a) += n.grad * t.node(s.id).value(0, 0);
      if (t.node(s.id).needs_grad)
        t.grad_of(s)(0, 0) += n.grad.cwiseProduct(t.node(a.id).value).sum();
    });
  }

  // Gradient barrier: value copy, no backward flow.
  Var<T> detach(Var<T> a) { return constant(a.val()); }

  // ---- linear algebra ----

  Var<T> matmul(Var<T> a, Var<T> b) {
    return make_node(a.val() * b.val(), {a, b}, [a, b](Tape& t, Node& n) {
      if (t.node(a.id).needs_grad) t.grad_of(a) += n.grad * t.node(b.id).value.transpose();
      if (t.node(b.id).needs_grad) t.grad_of(b) += t.node(a.id).value.transpose() * n.grad;
    });
  }

  // x (n,k) + bias (1,k) broadcast over rows.
  Var<T> add_bias(Var<T> x, Var<T> bias) {
    Mat<T> v = x.val();
    v.rowwise() += bias.val().row(0);
    return make_node(std::move(v), {x, bias}, [x, bias](Tape& t, Node& n) {
      t.accumulate(x, n.grad);
      if (t.node(bias.id).needs_grad) t.grad_of(bias) += n.grad.colwise().sum();
    });
  }

  // (n,k) scaled rowwise by a column (n,1).
  Var<T> colwise_scale(Var<T> x, Var<T> col) {
    assert(col.cols() == 1 && col.rows() == x.rows());
    Mat<T> v = x.val().array().colwise() * col.val().col(0).array();
    return make_node(std::move(v), {x, col}, [x, col](Tape& t, Node& n) {
      if (t.node(x.id).needs_grad)
        t.grad_of(x) +=
            (n.grad.array().colwise() * t.node(col.id).value.col(0).array()).matrix();
      if (t.node(col.id).needs_grad)
        t.grad_of(col) += n.grad.cwiseProduct(t.node(x.id).value).rowwise().sum();
    });
  }

  // ---- reductions / reshaping ----

  Var<T> sum(Var<T> a) {
    Mat<T> v(1, 1);
    v(0, 0) = a.val().sum();
    return make_node(std::move(v), {a}, [a](Tape& t, Node& n) {
      Node& an = t.node(a.id);
      t.grad_of(a).array() += n.grad(0, 0);
      (void)an;
    });
  }

  Var<T> mean(Var<T> a) {
    T inv = T(1) / T(a.val().size());
    return scale(sum(a), inv);
  }

  Var<T> row_sum(Var<T> a) {
    Mat<T> v = a.val().rowwise().sum();
    return make_node(std::move(v), {a}, [a](Tape& t, Node& n) {
      t.grad_of(a).colwise() += n.grad.col(0);
    });
  }

  Var<T> slice_cols(Var<T> a, int start, int len) {
    Mat<T> v = a.val().middleCols(start, len);
    return make_node(std::move(v), {a, }, [a, start, len](Tape& t, Node& n) {
      t.grad_of(a).middleCols(start, len) += n.grad;
    });
  }

  Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    for (auto& p : parts) cols += p.cols();
    Mat<T> v(rows, cols);
    Eigen::Index off = 0;
    for (auto& p : parts) {
      v.middleCols(off, p.cols()) = p.val();
      off += p.cols();
    }
    std::vector<Var<T>> ps = parts;
    return make_node(std::move(v), ps, [ps](Tape& t, Node& n) {
      Eigen::Index off = 0;
      for (auto& p : ps) {
        Eigen::Index c = t.node(p.id).value.cols();
        if (t.node(p.id).needs_grad) t.grad_of(p) += n.grad.middleCols(off, c);
        off += c;
      }
    });
  }

  // Vertical stack of `times` copies of a.
  Var<T> replicate_rows(Var<T> a, int times) {
    Mat<T> v(a.rows() * times, a.cols());
    for (int k = 0; k < times; ++k) v.middleRows(k * a.rows(), a.rows()) = a.val();
    return make_node(std::move(v), {a}, [a, times](Tape& t, Node& n) {
      Eigen::Index r = t.node(a.id).value.rows();
      Mat<T>& g = t.grad_of(a);
      for (int k = 0; k < times; ++k) g += n.grad.middleRows(k * r, r);
    });
  }

  // (k*n, 1) column laid out as k stacked blocks -> (n, k) matrix whose
  // column j is block j. Used to fold stacked tangent rows into vectors.
  Var<T> stack_to_cols(Var<T> a, int k) {
    Eigen::Index n = a.rows() / k;
    Mat<T> v(n, k);
    for (int j = 0; j < k; ++j) v.col(j) = a.val().col(0).segment(j * n, n);
    return make_node(std::move(v), {a}, [a, k](Tape& t, Node& nd) {
      Eigen::Index n = nd.value.rows();
      Mat<T>& g = t.grad_of(a);
      for (int j = 0; j < k; ++j) g.col(0).segment(j * n, n) += nd.grad.col(j);
    });
  }

  // (R*group, c) reduced to (R, c) by summing each consecutive group of rows.
  Var<T> seg_sum(Var<T> a, int group) {
    assert(a.rows() % group == 0);
    Eigen::Index R = a.rows() / group;
    Mat<T> v = Mat<T>::Zero(R, a.cols());
    for (Eigen::Index r = 0; r < R; ++r)
      v.row(r) = a.val().middleRows(r * group, group).colwise().sum();
    return make_node(std::move(v), {a}, [a, group](Tape& t, Node& n) {
      Mat<T>& g = t.grad_of(a);
      for (Eigen::Index r = 0; r < n.grad.rows(); ++r)
        g.middleRows(r * group, group).rowwise() += n.grad.row(r);
    });
  }

  // Per-segment row slice: from each consecutive group of `group` rows,
  // take rows [start, start+len). (R*group, c) -> (R*len, c).
  Var<T> seg_slice(Var<T> a, int group, int start, int len) {
    assert(a.rows() % group == 0 && start + len <= group);
    Eigen::Index R = a.rows() / group;
    Mat<T> v(R * len, a.cols());
    for (Eigen::Index r = 0; r < R; ++r)
      v.middleRows(r * len, len) = a.val().middleRows(r * group + start, len);
    return make_node(std::move(v), {a}, [a, group, start, len](Tape& t, Node& n) {
      Eigen::Index R = n.value.rows() / len;
      Mat<T>& g = t.grad_of(a);
      for (Eigen::Index r = 0; r < R; ++r)
        g.middleRows(r * group + start, len) += n.grad.middleRows(r * len, len);
    });
  }

  Var<T> slice_rows(Var<T> a, int start, int len) {
    Mat<T> v = a.val().middleRows(start, len);
    return make_node(std::move(v), {a}, [a, start, len](Tape& t, Node& n) {
      t.grad_of(a).middleRows(start, len) += n.grad;
    });
  }

 private:
  friend struct Var<T>;

  Var<T> push(Mat<T> v, bool needs_grad, ParamTensor<T>* param,
              std::function<void(Tape&, Node&)> backprop) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad || param != nullptr;
    n.param = param;
    n.backprop = std::move(backprop);
    if (param != nullptr) n.value = param->value;
    nodes_.push_back(std::move(n));
    return Var<T>{this, int(nodes_.size()) - 1};
  }

  static void same_shape(const Var<T>& a, const Var<T>& b) {
    assert(a.rows() == b.rows() && a.cols() == b.cols());
    (void)a;
    (void)b;
  }

  std::vector<Node> nodes_;
};

template <class T>
const Mat<T>& Var<T>::val() const {
  return tape->node(id).value;
}

}  // namespace jneus
