#pragma once

// Matrix-level reverse-mode differentiation. Every node holds an Eigen matrix;
// the tape is replayed backwards from a 1x1 loss node.

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "torusbfn/error.hpp"

namespace torusbfn::ad {

using Matrix = Eigen::MatrixXd;

struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var variable(Matrix value) { return push(std::move(value), true, {}); }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() loss with respect to v (zeros if v did not
  /// influence it).
  Matrix grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss) {
    Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) throw ShapeError("backward: loss must be a 1x1 node");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    root.grad = Matrix::Ones(1, 1);
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (n.back && n.grad.size() != 0) n.back(n.grad);
    }
  }

  // ---- primitives -------------------------------------------------------

  Var matmul(Var a, Var b) {
    check(value(a).cols() == value(b).rows(), "matmul");
    return unary_or_binary(value(a) * value(b), {a, b}, [this, a, b](const Matrix& g) {
      accumulate(a, [&] { return Matrix(g * value(b).transpose()); });
      accumulate(b, [&] { return Matrix(value(a).transpose() * g); });
    });
  }

  /// a (r x c) plus a row vector (1 x c) broadcast over rows.
  Var add_row(Var a, Var row) {
    check(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row");
    Matrix out = value(a).rowwise() + value(row).row(0);
    return unary_or_binary(std::move(out), {a, row}, [this, a, row](const Matrix& g) {
      accumulate(a, [&] { return g; });
      accumulate(row, [&] { return Matrix(g.colwise().sum()); });
    });
  }

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    return unary_or_binary(value(a) + value(b), {a, b}, [this, a, b](const Matrix& g) {
      accumulate(a, [&] { return g; });
      accumulate(b, [&] { return g; });
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    return unary_or_binary(value(a) - value(b), {a, b}, [this, a, b](const Matrix& g) {
      accumulate(a, [&] { return g; });
      accumulate(b, [&] { return Matrix(-g); });
    });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    return unary_or_binary(value(a).cwiseProduct(value(b)), {a, b}, [this, a, b](const Matrix& g) {
      accumulate(a, [&] { return Matrix(g.cwiseProduct(value(b))); });
      accumulate(b, [&] { return Matrix(g.cwiseProduct(value(a))); });
    });
  }

  Var scale(Var a, double s) {
    return unary_or_binary(value(a) * s, {a}, [this, a, s](const Matrix& g) {
      accumulate(a, [&] { return Matrix(g * s); });
    });
  }

  Var silu(Var a) {
    const Matrix& x = value(a);
    Matrix out = x.unaryExpr([](double z) { return z / (1.0 + std::exp(-z)); });
    return unary_or_binary(std::move(out), {a}, [this, a](const Matrix& g) {
      accumulate(a, [&] {
        const Matrix d = value(a).unaryExpr([](double z) {
          const double s = 1.0 / (1.0 + std::exp(-z));
          return s * (1.0 + z * (1.0 - s));
        });
        return Matrix(g.cwiseProduct(d));
      });
    });
  }

  Var cos(Var a) {
    Matrix out = value(a).array().cos().matrix();
    return unary_or_binary(std::move(out), {a}, [this, a](const Matrix& g) {
      accumulate(a, [&] { return Matrix(-g.cwiseProduct(value(a).array().sin().matrix())); });
    });
  }

  /// Elementwise atan2(u, v); the gradient at u = v = 0 is taken as zero.
  Var atan2(Var u, Var v) {
    same_shape(u, v, "atan2");
    const Matrix& uu = value(u);
    const Matrix& vv = value(v);
    Matrix out(uu.rows(), uu.cols());
    for (Eigen::Index k = 0; k < uu.size(); ++k) {
      out(k) = (uu(k) == 0.0 && vv(k) == 0.0) ? 0.0 : std::atan2(uu(k), vv(k));
    }
    return unary_or_binary(std::move(out), {u, v}, [this, u, v](const Matrix& g) {
      const Matrix& a = value(u);
      const Matrix& b = value(v);
      Matrix du(a.rows(), a.cols()), dv(a.rows(), a.cols());
      for (Eigen::Index k = 0; k < a.size(); ++k) {
        const double r2 = a(k) * a(k) + b(k) * b(k);
        du(k) = r2 > 0.0 ? g(k) * b(k) / r2 : 0.0;
        dv(k) = r2 > 0.0 ? -g(k) * a(k) / r2 : 0.0;
      }
      accumulate(u, [&] { return du; });
      accumulate(v, [&] { return dv; });
    });
  }

  Var cols(Var a, Eigen::Index start, Eigen::Index count) {
    check(start >= 0 && count >= 0 && start + count <= value(a).cols(), "cols");
    Matrix out = value(a).middleCols(start, count);
    return unary_or_binary(std::move(out), {a}, [this, a, start, count](const Matrix& g) {
      accumulate(a, [&] {
        Matrix full = Matrix::Zero(value(a).rows(), value(a).cols());
        full.middleCols(start, count) = g;
        return full;
      });
    });
  }

  /// Log-softmax over consecutive column groups of width k.
  Var log_softmax_groups(Var a, Eigen::Index k) {
    const Matrix& x = value(a);
    check(k > 0 && x.cols() % k == 0, "log_softmax_groups");
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index s = 0; s < x.cols(); s += k) {
        const double lse = logsumexp(x.row(r).segment(s, k));
        out.row(r).segment(s, k) = x.row(r).segment(s, k).array() - lse;
      }
    }
    Var res = unary_or_binary(std::move(out), {a}, {});
    nodes_[res.id].back = [this, a, res, k](const Matrix& g) {
      accumulate(a, [&] {
        const Matrix& ls = value(res);
        Matrix d(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          for (Eigen::Index s = 0; s < g.cols(); s += k) {
            const double gs = g.row(r).segment(s, k).sum();
            for (Eigen::Index j = s; j < s + k; ++j) d(r, j) = g(r, j) - std::exp(ls(r, j)) * gs;
          }
        }
        return d;
      });
    };
    return res;
  }

  /// Log-sum-exp over consecutive column groups of width k: (r x c) -> (r x c/k).
  /// Groups whose entries are all -inf give -inf with zero gradient.
  Var logsumexp_groups(Var a, Eigen::Index k) {
    const Matrix& x = value(a);
    check(k > 0 && x.cols() % k == 0, "logsumexp_groups");
    Matrix out(x.rows(), x.cols() / k);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index s = 0; s < x.cols(); s += k) out(r, s / k) = logsumexp(x.row(r).segment(s, k));
    }
    Var res = unary_or_binary(std::move(out), {a}, {});
    nodes_[res.id].back = [this, a, res, k](const Matrix& g) {
      accumulate(a, [&] {
        const Matrix& x2 = value(a);
        const Matrix& l = value(res);
        Matrix d = Matrix::Zero(x2.rows(), x2.cols());
        for (Eigen::Index r = 0; r < x2.rows(); ++r) {
          for (Eigen::Index s = 0; s < x2.cols(); s += k) {
            const double lse = l(r, s / k);
            if (!std::isfinite(lse)) continue;
            for (Eigen::Index j = s; j < s + k; ++j) d(r, j) = g(r, s / k) * std::exp(x2(r, j) - lse);
          }
        }
        return d;
      });
    };
    return res;
  }

  Var sum(Var a) {
    Matrix out(1, 1);
    out(0, 0) = value(a).sum();
    return unary_or_binary(std::move(out), {a}, [this, a](const Matrix& g) {
      accumulate(a, [&] { return Matrix(Matrix::Constant(value(a).rows(), value(a).cols(), g(0, 0))); });
    });
  }

  /// sum(w .* a) for a constant weight matrix w.
  Var weighted_sum(Var a, const Matrix& w) {
    check(w.rows() == value(a).rows() && w.cols() == value(a).cols(), "weighted_sum");
    Matrix out(1, 1);
    out(0, 0) = value(a).cwiseProduct(w).sum();
    return unary_or_binary(std::move(out), {a}, [this, a, w](const Matrix& g) {
      accumulate(a, [&] { return Matrix(w * g(0, 0)); });
    });
  }

  static double logsumexp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
    const double hi = v.maxCoeff();
    if (!std::isfinite(hi)) return hi;
    return hi + std::log((v.array() - hi).exp().sum());
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void(const Matrix&)> back;
  };

  Var push(Matrix value, bool needs_grad, std::function<void(const Matrix&)> back) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs_grad, std::move(back)});
    return Var{nodes_.size() - 1};
  }

  Var unary_or_binary(Matrix value, std::initializer_list<Var> parents, std::function<void(const Matrix&)> back) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_.at(p.id).needs_grad;
    return push(std::move(value), needs, needs ? std::move(back) : std::function<void(const Matrix&)>{});
  }

  template <class Fn>
  void accumulate(Var target, Fn&& make) {
    Node& n = nodes_[target.id];
    if (!n.needs_grad) return;
    Matrix g = make();
    if (n.grad.size() == 0) {
      n.grad = std::move(g);
    } else {
      n.grad += g;
    }
  }

  static void check(bool ok, const char* op) {
    if (!ok) throw ShapeError(std::string("autodiff: bad operand shapes for ") + op);
  }
  void same_shape(Var a, Var b, const char* op) const {
    check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), op);
  }

  std::vector<Node> nodes_;
};

}  // namespace torusbfn::ad
