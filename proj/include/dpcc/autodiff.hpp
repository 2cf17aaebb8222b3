#pragma once

#include <functional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dpcc/common.hpp"

namespace dpcc::ad {

// Dense products with a fixed per-element accumulation order (ascending over
// the inner dimension, one fused multiply-add per step). The order does not
// depend on the number of rows, so row r of a batched product is bitwise
// identical to the same row computed on its own.
inline Eigen::MatrixXd matmul(const Eigen::MatrixXd& X, const Eigen::MatrixXd& W) {
  require(X.cols() == W.rows(), ErrorKind::contract, "matmul: inner dimensions differ");
  Eigen::MatrixXd Y(X.rows(), W.cols());
  Eigen::VectorXd acc(X.rows());
  for (Eigen::Index j = 0; j < W.cols(); ++j) {
    acc.setZero();
    for (Eigen::Index k = 0; k < X.cols(); ++k) acc += X.col(k) * W(k, j);
    Y.col(j) = acc;
  }
  return Y;
}

// G * W^T without forming the transpose.
inline Eigen::MatrixXd matmul_bt(const Eigen::MatrixXd& G, const Eigen::MatrixXd& W) {
  require(G.cols() == W.cols(), ErrorKind::contract, "matmul_bt: inner dimensions differ");
  Eigen::MatrixXd R(G.rows(), W.rows());
  Eigen::VectorXd acc(G.rows());
  for (Eigen::Index c = 0; c < W.rows(); ++c) {
    acc.setZero();
    for (Eigen::Index j = 0; j < W.cols(); ++j) acc += G.col(j) * W(c, j);
    R.col(c) = acc;
  }
  return R;
}

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended during the forward pass; backward()
// walks them once in reverse creation order, which fixes the gradient
// accumulation order and keeps runs bit-reproducible.
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Eigen::MatrixXd v) { return push(std::move(v), false, {}); }

  Var param(Eigen::MatrixXd v) { return push(std::move(v), true, {}); }

  const Eigen::MatrixXd& value(Var v) const { return node(v).value; }

  const Eigen::MatrixXd& grad(Var v) const {
    const Node& n = node(v);
    require(n.requires_grad, ErrorKind::contract, "grad: node does not require gradients");
    return n.grad;
  }

  // y = x*W + b (b broadcast over rows)
  Var linear(Var x, Var W, Var b) {
    const auto& xv = value(x);
    const auto& wv = value(W);
    const auto& bv = value(b);
    require(bv.rows() == 1 && bv.cols() == wv.cols(), ErrorKind::contract, "linear: bias shape");
    Eigen::MatrixXd y = matmul(xv, wv);
    y.rowwise() += bv.row(0);
    const bool ng = needs_grad({x, W, b});
    Var out = push(std::move(y), ng, [this, x, W, b](const Eigen::MatrixXd& gy) {
      if (node(x).requires_grad) node(x).grad += matmul_bt(gy, value(W));
      if (node(W).requires_grad) node(W).grad += value(x).transpose() * gy;
      if (node(b).requires_grad) node(b).grad += gy.colwise().sum();
    });
    return out;
  }

  Var leaky_relu(Var x, double slope) {
    const auto& xv = value(x);
    Eigen::MatrixXd y = xv.unaryExpr([slope](double v) { return v > 0 ? v : slope * v; });
    return push(std::move(y), needs_grad({x}), [this, x, slope](const Eigen::MatrixXd& gy) {
      if (!node(x).requires_grad) return;
      const auto& xv = value(x);
      node(x).grad += gy.cwiseProduct(xv.unaryExpr([slope](double v) { return v > 0 ? 1.0 : slope; }));
    });
  }

  // column-wise max over rows; ties route the gradient to the lowest row index
  Var max_rows(Var x) {
    const auto& xv = value(x);
    require(xv.rows() >= 1, ErrorKind::contract, "max_rows: empty input");
    Eigen::MatrixXd y(1, xv.cols());
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(xv.cols()), 0);
    for (Eigen::Index j = 0; j < xv.cols(); ++j) {
      Eigen::Index best = 0;
      for (Eigen::Index i = 1; i < xv.rows(); ++i)
        if (xv(i, j) > xv(best, j)) best = i;
      arg[static_cast<std::size_t>(j)] = best;
      y(0, j) = xv(best, j);
    }
    return push(std::move(y), needs_grad({x}), [this, x, arg](const Eigen::MatrixXd& gy) {
      if (!node(x).requires_grad) return;
      auto& gx = node(x).grad;
      for (Eigen::Index j = 0; j < gy.cols(); ++j) gx(arg[static_cast<std::size_t>(j)], j) += gy(0, j);
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), ErrorKind::contract, "concat_cols: no inputs");
    const Eigen::Index rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    for (Var p : parts) {
      require(value(p).rows() == rows, ErrorKind::contract, "concat_cols: row mismatch");
      cols += value(p).cols();
    }
    Eigen::MatrixXd y(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
      y.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
    }
    return push(std::move(y), needs_grad(parts), [this, parts](const Eigen::MatrixXd& gy) {
      Eigen::Index at = 0;
      for (Var p : parts) {
        const Eigen::Index w = value(p).cols();
        if (node(p).requires_grad) node(p).grad += gy.middleCols(at, w);
        at += w;
      }
    });
  }

  // replicate a 1 x c row n times
  Var repeat_rows(Var x, Eigen::Index n) {
    const auto& xv = value(x);
    require(xv.rows() == 1, ErrorKind::contract, "repeat_rows: input must be a row");
    Eigen::MatrixXd y = xv.replicate(n, 1);
    return push(std::move(y), needs_grad({x}), [this, x](const Eigen::MatrixXd& gy) {
      if (node(x).requires_grad) node(x).grad += gy.colwise().sum();
    });
  }

  // reshape a 1 x d row into C rows of d/C contiguous entries
  Var chunk_rows(Var z, Eigen::Index C) {
    const auto& zv = value(z);
    require(zv.rows() == 1, ErrorKind::contract, "chunk_rows: input must be a row");
    require(C >= 1 && zv.cols() % C == 0, ErrorKind::argument, "chunk_rows: C must divide d");
    const Eigen::Index w = zv.cols() / C;
    Eigen::MatrixXd y(C, w);
    for (Eigen::Index i = 0; i < C; ++i) y.row(i) = zv.middleCols(i * w, w);
    return push(std::move(y), needs_grad({z}), [this, z, C, w](const Eigen::MatrixXd& gy) {
      if (!node(z).requires_grad) return;
      auto& gz = node(z).grad;
      for (Eigen::Index i = 0; i < C; ++i) gz.middleCols(i * w, w) += gy.row(i);
    });
  }

  Var gather_rows(Var table, std::vector<int> rows) {
    const auto& tv = value(table);
    Eigen::MatrixXd y(static_cast<Eigen::Index>(rows.size()), tv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i] >= 0 && rows[i] < tv.rows(), ErrorKind::argument, "gather_rows: index out of range");
      y.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
    }
    return push(std::move(y), needs_grad({table}), [this, table, rows](const Eigen::MatrixXd& gy) {
      if (!node(table).requires_grad) return;
      auto& gt = node(table).grad;
      for (std::size_t i = 0; i < rows.size(); ++i) gt.row(rows[i]) += gy.row(static_cast<Eigen::Index>(i));
    });
  }

  // identity in value, zero derivative
  Var detach(Var x) { return push(value(x), false, {}); }

  // forward value is `forward`, backward passes the gradient to x unchanged
  Var straight_through(Var x, Eigen::MatrixXd forward) {
    require(forward.rows() == value(x).rows() && forward.cols() == value(x).cols(), ErrorKind::argument,
            "straight_through: shape mismatch");
    return push(std::move(forward), needs_grad({x}), [this, x](const Eigen::MatrixXd& gy) {
      if (node(x).requires_grad) node(x).grad += gy;
    });
  }

  Var add(Var a, Var b) {
    require(same_shape(a, b), ErrorKind::contract, "add: shape mismatch");
    return push(value(a) + value(b), needs_grad({a, b}), [this, a, b](const Eigen::MatrixXd& gy) {
      if (node(a).requires_grad) node(a).grad += gy;
      if (node(b).requires_grad) node(b).grad += gy;
    });
  }

  Var sub(Var a, Var b) {
    require(same_shape(a, b), ErrorKind::contract, "sub: shape mismatch");
    return push(value(a) - value(b), needs_grad({a, b}), [this, a, b](const Eigen::MatrixXd& gy) {
      if (node(a).requires_grad) node(a).grad += gy;
      if (node(b).requires_grad) node(b).grad -= gy;
    });
  }

  Var scale(Var x, double s) {
    return push(value(x) * s, needs_grad({x}), [this, x, s](const Eigen::MatrixXd& gy) {
      if (node(x).requires_grad) node(x).grad += s * gy;
    });
  }

  Var sum_all(Var x) {
    Eigen::MatrixXd y(1, 1);
    y(0, 0) = value(x).sum();
    return push(std::move(y), needs_grad({x}), [this, x](const Eigen::MatrixXd& gy) {
      if (node(x).requires_grad) node(x).grad.array() += gy(0, 0);
    });
  }

  Var sum_squares(Var x) {
    Eigen::MatrixXd y(1, 1);
    y(0, 0) = value(x).squaredNorm();
    return push(std::move(y), needs_grad({x}), [this, x](const Eigen::MatrixXd& gy) {
      if (node(x).requires_grad) node(x).grad += 2.0 * gy(0, 0) * value(x);
    });
  }

  // reverse sweep from a scalar loss; call at most once per tape
  void backward(Var loss) {
    Node& ln = node(loss);
    require(ln.value.rows() == 1 && ln.value.cols() == 1, ErrorKind::contract, "backward: loss must be scalar");
    require(!swept_, ErrorKind::contract, "backward: tape already swept");
    swept_ = true;
    if (!ln.requires_grad) return;
    ln.grad(0, 0) = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.requires_grad && n.backprop) n.backprop(n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    bool requires_grad = false;
    std::function<void(const Eigen::MatrixXd&)> backprop;
  };

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }

  bool same_shape(Var a, Var b) const {
    return value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols();
  }

  bool needs_grad(const std::vector<Var>& parents) const {
    for (Var p : parents)
      if (node(p).requires_grad) return true;
    return false;
  }

  Var push(Eigen::MatrixXd value, bool requires_grad, std::function<void(const Eigen::MatrixXd&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    if (requires_grad) n.grad = Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  bool swept_ = false;
};

}  // namespace dpcc::ad
