// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Minimal reverse-mode differentiation over float64 matrices. A Tape records nodes in
// evaluation order; backward() replays their pullbacks in reverse.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "partsmith/error.hpp"
#include "partsmith/matrix.hpp"

namespace partsmith::ad {

/// A named parameter tensor. Gradients accumulate into `grad` when `trainable`.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Matrix v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.rows, value.cols), trainable(train) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  using Pullback = std::function<void(Tape&, std::size_t self)>;

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  Matrix& grad(Var v) { return nodes_[v.id].grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  Var constant(Matrix m) { return push(std::move(m), false, {}); }

  /// Leaf bound to a parameter; frozen parameters behave as constants.
  Var param(Param& p) {
    if (!p.trainable) return push(p.value, false, {});
    Var v = push(p.value, true, {});
    nodes_[v.id].param = &p;
    return v;
  }

  /// Registers a custom node; `inputs` decide whether it needs a gradient.
  Var custom(Matrix value, std::initializer_list<Var> inputs, Pullback back) {
    bool ng = false;
    for (Var in : inputs) ng = ng || needs_grad(in);
    return push(std::move(value), ng, ng ? std::move(back) : Pullback{});
  }
  Var custom(Matrix value, const std::vector<Var>& inputs, Pullback back) {
    bool ng = false;
    for (Var in : inputs) ng = ng || needs_grad(in);
    return push(std::move(value), ng, ng ? std::move(back) : Pullback{});
  }

  /// Seeds d(out)/d(out) with `seed` and propagates; parameter leaves accumulate into Param::grad.
  void backward(Var out, double seed = 1.0) {
    require(value(out).size() == 1, ErrorKind::validation, "backward needs a scalar output");
    for (auto& n : nodes_)
      if (n.needs_grad) n.grad = Matrix(n.value.rows, n.value.cols);
    nodes_[out.id].grad.data[0] = seed;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad) continue;
      if (n.back) n.back(*this, i);
      if (n.param != nullptr) {
        auto& g = n.param->grad.data;
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad.data[k];
      }
    }
  }

  // Accumulates into an input's gradient when that input needs one.
  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    for (std::size_t k = 0; k < g.data.size(); ++k) n.grad.data[k] += g.data[k];
  }

  const Matrix& grad_of(std::size_t node) const { return nodes_[node].grad; }

  // ---- ops --------------------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    require(A.cols == B.rows, ErrorKind::validation, "matmul shape mismatch");
    return custom(partsmith::matmul(A, B), {a, b}, [a, b](Tape& t, std::size_t self) {
      const Matrix& G = t.grad_of(self);
      const Matrix& A = t.value(a);
      const Matrix& B = t.value(b);
      if (t.needs_grad(a)) {  // dA = G B^T
        Matrix& dA = t.grad(a);
        for (std::size_t i = 0; i < A.rows; ++i)
          for (std::size_t j = 0; j < B.cols; ++j) {
            const double g = G(i, j);
            if (g == 0.0) continue;
            for (std::size_t k = 0; k < A.cols; ++k) dA(i, k) += g * B(k, j);
          }
      }
      if (t.needs_grad(b)) {  // dB = A^T G
        Matrix& dB = t.grad(b);
        for (std::size_t i = 0; i < A.rows; ++i)
          for (std::size_t k = 0; k < A.cols; ++k) {
            const double a_ik = A(i, k);
            if (a_ik == 0.0) continue;
            for (std::size_t j = 0; j < B.cols; ++j) dB(k, j) += a_ik * G(i, j);
          }
      }
    });
  }

  /// a * b^T
  Var matmul_bt(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    require(A.cols == B.cols, ErrorKind::validation, "matmul_bt shape mismatch");
    Matrix out(A.rows, B.rows);
    for (std::size_t i = 0; i < A.rows; ++i)
      for (std::size_t j = 0; j < B.rows; ++j) out(i, j) = dot(A.row(i), B.row(j));
    return custom(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
      const Matrix& G = t.grad_of(self);
      const Matrix& A = t.value(a);
      const Matrix& B = t.value(b);
      if (t.needs_grad(a)) {  // dA = G B
        Matrix& dA = t.grad(a);
        for (std::size_t i = 0; i < A.rows; ++i)
          for (std::size_t j = 0; j < B.rows; ++j) {
            const double g = G(i, j);
            for (std::size_t k = 0; k < A.cols; ++k) dA(i, k) += g * B(j, k);
          }
      }
      if (t.needs_grad(b)) {  // dB = G^T A
        Matrix& dB = t.grad(b);
        for (std::size_t i = 0; i < A.rows; ++i)
          for (std::size_t j = 0; j < B.rows; ++j) {
            const double g = G(i, j);
            for (std::size_t k = 0; k < A.cols; ++k) dB(j, k) += g * A(i, k);
          }
      }
    });
  }

  Var add(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    require(A.same_shape(B), ErrorKind::validation, "add shape mismatch");
    Matrix out = A;
    for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] += B.data[k];
    return custom(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
      const Matrix G = t.grad_of(self);
      t.accumulate(a, G);
      t.accumulate(b, G);
    });
  }

  /// Adds a 1 x cols row vector to every row of `a`.
  Var add_row(Var a, Var row) {
    const Matrix& A = value(a);
    const Matrix& R = value(row);
    require(R.rows == 1 && R.cols == A.cols, ErrorKind::validation, "add_row shape mismatch");
    Matrix out = A;
    for (std::size_t i = 0; i < out.rows; ++i)
      for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += R.data[j];
    return custom(std::move(out), {a, row}, [a, row](Tape& t, std::size_t self) {
      const Matrix G = t.grad_of(self);
      t.accumulate(a, G);
      if (t.needs_grad(row)) {
        Matrix& dR = t.grad(row);
        for (std::size_t i = 0; i < G.rows; ++i)
          for (std::size_t j = 0; j < G.cols; ++j) dR.data[j] += G(i, j);
      }
    });
  }

  Var scale(Var a, double s) {
    Matrix out = value(a);
    for (double& v : out.data) v *= s;
    return custom(std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
      Matrix G = t.grad_of(self);
      for (double& v : G.data) v *= s;
      t.accumulate(a, G);
    });
  }

  Var relu(Var a) {
    Matrix out = value(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return custom(std::move(out), {a}, [a](Tape& t, std::size_t self) {
      Matrix G = t.grad_of(self);
      const Matrix& A = t.value(a);
      for (std::size_t k = 0; k < G.data.size(); ++k)
        if (!(A.data[k] > 0.0)) G.data[k] = 0.0;
      t.accumulate(a, G);
    });
  }

  Var softmax_rows(Var a) {
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.rows; ++i) {
      auto r = out.row(i);
      double mx = r[0];
      for (double v : r) mx = std::max(mx, v);
      double s = 0.0;
      for (double& v : r) {
        v = std::exp(v - mx);
        s += v;
      }
      for (double& v : r) v /= s;
    }
    return custom(std::move(out), {a}, [a](Tape& t, std::size_t self) {
      const Matrix& G = t.grad_of(self);
      const Matrix& Y = t.value(Var{self});
      Matrix dA(Y.rows, Y.cols);
      for (std::size_t i = 0; i < Y.rows; ++i) {
        const double s = dot(G.row(i), Y.row(i));
        for (std::size_t j = 0; j < Y.cols; ++j) dA(i, j) = Y(i, j) * (G(i, j) - s);
      }
      t.accumulate(a, dA);
    });
  }

  /// Each row divided by its root mean square (plus `eps` under the root).
  Var rms_norm_rows(Var a, double eps = 1e-6) {
    const Matrix& A = value(a);
    Matrix out = A;
    std::vector<double> inv(A.rows);
    for (std::size_t i = 0; i < A.rows; ++i) {
      const double ms = dot(A.row(i), A.row(i)) / static_cast<double>(A.cols);
      inv[i] = 1.0 / std::sqrt(ms + eps);
      for (double& v : out.row(i)) v *= inv[i];
    }
    return custom(std::move(out), {a}, [a, inv](Tape& t, std::size_t self) {
      const Matrix& G = t.grad_of(self);
      const Matrix& Y = t.value(Var{self});
      Matrix dA(Y.rows, Y.cols);
      const double n = static_cast<double>(Y.cols);
      for (std::size_t i = 0; i < Y.rows; ++i) {
        const double gy = dot(G.row(i), Y.row(i)) / n;
        for (std::size_t j = 0; j < Y.cols; ++j) dA(i, j) = inv[i] * (G(i, j) - Y(i, j) * gy);
      }
      t.accumulate(a, dA);
    });
  }

  /// Rows of `a` selected by index (duplicates allowed).
  Var gather_rows(Var a, std::vector<std::size_t> idx) {
    const Matrix& A = value(a);
    Matrix out(idx.size(), A.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] < A.rows, ErrorKind::validation, "gather_rows index out of range");
      std::copy(A.row(idx[i]).begin(), A.row(idx[i]).end(), out.row(i).begin());
    }
    return custom(std::move(out), {a}, [a, idx](Tape& t, std::size_t self) {
      const Matrix& G = t.grad_of(self);
      Matrix& dA = t.grad(a);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < G.cols; ++j) dA(idx[i], j) += G(i, j);
    });
  }

  /// Vertical concatenation.
  Var concat_rows(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    require(A.cols == B.cols, ErrorKind::validation, "concat_rows width mismatch");
    Matrix out(A.rows + B.rows, A.cols);
    std::copy(A.data.begin(), A.data.end(), out.data.begin());
    std::copy(B.data.begin(), B.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(A.size()));
    const std::size_t split = A.size();
    return custom(std::move(out), {a, b}, [a, b, split](Tape& t, std::size_t self) {
      const Matrix& G = t.grad_of(self);
      const Matrix& A = t.value(a);
      const Matrix& B = t.value(b);
      if (t.needs_grad(a)) t.accumulate(a, Matrix(A.rows, A.cols, {G.data.begin(), G.data.begin() + static_cast<std::ptrdiff_t>(split)}));
      if (t.needs_grad(b)) t.accumulate(b, Matrix(B.rows, B.cols, {G.data.begin() + static_cast<std::ptrdiff_t>(split), G.data.end()}));
    });
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Pullback back;
    Param* param = nullptr;
  };

  Var push(Matrix value, bool needs_grad, Pullback back) {
    nodes_.push_back({std::move(value), Matrix(), needs_grad, std::move(back), nullptr});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace partsmith::ad
