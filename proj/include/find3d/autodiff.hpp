#pragma once

// Minimal reverse-mode automatic differentiation over row-major matrices.
//
// A Tape records nodes in creation order; every op appends one node holding
// its value and a closure that pushes the node's gradient into its inputs.
// Backward walks the tape in reverse, which is a valid topological order.
// Ops are coarse (linear layer, layer norm, block attention, ...) with
// hand-written adjoints, so a forward pass over a point cloud costs a few
// dozen nodes rather than one node per scalar.

#include "find3d/cloud.hpp"
#include "find3d/sfc.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace find3d::ad {

struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;
  using Backward = std::function<void(Tape&, const Mat& grad_out)>;

  Var leaf(Mat value, bool requires_grad = false) { return push(std::move(value), requires_grad, {}); }
  Var constant(Mat value) { return leaf(std::move(value), false); }

  Var push(Mat value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return v.valid() && nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() target w.r.t. v; zeros if v was unreached.
  Mat grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Accumulates into v's gradient buffer; no-op for constants.
  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Mutable gradient buffer for scatter-style accumulation.
  Mat& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Seeds d(target)/d(target) = 1 for a 1x1 target and runs the adjoints.
  void backward(Var target) {
    const Node& t = nodes_.at(target.id);
    if (t.value.rows() != 1 || t.value.cols() != 1) throw std::invalid_argument("backward target must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[target.id].grad = Mat::Ones(1, 1);
    for (std::size_t i = target.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
      // The closure may grow other nodes' grads but never this one's.
      const Mat g = std::move(n.grad);
      n.backward(*this, g);
      n.grad = g;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

/// Row-sparse linear map: out.row(r) = sum_k weight[k] * in.row(col[k]) for
/// k in [offset[r], offset[r+1]). Covers gathers, group means and neighbor
/// averages.
struct SparseRows {
  std::size_t cols = 0;  // row count of the input it applies to
  std::vector<std::uint32_t> offset{0};
  std::vector<std::uint32_t> col;
  std::vector<double> weight;

  std::size_t rows() const { return offset.size() - 1; }
  void add_row(std::span<const std::uint32_t> cols_in_row, std::span<const double> weights);
  void add_mean_row(std::span<const std::uint32_t> cols_in_row);
  static SparseRows gather(std::span<const std::uint32_t> index, std::size_t input_rows);
};

// ---------------------------------------------------------------------------
// Ops

namespace detail {

template <typename T>
void require_rows(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

}  // namespace detail

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  detail::require_rows(tape.value(a), tape.value(b), "add");
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(tape.value(a) + tape.value(b), rg, [a, b](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  return tape.push(tape.value(a) * factor, tape.requires_grad(a),
                   [a, factor](Tape<T>& t, const Matrix<T>& g) { t.accumulate(a, g * factor); });
}

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.cols() != bv.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix<T> out = av * bv;
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(std::move(out), rg, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

/// x * W + b, with W stored (in x out) and b a 1 x out row (optional).
template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, Var b = {}) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(w);
  if (xv.cols() != wv.rows()) {
    throw std::invalid_argument("linear: input width " + std::to_string(xv.cols()) + " vs weight rows " +
                                std::to_string(wv.rows()));
  }
  Matrix<T> out(xv.rows(), wv.cols());
  out.noalias() = xv * wv;
  if (b.valid()) {
    const auto& bv = tape.value(b);
    if (bv.rows() != 1 || bv.cols() != wv.cols()) throw std::invalid_argument("linear: bias shape");
    out.rowwise() += bv.row(0);
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(w) || tape.requires_grad(b);
  return tape.push(std::move(out), rg, [x, w, b](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(x)) {
      Matrix<T> gx(g.rows(), t.value(w).rows());
      gx.noalias() = g * t.value(w).transpose();
      t.accumulate(x, gx);
    }
    if (t.requires_grad(w)) {
      Matrix<T> gw(t.value(w).rows(), t.value(w).cols());
      gw.noalias() = t.value(x).transpose() * g;
      t.accumulate(w, gw);
    }
    if (t.requires_grad(b)) t.accumulate(b, g.colwise().sum());
  });
}

/// Exact GELU: x * Phi(x).
template <typename T>
Var gelu(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  Matrix<T> out = xv.unaryExpr([inv_sqrt2](T v) { return v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2)); });
  return tape.push(std::move(out), tape.requires_grad(x), [x, inv_sqrt2](Tape<T>& t, const Matrix<T>& g) {
    const T inv_sqrt_2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
    Matrix<T> d = t.value(x).unaryExpr([&](T v) {
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      return cdf + v * pdf;
    });
    t.accumulate(x, g.cwiseProduct(d));
  });
}

/// Per-row layer normalization with affine gamma/beta (1 x cols each).
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const auto& xv = tape.value(x);
  const Eigen::Index n = xv.rows(), c = xv.cols();
  auto xhat = std::make_shared<Matrix<T>>(n, c);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    xhat->row(r) = (xv.row(r).array() - mean) * is;
  }
  Matrix<T> out = xhat->array().rowwise() * tape.value(gamma).row(0).array();
  out.rowwise() += tape.value(beta).row(0);
  const bool rg = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
  return tape.push(std::move(out), rg, [x, gamma, beta, xhat, inv_std](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(gamma)) t.accumulate(gamma, g.cwiseProduct(*xhat).colwise().sum());
    if (t.requires_grad(beta)) t.accumulate(beta, g.colwise().sum());
    if (!t.requires_grad(x)) return;
    const Matrix<T> gh = g.array().rowwise() * t.value(gamma).row(0).array();
    const T inv_c = T(1) / static_cast<T>(g.cols());
    Matrix<T> gx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const T m1 = gh.row(r).sum() * inv_c;
      const T m2 = gh.row(r).dot(xhat->row(r)) * inv_c;
      gx.row(r) = (gh.row(r).array() - m1 - xhat->row(r).array() * m2) * (*inv_std)[static_cast<std::size_t>(r)];
    }
    t.accumulate(x, gx);
  });
}

template <typename T>
Var sparse_mix(Tape<T>& tape, Var x, std::shared_ptr<const SparseRows> map) {
  const auto& xv = tape.value(x);
  if (map->cols != static_cast<std::size_t>(xv.rows())) {
    throw std::invalid_argument("sparse_mix: map expects " + std::to_string(map->cols) + " input rows, got " +
                                std::to_string(xv.rows()));
  }
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(map->rows()), xv.cols());
  for (std::size_t r = 0; r < map->rows(); ++r) {
    for (std::uint32_t k = map->offset[r]; k < map->offset[r + 1]; ++k) {
      out.row(static_cast<Eigen::Index>(r)) += static_cast<T>(map->weight[k]) * xv.row(map->col[k]);
    }
  }
  return tape.push(std::move(out), tape.requires_grad(x), [x, map](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < map->rows(); ++r) {
      for (std::uint32_t k = map->offset[r]; k < map->offset[r + 1]; ++k) {
        gx.row(map->col[k]) += static_cast<T>(map->weight[k]) * g.row(static_cast<Eigen::Index>(r));
      }
    }
  });
}

/// out.row(i) = x.row(index[i])
template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::shared_ptr<const std::vector<std::uint32_t>> index) {
  const auto& xv = tape.value(x);
  Matrix<T> out(static_cast<Eigen::Index>(index->size()), xv.cols());
  for (std::size_t i = 0; i < index->size(); ++i) {
    if ((*index)[i] >= xv.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = xv.row((*index)[i]);
  }
  return tape.push(std::move(out), tape.requires_grad(x), [x, index](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < index->size(); ++i) gx.row((*index)[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <typename T>
Var concat_rows(Tape<T>& tape, std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to concatenate");
  const Eigen::Index cols = tape.value(parts[0]).cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (Var p : parts) {
    if (tape.value(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += tape.value(p).rows();
    rg = rg || tape.requires_grad(p);
  }
  Matrix<T> out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleRows(at, tape.value(p).rows()) = tape.value(p);
    at += tape.value(p).rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.push(std::move(out), rg, [inputs](Tape<T>& t, const Matrix<T>& g) {
    Eigen::Index at = 0;
    for (Var p : inputs) {
      const Eigen::Index n = t.value(p).rows();
      t.accumulate(p, g.middleRows(at, n));
      at += n;
    }
  });
}

/// Scales each row to unit L2 norm; rows with norm below eps are left as is
/// divided by eps.
template <typename T>
Var normalize_rows(Tape<T>& tape, Var x, T eps = T(1e-12)) {
  const auto& xv = tape.value(x);
  auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(xv.rows()));
  Matrix<T> out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T n = std::max(xv.row(r).norm(), eps);
    (*norms)[static_cast<std::size_t>(r)] = n;
    out.row(r) = xv.row(r) / n;
  }
  auto y = std::make_shared<Matrix<T>>(out);
  return tape.push(std::move(out), tape.requires_grad(x), [x, norms, y, eps](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> gx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const T n = (*norms)[static_cast<std::size_t>(r)];
      if (n <= eps) {
        gx.row(r) = g.row(r) / n;
      } else {
        gx.row(r) = (g.row(r) - y->row(r) * g.row(r).dot(y->row(r))) / n;
      }
    }
    t.accumulate(x, gx);
  });
}

template <typename T>
Var sum_squares(Tape<T>& tape, Var x) {
  Matrix<T> out(1, 1);
  out(0, 0) = tape.value(x).squaredNorm();
  return tape.push(std::move(out), tape.requires_grad(x),
                   [x](Tape<T>& t, const Matrix<T>& g) { t.accumulate(x, t.value(x) * (T(2) * g(0, 0))); });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  Matrix<T> out(1, 1);
  out(0, 0) = tape.value(x).sum();
  return tape.push(std::move(out), tape.requires_grad(x), [x](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(x, Matrix<T>::Constant(t.value(x).rows(), t.value(x).cols(), g(0, 0)));
  });
}

/// Multi-head scaled dot-product attention computed independently inside each
/// block of a serialization order. `qkv` is N x 3w in point-slot order with
/// column groups [Q | K | V]; the output is N x w in the same row order.
template <typename T>
Var block_attention(Tape<T>& tape, Var qkv, std::shared_ptr<const sfc::SerialOrder> order, int heads) {
  const auto& in = tape.value(qkv);
  if (in.cols() % 3 != 0) throw std::invalid_argument("block_attention: qkv width must be a multiple of 3");
  const Eigen::Index width = in.cols() / 3;
  if (heads <= 0 || width % heads != 0) {
    throw std::invalid_argument("block_attention: width " + std::to_string(width) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (order->size() != static_cast<std::size_t>(in.rows())) throw std::invalid_argument("block_attention: order size");
  const Eigen::Index dh = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  // Softmax probabilities per (block, head), kept for the adjoint.
  auto probs = std::make_shared<std::vector<Matrix<T>>>();
  probs->reserve(order->blocks.size() * static_cast<std::size_t>(heads));
  Matrix<T> out(in.rows(), width);

  Matrix<T> q, k, v;
  for (const auto& [start, end] : order->blocks) {
    const auto len = static_cast<Eigen::Index>(end - start);
    q.resize(len, dh);
    k.resize(len, dh);
    v.resize(len, dh);
    for (int h = 0; h < heads; ++h) {
      for (Eigen::Index i = 0; i < len; ++i) {
        const auto row = order->permutation[start + static_cast<std::size_t>(i)];
        q.row(i) = in.row(row).segment(h * dh, dh);
        k.row(i) = in.row(row).segment(width + h * dh, dh);
        v.row(i) = in.row(row).segment(2 * width + h * dh, dh);
      }
      Matrix<T> s(len, len);
      s.noalias() = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < len; ++i) {
        const T m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp();
        s.row(i) /= s.row(i).sum();
      }
      Matrix<T> o(len, dh);
      o.noalias() = s * v;
      for (Eigen::Index i = 0; i < len; ++i) {
        out.row(order->permutation[start + static_cast<std::size_t>(i)]).segment(h * dh, dh) = o.row(i);
      }
      probs->push_back(std::move(s));
    }
  }

  return tape.push(std::move(out), tape.requires_grad(qkv),
                   [qkv, order, heads, probs, dh, width, scale](Tape<T>& t, const Matrix<T>& g) {
                     const auto& in = t.value(qkv);
                     Matrix<T>& gin = t.grad_buffer(qkv);
                     Matrix<T> q, k, v, go;
                     std::size_t p_idx = 0;
                     for (const auto& [start, end] : order->blocks) {
                       const auto len = static_cast<Eigen::Index>(end - start);
                       q.resize(len, dh);
                       k.resize(len, dh);
                       v.resize(len, dh);
                       go.resize(len, dh);
                       for (int h = 0; h < heads; ++h) {
                         for (Eigen::Index i = 0; i < len; ++i) {
                           const auto row = order->permutation[start + static_cast<std::size_t>(i)];
                           q.row(i) = in.row(row).segment(h * dh, dh);
                           k.row(i) = in.row(row).segment(width + h * dh, dh);
                           v.row(i) = in.row(row).segment(2 * width + h * dh, dh);
                           go.row(i) = g.row(row).segment(h * dh, dh);
                         }
                         const Matrix<T>& p = (*probs)[p_idx++];
                         Matrix<T> gv(len, dh);
                         gv.noalias() = p.transpose() * go;
                         Matrix<T> gp(len, len);
                         gp.noalias() = go * v.transpose();
                         const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = gp.cwiseProduct(p).rowwise().sum();
                         Matrix<T> gs = p.cwiseProduct(gp.colwise() - rowdot);
                         Matrix<T> gq(len, dh), gk(len, dh);
                         gq.noalias() = (gs * k) * scale;
                         gk.noalias() = (gs.transpose() * q) * scale;
                         for (Eigen::Index i = 0; i < len; ++i) {
                           const auto row = order->permutation[start + static_cast<std::size_t>(i)];
                           gin.row(row).segment(h * dh, dh) += gq.row(i);
                           gin.row(row).segment(width + h * dh, dh) += gk.row(i);
                           gin.row(row).segment(2 * width + h * dh, dh) += gv.row(i);
                         }
                       }
                     }
                   });
}

/// Mean over rows of -log softmax(pred_i . targets^T / temperature)_i.
/// `targets` is a constant (M x d) matrix of label embeddings.
template <typename T>
Var contrastive_loss(Tape<T>& tape, Var pred, std::shared_ptr<const Matrix<T>> targets, T temperature = T(1)) {
  const auto& pv = tape.value(pred);
  if (pv.rows() != targets->rows() || pv.cols() != targets->cols()) {
    throw std::invalid_argument("contrastive_loss: " + std::to_string(pv.rows()) + " predictions vs " +
                                std::to_string(targets->rows()) + " labels");
  }
  if (pv.rows() == 0) throw std::invalid_argument("contrastive_loss: empty batch");
  if (!(temperature > T(0))) throw std::invalid_argument("contrastive_loss: temperature must be positive");
  const Eigen::Index m = pv.rows();
  Matrix<T> logits(m, m);
  logits.noalias() = pv * targets->transpose();
  logits /= temperature;
  auto soft = std::make_shared<Matrix<T>>(m, m);
  T total = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const T mx = logits.row(i).maxCoeff();
    const auto e = (logits.row(i).array() - mx).exp();
    const T s = e.sum();
    soft->row(i) = e / s;
    total += (mx + std::log(s)) - logits(i, i);
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total / static_cast<T>(m);
  return tape.push(std::move(out), tape.requires_grad(pred),
                   [pred, targets, soft, temperature](Tape<T>& t, const Matrix<T>& g) {
                     const Eigen::Index m = soft->rows();
                     Matrix<T> dlogits = *soft;
                     dlogits.diagonal().array() -= T(1);
                     dlogits *= g(0, 0) / (static_cast<T>(m) * temperature);
                     Matrix<T> gp(m, targets->cols());
                     gp.noalias() = dlogits * (*targets);
                     t.accumulate(pred, gp);
                   });
}

}  // namespace find3d::ad
