#ifndef SMOOTHKIT_OPS_HPP
#define SMOOTHKIT_OPS_HPP

// Differentiable ops over Tape-bound tensors.

#include "smoothkit/tensor.hpp"

#include <limits>
#include <memory>
#include <random>

namespace smoothkit {

namespace detail {

inline Tape& same_tape(const Tensor& a, const Tensor& b) {
  if (!a.valid() || a.tape() != b.tape()) throw std::invalid_argument("tensors live on different tapes");
  return *a.tape();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                         " vs " + shape_str(b.rows(), b.cols()));
  }
}

}  // namespace detail

inline Tensor stop_gradient(const Tensor& a) { return a.tape()->stop_gradient_of(a.id()); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " x " + shape_str(b.rows(), b.cols()));
  }
  Matrix v = a.value() * b.value();
  const NodeId ia = a.id(), ib = b.id();
  return t.record(OpKind::MatMul, std::move(v), {ia, ib}, [ia, ib](Tape& tp, NodeId self) {
    const Matrix& gy = tp.upstream(self);
    if (tp.wants_adjoint(ia)) tp.accumulate(self, 0, gy * tp.value(ib).transpose());
    if (tp.wants_adjoint(ib)) tp.accumulate(self, 1, tp.value(ia).transpose() * gy);
  });
}

/// Sparse (constant) times dense.
inline Matrix spmm_value(const SparseMatrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    for (Index k = a.row_begin(r); k < a.row_end(r); ++k) {
      out.row(r).noalias() += a.value_at(k) * b.row(a.col_at(k));
    }
  }
  return out;
}

/// Transposed sparse times dense, by scatter.
inline Matrix spmm_transpose_value(const SparseMatrix& a, const Matrix& g) {
  Matrix out = Matrix::Zero(a.cols(), g.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    for (Index k = a.row_begin(r); k < a.row_end(r); ++k) {
      out.row(a.col_at(k)).noalias() += a.value_at(k) * g.row(r);
    }
  }
  return out;
}

inline Tensor spmm(std::shared_ptr<const SparseMatrix> a, const Tensor& b) {
  if (a->cols() != b.rows()) {
    throw DimensionError("spmm: " + shape_str(a->rows(), a->cols()) + " x " + shape_str(b.rows(), b.cols()));
  }
  Matrix v = spmm_value(*a, b.value());
  const NodeId ib = b.id();
  return b.tape()->record(OpKind::SpMM, std::move(v), {ib}, [a, ib](Tape& tp, NodeId self) {
    if (tp.wants_adjoint(ib)) tp.accumulate(self, 0, spmm_transpose_value(*a, tp.upstream(self)));
  });
}

inline Tensor spmm(const SparseMatrix& a, const Tensor& b) {
  return spmm(std::make_shared<const SparseMatrix>(a), b);
}

/// Same-shape sum, or `b` broadcast as a 1xC row vector.
inline Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape(a, b);
  const NodeId ia = a.id(), ib = b.id();
  if (b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols()) {
    Matrix v = a.value().rowwise() + b.value().row(0);
    return t.record(OpKind::AddRowVector, std::move(v), {ia, ib}, [](Tape& tp, NodeId self) {
      const Matrix& gy = tp.upstream(self);
      tp.accumulate(self, 0, gy);
      tp.accumulate(self, 1, gy.colwise().sum());
    });
  }
  detail::require_same_shape(a, b, "add");
  Matrix v = a.value() + b.value();
  return t.record(OpKind::Add, std::move(v), {ia, ib}, [](Tape& tp, NodeId self) {
    const Matrix& gy = tp.upstream(self);
    tp.accumulate(self, 0, gy);
    tp.accumulate(self, 1, gy);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  Matrix v = a.value() - b.value();
  return t.record(OpKind::Sub, std::move(v), {a.id(), b.id()}, [](Tape& tp, NodeId self) {
    const Matrix& gy = tp.upstream(self);
    tp.accumulate(self, 0, gy);
    tp.accumulate(self, 1, -gy);
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  Matrix v = a.value().cwiseProduct(b.value());
  const NodeId ia = a.id(), ib = b.id();
  return t.record(OpKind::Mul, std::move(v), {ia, ib}, [ia, ib](Tape& tp, NodeId self) {
    const Matrix& gy = tp.upstream(self);
    if (tp.wants_adjoint(ia)) tp.accumulate(self, 0, gy.cwiseProduct(tp.value(ib)));
    if (tp.wants_adjoint(ib)) tp.accumulate(self, 1, gy.cwiseProduct(tp.value(ia)));
  });
}

inline Tensor scale(const Tensor& a, double c) {
  Matrix v = a.value() * c;
  return a.tape()->record(OpKind::Scale, std::move(v), {a.id()}, [c](Tape& tp, NodeId self) {
    tp.accumulate(self, 0, tp.upstream(self) * c);
  });
}

inline Tensor relu(const Tensor& a) {
  Matrix v = a.value().cwiseMax(0.0);
  const NodeId ia = a.id();
  return a.tape()->record(OpKind::Relu, std::move(v), {ia}, [ia](Tape& tp, NodeId self) {
    const Matrix& x = tp.value(ia);
    Matrix g = tp.upstream(self).array() * (x.array() > 0.0).cast<double>();
    tp.accumulate(self, 0, g);
  });
}

inline Tensor leaky_relu(const Tensor& a, double slope) {
  const Matrix& x = a.value();
  Matrix v = (x.array() > 0.0).select(x, slope * x);
  const NodeId ia = a.id();
  return a.tape()->record(OpKind::LeakyRelu, std::move(v), {ia}, [ia, slope](Tape& tp, NodeId self) {
    const Matrix& xx = tp.value(ia);
    Matrix d = (xx.array() > 0.0).select(Matrix::Ones(xx.rows(), xx.cols()),
                                         Matrix::Constant(xx.rows(), xx.cols(), slope));
    tp.accumulate(self, 0, tp.upstream(self).cwiseProduct(d));
  });
}

inline Tensor elu(const Tensor& a, double alpha = 1.0) {
  const Matrix& x = a.value();
  Matrix v = (x.array() > 0.0).select(x, alpha * (x.array().exp() - 1.0).matrix());
  const NodeId ia = a.id();
  return a.tape()->record(OpKind::Elu, std::move(v), {ia}, [ia, alpha](Tape& tp, NodeId self) {
    const Matrix& xx = tp.value(ia);
    Matrix d = (xx.array() > 0.0).select(Matrix::Ones(xx.rows(), xx.cols()),
                                         (alpha * xx.array().exp()).matrix());
    tp.accumulate(self, 0, tp.upstream(self).cwiseProduct(d));
  });
}

/// Inverted dropout. Identity (same handle) when p == 0.
template <class Rng>
Tensor dropout(const Tensor& a, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout rate must be in [0,1)");
  if (p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  Matrix m(a.rows(), a.cols());
  const double s = 1.0 / (1.0 - p);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? s : 0.0;
  Matrix v = a.value().cwiseProduct(m);
  return a.tape()->record(OpKind::Dropout, std::move(v), {a.id()},
                          [m = std::move(m)](Tape& tp, NodeId self) {
                            tp.accumulate(self, 0, tp.upstream(self).cwiseProduct(m));
                          });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = *parts.front().tape();
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<NodeId> ids;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("tensors live on different tapes");
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Matrix v(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return t.record(OpKind::ConcatCols, std::move(v), ids, [widths](Tape& tp, NodeId self) {
    const Matrix& gy = tp.upstream(self);
    Index o = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      tp.accumulate(self, k, gy.middleCols(o, widths[k]));
      o += widths[k];
    }
  });
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Tape& t = *parts.front().tape();
  const Index cols = parts.front().cols();
  Index rows = 0;
  std::vector<NodeId> ids;
  std::vector<Index> heights;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("tensors live on different tapes");
    if (p.cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    rows += p.rows();
    ids.push_back(p.id());
    heights.push_back(p.rows());
  }
  Matrix v(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return t.record(OpKind::ConcatRows, std::move(v), ids, [heights](Tape& tp, NodeId self) {
    const Matrix& gy = tp.upstream(self);
    Index o = 0;
    for (std::size_t k = 0; k < heights.size(); ++k) {
      tp.accumulate(self, k, gy.middleRows(o, heights[k]));
      o += heights[k];
    }
  });
}

inline Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw DimensionError("slice_cols out of range");
  Matrix v = a.value().middleCols(start, count);
  const Index rows = a.rows(), cols = a.cols();
  return a.tape()->record(OpKind::SliceCols, std::move(v), {a.id()},
                          [rows, cols, start, count](Tape& tp, NodeId self) {
                            Matrix g = Matrix::Zero(rows, cols);
                            g.middleCols(start, count) = tp.upstream(self);
                            tp.accumulate(self, 0, g);
                          });
}

inline Tensor mean_rows(const Tensor& a) {
  if (a.rows() == 0) throw DimensionError("mean_rows of an empty tensor");
  Matrix v = a.value().colwise().mean();
  const Index n = a.rows();
  return a.tape()->record(OpKind::MeanRows, std::move(v), {a.id()}, [n](Tape& tp, NodeId self) {
    Matrix g = tp.upstream(self).replicate(n, 1) / static_cast<double>(n);
    tp.accumulate(self, 0, g);
  });
}

inline Tensor sum_rows(const Tensor& a) {
  if (a.rows() == 0) throw DimensionError("sum_rows of an empty tensor");
  Matrix v = a.value().colwise().sum();
  const Index n = a.rows();
  return a.tape()->record(OpKind::SumRows, std::move(v), {a.id()}, [n](Tape& tp, NodeId self) {
    tp.accumulate(self, 0, tp.upstream(self).replicate(n, 1));
  });
}

/// Column-wise max; ties route the adjoint to the first maximal row.
inline Tensor max_rows(const Tensor& a) {
  if (a.rows() == 0) throw DimensionError("max_rows of an empty tensor");
  const Matrix& x = a.value();
  Matrix v(1, x.cols());
  std::vector<Index> arg(static_cast<std::size_t>(x.cols()));
  for (Index c = 0; c < x.cols(); ++c) {
    Index best = 0;
    for (Index r = 1; r < x.rows(); ++r) {
      if (x(r, c) > x(best, c)) best = r;
    }
    arg[static_cast<std::size_t>(c)] = best;
    v(0, c) = x(best, c);
  }
  const Index n = x.rows();
  return a.tape()->record(OpKind::MaxRows, std::move(v), {a.id()}, [n, arg](Tape& tp, NodeId self) {
    const Matrix& gy = tp.upstream(self);
    Matrix g = Matrix::Zero(n, gy.cols());
    for (Index c = 0; c < gy.cols(); ++c) g(arg[static_cast<std::size_t>(c)], c) = gy(0, c);
    tp.accumulate(self, 0, g);
  });
}

inline Tensor sum(const Tensor& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->record(OpKind::Sum, std::move(v), {a.id()}, [r, c](Tape& tp, NodeId self) {
    tp.accumulate(self, 0, Matrix::Constant(r, c, tp.upstream(self)(0, 0)));
  });
}

/// Squared Frobenius norm.
inline Tensor sum_squares(const Tensor& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().squaredNorm();
  const NodeId ia = a.id();
  return a.tape()->record(OpKind::SumSquares, std::move(v), {ia}, [ia](Tape& tp, NodeId self) {
    tp.accumulate(self, 0, 2.0 * tp.upstream(self)(0, 0) * tp.value(ia));
  });
}

/// sum_i w_i * a_i^2 for a column tensor and constant weights.
inline Tensor weighted_sum_squares(const Tensor& a, const Column& w) {
  if (a.cols() != 1 || a.rows() != w.size()) throw DimensionError("weighted_sum_squares: shape mismatch");
  Matrix v(1, 1);
  v(0, 0) = (w.array() * a.value().col(0).array().square()).sum();
  const NodeId ia = a.id();
  return a.tape()->record(OpKind::WeightedSumSquares, std::move(v), {ia}, [ia, w](Tape& tp, NodeId self) {
    Matrix g = (2.0 * tp.upstream(self)(0, 0)) * (w.array() * tp.value(ia).col(0).array()).matrix();
    tp.accumulate(self, 0, g);
  });
}

struct CosineResult {
  Tensor distance;  ///< N x 1; zero on invalid rows
  Mask valid;
};

/// Per-row 1 - cos(a_v, b_v). Rows where either norm is below eps are
/// invalid: value 0, no gradient.
inline CosineResult rowwise_cosine_distance(const Tensor& a, const Tensor& b, double eps = 1e-12) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "rowwise_cosine_distance");
  if (!(eps > 0.0)) throw std::invalid_argument("cosine eps must be positive");
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  const Index n = x.rows();
  Matrix v = Matrix::Zero(n, 1);
  Mask valid(static_cast<std::size_t>(n), 0);
  Column na(n), nb(n), dots(n);
  for (Index r = 0; r < n; ++r) {
    na(r) = x.row(r).norm();
    nb(r) = y.row(r).norm();
    dots(r) = x.row(r).dot(y.row(r));
    if (na(r) < eps || nb(r) < eps) continue;
    valid[static_cast<std::size_t>(r)] = 1;
    v(r, 0) = 1.0 - dots(r) / (std::max(na(r), eps) * std::max(nb(r), eps));
  }
  const NodeId ia = a.id(), ib = b.id();
  Tensor out = t.record(OpKind::CosineDistance, std::move(v), {ia, ib},
                        [ia, ib, valid, na, nb, dots](Tape& tp, NodeId self) {
                          const Matrix& gy = tp.upstream(self);
                          const Matrix& xx = tp.value(ia);
                          const Matrix& yy = tp.value(ib);
                          Matrix ga = Matrix::Zero(xx.rows(), xx.cols());
                          Matrix gb = Matrix::Zero(yy.rows(), yy.cols());
                          for (Index r = 0; r < xx.rows(); ++r) {
                            if (!valid[static_cast<std::size_t>(r)]) continue;
                            const double g = gy(r, 0);
                            const double inv = 1.0 / (na(r) * nb(r));
                            const double cosv = dots(r) * inv;
                            // d(1-cos)/da = -(b/(|a||b|) - cos * a/|a|^2)
                            ga.row(r) = -g * (yy.row(r) * inv - cosv * xx.row(r) / (na(r) * na(r)));
                            gb.row(r) = -g * (xx.row(r) * inv - cosv * yy.row(r) / (nb(r) * nb(r)));
                          }
                          if (tp.wants_adjoint(ia)) tp.accumulate(self, 0, ga);
                          if (tp.wants_adjoint(ib)) tp.accumulate(self, 1, gb);
                        });
  return {out, std::move(valid)};
}

inline Matrix softmax_rows_value(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    p.row(r) = (z.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

inline Matrix log_softmax_rows_value(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    out.row(r) = z.row(r).array() - lse;
  }
  return out;
}

inline Tensor softmax_rows(const Tensor& a) {
  Matrix p = softmax_rows_value(a.value());
  return a.tape()->record(OpKind::Softmax, p, {a.id()}, [p](Tape& tp, NodeId self) {
    const Matrix& gy = tp.upstream(self);
    Matrix g(p.rows(), p.cols());
    for (Index r = 0; r < p.rows(); ++r) {
      const double d = gy.row(r).dot(p.row(r));
      g.row(r) = p.row(r).array() * (gy.row(r).array() - d);
    }
    tp.accumulate(self, 0, g);
  });
}

/// Mean over masked rows of -log softmax(logits)[label].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, const Mask& mask) {
  const Index n = logits.rows(), c = logits.cols();
  if (static_cast<Index>(mask.size()) != n || static_cast<Index>(labels.size()) != n) {
    throw DimensionError("softmax_cross_entropy: labels/mask length must equal rows");
  }
  const std::size_t count = mask_count(mask);
  if (count == 0) throw std::invalid_argument("softmax_cross_entropy: empty mask (no supervised rows)");
  Matrix logp = log_softmax_rows_value(logits.value());
  double total = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (Index r = 0; r < n; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const int y = lab[static_cast<std::size_t>(r)];
    if (y < 0 || y >= c) throw std::out_of_range("label outside class range");
    total -= logp(r, y);
  }
  Matrix v(1, 1);
  v(0, 0) = total / static_cast<double>(count);
  return logits.tape()->record(
      OpKind::SoftmaxCrossEntropy, std::move(v), {logits.id()},
      [logp, lab, mask, count](Tape& tp, NodeId self) {
        const double g = tp.upstream(self)(0, 0) / static_cast<double>(count);
        Matrix grad = Matrix::Zero(logp.rows(), logp.cols());
        for (Index r = 0; r < logp.rows(); ++r) {
          if (!mask[static_cast<std::size_t>(r)]) continue;
          grad.row(r) = logp.row(r).array().exp() * g;
          grad(r, lab[static_cast<std::size_t>(r)]) -= g;
        }
        tp.accumulate(self, 0, grad);
      });
}

/// Mean over masked rows of KL(p || softmax(logits)). `p` holds row
/// distributions; 0 log 0 is taken as 0.
inline Tensor kl_divergence(const Tensor& p, const Tensor& logits, const Mask& mask) {
  Tape& t = detail::same_tape(p, logits);
  detail::require_same_shape(p, logits, "kl_divergence");
  if (static_cast<Index>(mask.size()) != p.rows()) throw DimensionError("kl_divergence: mask length");
  const std::size_t count = mask_count(mask);
  if (count == 0) throw std::invalid_argument("kl_divergence: empty mask");
  const Matrix& pv = p.value();
  Matrix logq = log_softmax_rows_value(logits.value());
  double total = 0.0;
  for (Index r = 0; r < pv.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    for (Index c = 0; c < pv.cols(); ++c) {
      const double pc = pv(r, c);
      if (pc > 0.0) total += pc * (std::log(pc) - logq(r, c));
    }
  }
  Matrix v(1, 1);
  v(0, 0) = total / static_cast<double>(count);
  const NodeId ip = p.id(), il = logits.id();
  return t.record(OpKind::KlDivergence, std::move(v), {ip, il},
                  [ip, il, logq, mask, count](Tape& tp, NodeId self) {
                    const double g = tp.upstream(self)(0, 0) / static_cast<double>(count);
                    const Matrix& pp = tp.value(ip);
                    Matrix gl = Matrix::Zero(pp.rows(), pp.cols());
                    Matrix gp = Matrix::Zero(pp.rows(), pp.cols());
                    for (Index r = 0; r < pp.rows(); ++r) {
                      if (!mask[static_cast<std::size_t>(r)]) continue;
                      const double mass = pp.row(r).sum();
                      for (Index c = 0; c < pp.cols(); ++c) {
                        const double q = std::exp(logq(r, c));
                        gl(r, c) = g * (mass * q - pp(r, c));
                        const double lp = pp(r, c) > 0.0 ? std::log(pp(r, c))
                                                          : std::log(std::numeric_limits<double>::min());
                        gp(r, c) = g * (lp + 1.0 - logq(r, c));
                      }
                    }
                    if (tp.wants_adjoint(ip)) tp.accumulate(self, 0, gp);
                    if (tp.wants_adjoint(il)) tp.accumulate(self, 1, gl);
                  });
}

/// Single-head graph attention aggregation.
///
/// `structure` lists, per target row i, the source rows j it attends to
/// (values ignored). Scores e_ij = LeakyReLU(dst_i + src_j); weights are the
/// row-softmax of e over the structure; output_i = sum_j alpha_ij * h_j.
inline Tensor gat_attention(std::shared_ptr<const SparseMatrix> structure, const Tensor& h,
                            const Tensor& src_score, const Tensor& dst_score, double slope = 0.2) {
  const Index n = h.rows();
  if (structure->rows() != n || structure->cols() != n || src_score.rows() != n ||
      dst_score.rows() != n || src_score.cols() != 1 || dst_score.cols() != 1) {
    throw DimensionError("gat_attention: shape mismatch");
  }
  const SparseMatrix& s = *structure;
  const Matrix& hv = h.value();
  const Matrix& el = src_score.value();
  const Matrix& er = dst_score.value();
  std::vector<double> raw(s.nnz()), alpha(s.nnz());
  Matrix out = Matrix::Zero(n, hv.cols());
  for (Index i = 0; i < n; ++i) {
    const Index b = s.row_begin(i), e = s.row_end(i);
    if (b == e) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (Index k = b; k < e; ++k) {
      const double x = er(i, 0) + el(s.col_at(k), 0);
      raw[static_cast<std::size_t>(k)] = x;
      const double lx = x > 0.0 ? x : slope * x;
      alpha[static_cast<std::size_t>(k)] = lx;
      mx = std::max(mx, lx);
    }
    double z = 0.0;
    for (Index k = b; k < e; ++k) {
      double& a = alpha[static_cast<std::size_t>(k)];
      a = std::exp(a - mx);
      z += a;
    }
    for (Index k = b; k < e; ++k) {
      double& a = alpha[static_cast<std::size_t>(k)];
      a /= z;
      out.row(i).noalias() += a * hv.row(s.col_at(k));
    }
  }
  const NodeId ih = h.id(), il = src_score.id(), ir = dst_score.id();
  Tape& t = detail::same_tape(h, src_score);
  detail::same_tape(h, dst_score);
  return t.record(OpKind::GatAttention, std::move(out), {ih, il, ir},
                  [structure, raw = std::move(raw), alpha = std::move(alpha), ih, slope](Tape& tp,
                                                                                       NodeId self) {
                    const SparseMatrix& st = *structure;
                    const Matrix& gy = tp.upstream(self);
                    const Matrix& hh = tp.value(ih);
                    const Index nn = hh.rows();
                    Matrix gh = Matrix::Zero(nn, hh.cols());
                    Matrix gl = Matrix::Zero(nn, 1);
                    Matrix gr = Matrix::Zero(nn, 1);
                    std::vector<double> da;
                    for (Index i = 0; i < nn; ++i) {
                      const Index b = st.row_begin(i), e = st.row_end(i);
                      if (b == e) continue;
                      da.assign(static_cast<std::size_t>(e - b), 0.0);
                      double weighted = 0.0;
                      for (Index k = b; k < e; ++k) {
                        const Index j = st.col_at(k);
                        const double a = alpha[static_cast<std::size_t>(k)];
                        gh.row(j).noalias() += a * gy.row(i);
                        const double d = gy.row(i).dot(hh.row(j));
                        da[static_cast<std::size_t>(k - b)] = d;
                        weighted += a * d;
                      }
                      for (Index k = b; k < e; ++k) {
                        const double a = alpha[static_cast<std::size_t>(k)];
                        const double de = a * (da[static_cast<std::size_t>(k - b)] - weighted);
                        const double dr = raw[static_cast<std::size_t>(k)] > 0.0 ? de : slope * de;
                        gl(st.col_at(k), 0) += dr;
                        gr(i, 0) += dr;
                      }
                    }
                    if (tp.wants_adjoint(ih)) tp.accumulate(self, 0, gh);
                    tp.accumulate(self, 1, gl);
                    tp.accumulate(self, 2, gr);
                  });
}

}  // namespace smoothkit

#endif  // SMOOTHKIT_OPS_HPP
