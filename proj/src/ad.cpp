#include "gaitcl/ad.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace gaitcl::ad {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// col has one row per (ci, ky, kx), one column per output pixel.
Mat im2col(const Eigen::Block<const Mat>& img, int cin, int h, int w,
           int stride, int ho, int wo) {
  Mat col = Mat::Zero(cin * 9, ho * wo);
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int row = (ci * 3 + ky) * 3 + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= w) continue;
            col(row, oy * wo + ox) = img(ci, iy * w + ix);
          }
        }
      }
    }
  }
  return col;
}

void col2im_add(Eigen::Block<Mat> img, const Mat& dcol, int cin, int h, int w,
                int stride, int ho, int wo) {
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int row = (ci * 3 + ky) * 3 + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= w) continue;
            img(ci, iy * w + ix) += dcol(row, oy * wo + ox);
          }
        }
      }
    }
  }
}

}  // namespace

int Tape::push(Mat value, bool requires_grad,
               std::function<void(Tape&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Mat& Tape::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

int Tape::leaf(Param& p) {
  const int id = static_cast<int>(nodes_.size());
  Param* pp = &p;
  push(p.value, true, [id, pp](Tape& t) { pp->grad += t.nodes_[id].grad; });
  return id;
}

int Tape::constant(Mat v) { return push(std::move(v), false, nullptr); }

int Tape::add(int a, int b) {
  require(nodes_[a].value.rows() == nodes_[b].value.rows() &&
              nodes_[a].value.cols() == nodes_[b].value.cols(),
          "ad::add: shape mismatch");
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  return push(nodes_[a].value + nodes_[b].value, rg, [id, a, b](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    if (t.nodes_[a].requires_grad) t.grad_buf(a) += g;
    if (t.nodes_[b].requires_grad) t.grad_buf(b) += g;
  });
}

int Tape::sub(int a, int b) {
  require(nodes_[a].value.rows() == nodes_[b].value.rows() &&
              nodes_[a].value.cols() == nodes_[b].value.cols(),
          "ad::sub: shape mismatch");
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  return push(nodes_[a].value - nodes_[b].value, rg, [id, a, b](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    if (t.nodes_[a].requires_grad) t.grad_buf(a) += g;
    if (t.nodes_[b].requires_grad) t.grad_buf(b) -= g;
  });
}

int Tape::scale(int a, double s) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  return push(nodes_[a].value * s, rg, [id, a, s](Tape& t) {
    t.grad_buf(a) += t.nodes_[id].grad * s;
  });
}

int Tape::add_scalar(int a, double s) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  return push(nodes_[a].value.array() + s, rg, [id, a](Tape& t) {
    t.grad_buf(a) += t.nodes_[id].grad;
  });
}

int Tape::matmul(int a, int b) {
  require(nodes_[a].value.cols() == nodes_[b].value.rows(),
          "ad::matmul: inner dimensions differ");
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  return push(nodes_[a].value * nodes_[b].value, rg, [id, a, b](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    if (t.nodes_[a].requires_grad) t.grad_buf(a) += g * t.nodes_[b].value.transpose();
    if (t.nodes_[b].requires_grad) t.grad_buf(b) += t.nodes_[a].value.transpose() * g;
  });
}

int Tape::matmul_nt(int a, int b) {
  require(nodes_[a].value.cols() == nodes_[b].value.cols(),
          "ad::matmul_nt: column counts differ");
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  return push(nodes_[a].value * nodes_[b].value.transpose(), rg,
              [id, a, b](Tape& t) {
                const Mat& g = t.nodes_[id].grad;
                if (t.nodes_[a].requires_grad) t.grad_buf(a) += g * t.nodes_[b].value;
                if (t.nodes_[b].requires_grad)
                  t.grad_buf(b) += g.transpose() * t.nodes_[a].value;
              });
}

int Tape::relu(int a) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  return push(nodes_[a].value.cwiseMax(0.0), rg, [id, a](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    t.grad_buf(a).array() +=
        (t.nodes_[a].value.array() > 0.0).cast<double>() * g.array();
  });
}

int Tape::softplus(int a) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  Mat y = nodes_[a].value.unaryExpr([](double x) { return stable_softplus(x); });
  return push(std::move(y), rg, [id, a](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    Mat s = t.nodes_[a].value.unaryExpr([](double x) { return sigmoid(x); });
    t.grad_buf(a).array() += s.array() * g.array();
  });
}

int Tape::sqrt_guard(int a, double dead_zone) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  Mat y = nodes_[a].value.cwiseMax(0.0).cwiseSqrt();
  return push(std::move(y), rg, [id, a, dead_zone](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    const Mat& x = t.nodes_[a].value;
    const Mat& y = t.nodes_[id].value;
    Mat& da = t.grad_buf(a);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        if (x(i, j) > dead_zone) da(i, j) += 0.5 / y(i, j) * g(i, j);
  });
}

int Tape::row_l2_normalize(int a, double eps) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  const Mat& x = nodes_[a].value;
  Mat y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = std::max(x.row(i).norm(), eps);
    y.row(i) = x.row(i) / n;
  }
  return push(std::move(y), rg, [id, a, eps](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    const Mat& x = t.nodes_[a].value;
    const Mat& y = t.nodes_[id].value;
    Mat& da = t.grad_buf(a);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double n = x.row(i).norm();
      if (n > eps) {
        const double dot = y.row(i).dot(g.row(i));
        da.row(i) += (g.row(i) - dot * y.row(i)) / n;
      } else {
        da.row(i) += g.row(i) / eps;
      }
    }
  });
}

int Tape::rowwise_sqsum(int a) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  Mat y = nodes_[a].value.rowwise().squaredNorm();
  return push(std::move(y), rg, [id, a](Tape& t) {
    const Mat& g = t.nodes_[id].grad;  // n x 1
    t.grad_buf(a) += 2.0 * (g.col(0).asDiagonal() * t.nodes_[a].value);
  });
}

int Tape::pairwise_sqdist(int x, int y) {
  const Mat& X = nodes_[x].value;
  const Mat& Y = nodes_[y].value;
  require(X.cols() == Y.cols(), "ad::pairwise_sqdist: feature dims differ");
  const bool rg = nodes_[x].requires_grad || nodes_[y].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  Mat D = (-2.0 * X * Y.transpose());
  D.colwise() += X.rowwise().squaredNorm().col(0);
  D.rowwise() += Y.rowwise().squaredNorm().transpose().row(0);
  D = D.cwiseMax(0.0);
  return push(std::move(D), rg, [id, x, y](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    const Mat& X = t.nodes_[x].value;
    const Mat& Y = t.nodes_[y].value;
    if (t.nodes_[x].requires_grad) {
      Eigen::VectorXd rs = g.rowwise().sum();
      t.grad_buf(x) += 2.0 * (rs.asDiagonal() * X - g * Y);
    }
    if (t.nodes_[y].requires_grad) {
      Eigen::VectorXd cs = g.colwise().sum().transpose();
      t.grad_buf(y) += 2.0 * (cs.asDiagonal() * Y - g.transpose() * X);
    }
  });
}

int Tape::index_map(int a, int out_rows, int out_cols, IndexMapPtr entries) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  const Mat& x = nodes_[a].value;
  Mat y = Mat::Zero(out_rows, out_cols);
  for (const MapEntry& e : *entries) y(e.dst_r, e.dst_c) += x(e.src_r, e.src_c);
  return push(std::move(y), rg, [id, a, entries](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    Mat& da = t.grad_buf(a);
    for (const MapEntry& e : *entries) da(e.src_r, e.src_c) += g(e.dst_r, e.dst_c);
  });
}

int Tape::row_softmax_masked(int a, const BoolMask& keep) {
  const Mat& z = nodes_[a].value;
  require(keep.rows() == z.rows() && keep.cols() == z.cols(),
          "ad::row_softmax_masked: mask shape mismatch");
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  Mat q = Mat::Zero(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      if (keep(i, j)) m = std::max(m, z(i, j));
    if (!std::isfinite(m)) continue;  // fully masked row stays zero
    double s = 0.0;
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      if (keep(i, j)) s += (q(i, j) = std::exp(z(i, j) - m));
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      if (keep(i, j)) q(i, j) /= s;
  }
  BoolMask keep_copy = keep;
  return push(std::move(q), rg, [id, a, keep_copy](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    const Mat& q = t.nodes_[id].value;
    Mat& da = t.grad_buf(a);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      double dot = 0.0;
      for (Eigen::Index j = 0; j < q.cols(); ++j)
        if (keep_copy(i, j)) dot += g(i, j) * q(i, j);
      for (Eigen::Index j = 0; j < q.cols(); ++j)
        if (keep_copy(i, j)) da(i, j) += q(i, j) * (g(i, j) - dot);
    }
  });
}

int Tape::ce_with_targets(int logits, const Mat& targets) {
  const Mat& z = nodes_[logits].value;
  require(targets.rows() == z.rows() && targets.cols() == z.cols(),
          "ad::ce_with_targets: target shape mismatch");
  const bool rg = nodes_[logits].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  const Eigen::Index S = z.rows();
  auto q = std::make_shared<Mat>(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < S; ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      const double ls = z(i, j) - lse;
      (*q)(i, j) = std::exp(ls);
      total -= targets(i, j) * ls;
    }
  }
  Mat v(1, 1);
  v(0, 0) = total / static_cast<double>(S);
  Mat tgt = targets;
  return push(std::move(v), rg, [id, logits, q, tgt](Tape& t) {
    const double g = t.nodes_[id].grad(0, 0);
    const double S = static_cast<double>(q->rows());
    Eigen::VectorXd rs = tgt.rowwise().sum();
    t.grad_buf(logits) += (g / S) * (rs.asDiagonal() * (*q) - tgt);
  });
}

int Tape::kl_rows_const_p(int qid, const Mat& p, const BoolMask& keep) {
  constexpr double kFloor = 1e-12;  // clamp before logs
  const Mat& q = nodes_[qid].value;
  require(p.rows() == q.rows() && p.cols() == q.cols() &&
              keep.rows() == q.rows() && keep.cols() == q.cols(),
          "ad::kl_rows_const_p: shape mismatch");
  const bool rg = nodes_[qid].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  Mat v = Mat::Zero(q.rows(), 1);
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    for (Eigen::Index j = 0; j < q.cols(); ++j)
      if (keep(i, j) && p(i, j) > 0.0)
        v(i, 0) += p(i, j) * (std::log(p(i, j)) -
                              std::log(std::max(q(i, j), kFloor)));
  Mat pc = p;
  BoolMask kc = keep;
  return push(std::move(v), rg, [id, qid, pc, kc](Tape& t) {
    const Mat& g = t.nodes_[id].grad;  // n x 1
    const Mat& q = t.nodes_[qid].value;
    Mat& dq = t.grad_buf(qid);
    for (Eigen::Index i = 0; i < q.rows(); ++i)
      for (Eigen::Index j = 0; j < q.cols(); ++j)
        if (kc(i, j) && pc(i, j) > 0.0)
          dq(i, j) -= g(i, 0) * pc(i, j) / std::max(q(i, j), kFloor);
  });
}

int Tape::conv2d(int x, const ConvDims& d, int w, int b) {
  const Mat& X = nodes_[x].value;
  const Mat& W = nodes_[w].value;
  const Mat& B = nodes_[b].value;
  require(X.rows() == static_cast<Eigen::Index>(d.n) * d.cin &&
              X.cols() == static_cast<Eigen::Index>(d.h) * d.w,
          "ad::conv2d: input shape mismatch");
  require(W.rows() == d.cout && W.cols() == static_cast<Eigen::Index>(d.cin) * 9,
          "ad::conv2d: weight shape mismatch");
  require(B.rows() == d.cout && B.cols() == 1, "ad::conv2d: bias shape mismatch");
  const int ho = d.out_h(), wo = d.out_w();
  const bool rg = nodes_[x].requires_grad || nodes_[w].requires_grad ||
                  nodes_[b].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  auto cols = std::make_shared<std::vector<Mat>>();
  cols->reserve(d.n);
  Mat Y(static_cast<Eigen::Index>(d.n) * d.cout, static_cast<Eigen::Index>(ho) * wo);
  for (int n = 0; n < d.n; ++n) {
    Mat col = im2col(X.block(static_cast<Eigen::Index>(n) * d.cin, 0, d.cin,
                             X.cols()),
                     d.cin, d.h, d.w, d.stride, ho, wo);
    Y.block(static_cast<Eigen::Index>(n) * d.cout, 0, d.cout, Y.cols()) =
        (W * col).colwise() + B.col(0);
    cols->push_back(std::move(col));
  }
  ConvDims dc = d;
  return push(std::move(Y), rg, [id, x, w, b, dc, cols](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    const Mat& W = t.nodes_[w].value;
    const int ho = dc.out_h(), wo = dc.out_w();
    for (int n = 0; n < dc.n; ++n) {
      const auto gy = g.block(static_cast<Eigen::Index>(n) * dc.cout, 0, dc.cout,
                              g.cols());
      if (t.nodes_[w].requires_grad)
        t.grad_buf(w) += gy * (*cols)[n].transpose();
      if (t.nodes_[b].requires_grad) t.grad_buf(b) += gy.rowwise().sum();
      if (t.nodes_[x].requires_grad) {
        Mat dcol = W.transpose() * gy;
        col2im_add(t.grad_buf(x).block(static_cast<Eigen::Index>(n) * dc.cin, 0,
                                       dc.cin, t.nodes_[x].value.cols()),
                   dcol, dc.cin, dc.h, dc.w, dc.stride, ho, wo);
      }
    }
  });
}

int Tape::temporal_mean(int x, int samples, int frames, int channels) {
  const Mat& X = nodes_[x].value;
  require(X.rows() == static_cast<Eigen::Index>(samples) * frames * channels,
          "ad::temporal_mean: row count mismatch");
  const bool rg = nodes_[x].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  Mat Y = Mat::Zero(static_cast<Eigen::Index>(samples) * channels, X.cols());
  for (int s = 0; s < samples; ++s)
    for (int t = 0; t < frames; ++t)
      Y.block(static_cast<Eigen::Index>(s) * channels, 0, channels, X.cols()) +=
          X.block((static_cast<Eigen::Index>(s) * frames + t) * channels, 0,
                  channels, X.cols());
  Y /= static_cast<double>(frames);
  return push(std::move(Y), rg, [id, x, samples, frames, channels](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    Mat& dx = t.grad_buf(x);
    const double inv = 1.0 / static_cast<double>(frames);
    for (int s = 0; s < samples; ++s)
      for (int f = 0; f < frames; ++f)
        dx.block((static_cast<Eigen::Index>(s) * frames + f) * channels, 0,
                 channels, g.cols()) +=
            inv * g.block(static_cast<Eigen::Index>(s) * channels, 0, channels,
                          g.cols());
  });
}

int Tape::gem_pool_parts(int fmap, int alpha, const GemDims& d) {
  const Mat& X = nodes_[fmap].value;
  const double a = nodes_[alpha].value(0, 0);
  require(nodes_[alpha].value.size() == 1, "ad::gem_pool_parts: alpha must be scalar");
  require(a > 0.0, "ad::gem_pool_parts: alpha must be positive");
  require(d.Hp % d.m == 0, "ad::gem_pool_parts: height not divisible by part count");
  require(X.rows() == static_cast<Eigen::Index>(d.S) * d.C &&
              X.cols() == static_cast<Eigen::Index>(d.Tp) * d.Hp * d.Wp,
          "ad::gem_pool_parts: feature map shape mismatch");
  const bool rg = nodes_[fmap].requires_grad || nodes_[alpha].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  const int hp = d.part_rows();
  const double n = static_cast<double>(d.pool_count());

  // Cache clamped inputs raised to alpha; backward reuses them.
  auto pw = std::make_shared<Mat>(X.rows(), X.cols());
  *pw = X.cwiseMax(0.0).array().pow(a);

  Mat f(static_cast<Eigen::Index>(d.m) * d.S, d.C);
  for (int p = 0; p < d.m; ++p) {
    for (int s = 0; s < d.S; ++s) {
      for (int c = 0; c < d.C; ++c) {
        const Eigen::Index row = static_cast<Eigen::Index>(s) * d.C + c;
        double acc = 0.0;
        for (int t = 0; t < d.Tp; ++t)
          for (int y = p * hp; y < (p + 1) * hp; ++y)
            for (int xk = 0; xk < d.Wp; ++xk)
              acc += (*pw)(row, (static_cast<Eigen::Index>(t) * d.Hp + y) * d.Wp + xk);
        const double M = acc / n;
        f(static_cast<Eigen::Index>(p) * d.S + s, c) =
            M > 0.0 ? std::pow(M, 1.0 / a) : 0.0;
      }
    }
  }
  GemDims dd = d;
  return push(std::move(f), rg, [id, fmap, alpha, dd, pw, a](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    const Mat& X = t.nodes_[fmap].value;
    const Mat& f = t.nodes_[id].value;
    const int hp = dd.part_rows();
    const double n = static_cast<double>(dd.pool_count());
    const bool need_x = t.nodes_[fmap].requires_grad;
    const bool need_a = t.nodes_[alpha].requires_grad;
    Mat* dx = need_x ? &t.grad_buf(fmap) : nullptr;
    double da = 0.0;
    for (int p = 0; p < dd.m; ++p) {
      for (int s = 0; s < dd.S; ++s) {
        for (int c = 0; c < dd.C; ++c) {
          const Eigen::Index row = static_cast<Eigen::Index>(s) * dd.C + c;
          const double go = g(static_cast<Eigen::Index>(p) * dd.S + s, c);
          if (go == 0.0) continue;
          const double y = f(static_cast<Eigen::Index>(p) * dd.S + s, c);
          if (y <= 0.0) continue;
          double acc = 0.0, acc_ln = 0.0;
          for (int tt = 0; tt < dd.Tp; ++tt) {
            for (int yy = p * hp; yy < (p + 1) * hp; ++yy) {
              for (int xx = 0; xx < dd.Wp; ++xx) {
                const Eigen::Index col =
                    (static_cast<Eigen::Index>(tt) * dd.Hp + yy) * dd.Wp + xx;
                const double v = X(row, col);
                const double pv = (*pw)(row, col);
                if (v > 0.0 && pv > 0.0) {
                  if (need_a) acc_ln += pv * std::log(v);
                  if (need_x) (*dx)(row, col) += go * y * pv / (n * (acc_v(pv), v) * M_of(y, a));
                }
                acc += pv;
              }
            }
          }
          const double M = acc / n;
          if (need_a && M > 0.0 && acc > 0.0)
            da += go * y * (acc_ln / (a * acc) - std::log(M) / (a * a));
        }
      }
    }
    if (need_a) t.grad_buf(alpha)(0, 0) += da;
  });
}

int Tape::sum(int a) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  Mat v(1, 1);
  v(0, 0) = nodes_[a].value.sum();
  return push(std::move(v), rg, [id, a](Tape& t) {
    t.grad_buf(a).array() += t.nodes_[id].grad(0, 0);
  });
}

int Tape::mean(int a) {
  const bool rg = nodes_[a].requires_grad;
  const int id = static_cast<int>(nodes_.size());
  const double n = static_cast<double>(nodes_[a].value.size());
  Mat v(1, 1);
  v(0, 0) = nodes_[a].value.sum() / n;
  return push(std::move(v), rg, [id, a, n](Tape& t) {
    t.grad_buf(a).array() += t.nodes_[id].grad(0, 0) / n;
  });
}

int Tape::axpy(const std::vector<std::pair<double, int>>& terms) {
  require(!terms.empty(), "ad::axpy: no terms");
  bool rg = false;
  Mat v = Mat::Zero(nodes_[terms[0].second].value.rows(),
                    nodes_[terms[0].second].value.cols());
  for (const auto& [w, node] : terms) {
    require(nodes_[node].value.rows() == v.rows() &&
                nodes_[node].value.cols() == v.cols(),
            "ad::axpy: shape mismatch");
    v += w * nodes_[node].value;
    rg = rg || nodes_[node].requires_grad;
  }
  const int id = static_cast<int>(nodes_.size());
  auto tc = terms;
  return push(std::move(v), rg, [id, tc](Tape& t) {
    const Mat& g = t.nodes_[id].grad;
    for (const auto& [w, node] : tc)
      if (t.nodes_[node].requires_grad) t.grad_buf(node) += w * g;
  });
}

void Tape::backward(int loss_id) {
  require(nodes_[loss_id].value.size() == 1,
          "ad::backward: loss must be a scalar node");
  grad_buf(loss_id)(0, 0) = 1.0;
  for (int i = loss_id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() != 0 && n.backprop) n.backprop(*this);
  }
}

double finite_difference(Param& p, Eigen::Index flat_index,
                         const std::function<double()>& loss, double h) {
  double* v = p.value.data() + flat_index;
  const double saved = *v;
  *v = saved + h;
  const double up = loss();
  *v = saved - h;
  const double dn = loss();
  *v = saved;
  return (up - dn) / (2.0 * h);
}

double rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace gaitcl::ad
