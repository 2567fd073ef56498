#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace gaitcl::ad {

using Mat = Eigen::MatrixXd;

/// Trainable tensor: value plus accumulated gradient of identical shape.
struct Param {
  std::string name;
  Mat value;
  Mat grad;

  Param() = default;
  Param(std::string n, Mat v)
      : name(std::move(n)), value(std::move(v)),
        grad(Mat::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

/// One placement instruction for index_map: out(dst_r,dst_c) += in(src_r,src_c).
struct MapEntry {
  int dst_r, dst_c, src_r, src_c;
};

using IndexMapPtr = std::shared_ptr<const std::vector<MapEntry>>;

/// Batch-of-images layout for conv2d: input rows n*cin + c, cols y*w + x.
/// Kernel is fixed 3x3 with zero padding 1.
struct ConvDims {
  int n, cin, h, w, cout, stride;
  int out_h() const { return (h + 2 - 3) / stride + 1; }
  int out_w() const { return (w + 2 - 3) / stride + 1; }
};

/// Feature-map layout for the fused partition+GeM op: input rows s*C + c,
/// cols (t*Hp + y)*Wp + x; output rows p*S + s (parts-major), cols C.
struct GemDims {
  int S, C, Tp, Hp, Wp, m;
  int part_rows() const { return Hp / m; }
  int pool_count() const { return Tp * part_rows() * Wp; }
};

using BoolMask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Reverse-mode tape over Eigen double matrices. A fresh graph is built per
/// forward pass; leaves bind Params and flush their gradients on backward().
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;  // lazily allocated
    bool requires_grad = false;
    std::function<void(Tape&)> backprop;
    Param* param = nullptr;
  };

  int leaf(Param& p);
  int constant(Mat v);

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer, allocated to zero on first access.
  Mat& grad_buf(int id);

  // -- primitives ----------------------------------------------------------
  int add(int a, int b);
  int sub(int a, int b);
  int scale(int a, double s);
  int add_scalar(int a, double s);
  int matmul(int a, int b);     // A * B
  int matmul_nt(int a, int b);  // A * B^T
  int relu(int a);
  int softplus(int a);
  int sqrt_guard(int a, double dead_zone = 1e-12);
  int row_l2_normalize(int a, double eps = 1e-12);
  int rowwise_sqsum(int a);  // n x d -> n x 1
  int pairwise_sqdist(int x, int y);
  int index_map(int a, int out_rows, int out_cols, IndexMapPtr entries);
  int row_softmax_masked(int a, const BoolMask& keep);
  int ce_with_targets(int logits, const Mat& targets);  // scalar
  int kl_rows_const_p(int q, const Mat& p, const BoolMask& keep);  // n x 1
  int conv2d(int x, const ConvDims& dims, int w, int b);
  int temporal_mean(int x, int samples, int frames, int channels);
  int gem_pool_parts(int fmap, int alpha, const GemDims& dims);
  int sum(int a);   // 1 x 1
  int mean(int a);  // 1 x 1
  /// Weighted sum of same-shape nodes (used for the composite objective).
  int axpy(const std::vector<std::pair<double, int>>& terms);

  void backward(int loss_id);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  int push(Mat value, bool requires_grad, std::function<void(Tape&)> backprop);
  std::vector<Node> nodes_;
};

/// Central finite difference of `loss()` w.r.t. one entry of `p`.
double finite_difference(Param& p, Eigen::Index flat_index,
                         const std::function<double()>& loss, double h = 1e-5);

/// Relative error with an absolute floor, as used by all gradient checks.
double rel_error(double analytic, double numeric, double floor = 1e-8);

}  // namespace gaitcl::ad
