#pragma once

// Dense numerical core: parameter tensors, the handful of differentiable
// primitives the slate models are built from, Adam, and gradient checking.
//
// There is no tape. Every primitive comes as a forward function plus an
// explicit backward function that the model code calls in reverse order.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace slategen {

using Rng = std::mt19937_64;

// Thrown when an operation is called with inputs that violate its contract
// (dimension mismatches, out-of-range ids).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when training produces non-finite values.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; used to derive independent seeds from (seed, index...).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

namespace numkit {

constexpr double kLogvarMin = -20.0;
constexpr double kLogvarMax = 20.0;

struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  static Tensor2 from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor2 gaussian(std::size_t r, std::size_t c, double mean, double stddev, Rng& rng);
};

struct GaussianParams {
  std::vector<double> mean;
  std::vector<double> logvar;

  std::size_t size() const { return mean.size(); }
};

// A trainable tensor and its gradient accumulator, addressed by name.
struct ParamRef {
  std::string name;
  Tensor2* value;
  Tensor2* grad;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;   // one per ParamRef
  std::vector<std::vector<double>> second_moment;  // one per ParamRef
  AdamConfig config;

  AdamState() = default;
  explicit AdamState(const AdamConfig& cfg) : config(cfg) {}
};

// ---------------------------------------------------------------------------
// Primitives

double dot(std::span<const double> a, std::span<const double> b);
double sigmoid(double x);
// log(1 + exp(x)) without overflow.
double softplus(double x);

// y = W x + b
std::vector<double> affine_apply(const Tensor2& w, std::span<const double> b,
                                 std::span<const double> x);
// Accumulates dW += dy x^T and db += dy; writes dx = W^T dy when dx is non-empty.
void affine_backward(const Tensor2& w, std::span<const double> x, std::span<const double> dy,
                     Tensor2& dw, std::span<double> db, std::span<double> dx);

// KL(N(q) || N(p)) for diagonal Gaussians.
double gaussian_kl(const GaussianParams& q, const GaussianParams& p);
// Adds scale * dKL/d(.) into the four gradient buffers.
void gaussian_kl_backward(const GaussianParams& q, const GaussianParams& p, double scale,
                          GaussianParams& dq, GaussianParams& dp);

// Splits a 2m-vector [mean | logvar] into GaussianParams, clamping logvar.
GaussianParams split_gaussian(std::span<const double> packed);
// Gradient of split_gaussian: zero for logvar entries outside the clamp range.
void split_gaussian_backward(std::span<const double> packed, const GaussianParams& dg,
                             std::span<double> dpacked);

// z = mean + exp(logvar / 2) * noise
std::vector<double> reparameterize(const GaussianParams& g, std::span<const double> noise);
void reparameterize_backward(const GaussianParams& g, std::span<const double> noise,
                             std::span<const double> dz, GaussianParams& dg);

// -log softmax(target | target, negatives...)
double sampled_softmax_ce(double target_logit, std::span<const double> negative_logits);
// Same loss, also writing dloss/dlogit for the target and each negative.
double sampled_softmax_ce(double target_logit, std::span<const double> negative_logits,
                          double& d_target, std::span<double> d_negatives);

// Binary cross entropy on a logit: -(y log s + (1-y) log(1-s)), s = sigmoid(logit).
double bce_with_logit(double logit, double label, double* d_logit = nullptr);

// ---------------------------------------------------------------------------
// Two-layer ReLU network: in -> hidden (ReLU) -> out.

struct MlpCache {
  std::vector<double> input;
  std::vector<double> hidden_pre;
  std::vector<double> hidden;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

  std::size_t in_dim() const { return w1_.cols; }
  std::size_t out_dim() const { return w2_.rows; }
  std::size_t hidden_dim() const { return w1_.rows; }

  std::vector<double> forward(std::span<const double> x, MlpCache* cache = nullptr) const;
  // Accumulates parameter gradients; writes dx when non-empty.
  void backward(const MlpCache& cache, std::span<const double> dy, std::span<double> dx);

  void zero_grad();
  void collect(const std::string& prefix, std::vector<ParamRef>& out);

 private:
  Tensor2 w1_, b1_, w2_, b2_;
  Tensor2 gw1_, gb1_, gw2_, gb2_;
};

// ---------------------------------------------------------------------------
// Optimization

// Bias-corrected Adam with decoupled weight decay. Throws TrainingError if any
// gradient is non-finite; parameters are untouched in that case.
void adam_step(AdamState& state, std::span<const ParamRef> params);

void zero_grads(std::span<const ParamRef> params);
void scale_grads(std::span<const ParamRef> params, double factor);

// loss(true) must compute the loss and accumulate analytic gradients into the
// ParamRef grads (which this function zeroes first); loss(false) must compute
// the loss only. Returns max |analytic - central difference| / max(1, |analytic|).
double grad_check(const std::function<double(bool)>& loss, std::span<const ParamRef> params,
                  double h);

// ---------------------------------------------------------------------------
// Checkpoint container.
//
// Layout: a text header
//   slategen-params 1
//   <count>
//   <name> <rows> <cols>     (count lines)
//   end
// followed by little-endian IEEE-754 binary64 values of every tensor in
// declaration order.

struct NamedTensor {
  std::string name;
  const Tensor2* value;
};

void write_params(std::ostream& os, std::span<const NamedTensor> tensors);
void save_params(const std::string& path, std::span<const NamedTensor> tensors);
std::vector<std::pair<std::string, Tensor2>> read_params(std::istream& is);
std::vector<std::pair<std::string, Tensor2>> load_params(const std::string& path);
// Copies loaded tensors into same-named destinations; shapes must match.
void assign_params(const std::vector<std::pair<std::string, Tensor2>>& loaded,
                   std::span<const ParamRef> dest);

// Optimizer sidecar: key=value lines (lr, beta1, beta2, eps, weight_decay, step).
void save_adam_sidecar(const std::string& path, const AdamState& state);
AdamState load_adam_sidecar(const std::string& path);

}  // namespace numkit
}  // namespace slategen
