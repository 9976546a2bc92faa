#include "slategen/numkit.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

namespace slategen {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace numkit {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ContractError(what);
}

}  // namespace

Tensor2 Tensor2::from_rows(const std::vector<std::vector<double>>& rows) {
  Tensor2 t(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r].size() == t.cols, "Tensor2::from_rows: ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), t.row(r).begin());
  }
  return t;
}

Tensor2 Tensor2::gaussian(std::size_t r, std::size_t c, double mean, double stddev, Rng& rng) {
  Tensor2 t(r, c);
  if (stddev == 0.0) {
    t.fill(mean);
    return t;
  }
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

std::vector<double> affine_apply(const Tensor2& w, std::span<const double> b,
                                 std::span<const double> x) {
  require(w.cols == x.size(), "affine_apply: cols(W) != len(x)");
  require(w.rows == b.size(), "affine_apply: len(b) != rows(W)");
  std::vector<double> y(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* wr = w.data.data() + r * w.cols;
    double s = b[r];
    for (std::size_t c = 0; c < w.cols; ++c) s += wr[c] * x[c];
    y[r] = s;
  }
  return y;
}

void affine_backward(const Tensor2& w, std::span<const double> x, std::span<const double> dy,
                     Tensor2& dw, std::span<double> db, std::span<double> dx) {
  require(dy.size() == w.rows && x.size() == w.cols, "affine_backward: shape mismatch");
  if (!dx.empty()) {
    require(dx.size() == w.cols, "affine_backward: dx length");
    std::fill(dx.begin(), dx.end(), 0.0);
  }
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    double* dwr = dw.data.data() + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) dwr[c] += g * x[c];
    if (!db.empty()) db[r] += g;
    if (!dx.empty()) {
      const double* wr = w.data.data() + r * w.cols;
      for (std::size_t c = 0; c < w.cols; ++c) dx[c] += g * wr[c];
    }
  }
}

double gaussian_kl(const GaussianParams& q, const GaussianParams& p) {
  require(q.mean.size() == p.mean.size() && q.logvar.size() == p.logvar.size() &&
              q.mean.size() == q.logvar.size(),
          "gaussian_kl: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double diff = q.mean[i] - p.mean[i];
    kl += (p.logvar[i] - q.logvar[i]) +
          (std::exp(q.logvar[i]) + diff * diff) * std::exp(-p.logvar[i]) - 1.0;
  }
  return std::max(0.0, 0.5 * kl);
}

void gaussian_kl_backward(const GaussianParams& q, const GaussianParams& p, double scale,
                          GaussianParams& dq, GaussianParams& dp) {
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double diff = q.mean[i] - p.mean[i];
    const double inv_vp = std::exp(-p.logvar[i]);
    const double vq = std::exp(q.logvar[i]);
    dq.mean[i] += scale * diff * inv_vp;
    dp.mean[i] -= scale * diff * inv_vp;
    dq.logvar[i] += scale * 0.5 * (vq * inv_vp - 1.0);
    dp.logvar[i] += scale * 0.5 * (1.0 - (vq + diff * diff) * inv_vp);
  }
}

GaussianParams split_gaussian(std::span<const double> packed) {
  require(packed.size() % 2 == 0, "split_gaussian: odd length");
  const std::size_t m = packed.size() / 2;
  GaussianParams g;
  g.mean.assign(packed.begin(), packed.begin() + m);
  g.logvar.resize(m);
  for (std::size_t i = 0; i < m; ++i)
    g.logvar[i] = std::clamp(packed[m + i], kLogvarMin, kLogvarMax);
  return g;
}

void split_gaussian_backward(std::span<const double> packed, const GaussianParams& dg,
                             std::span<double> dpacked) {
  const std::size_t m = packed.size() / 2;
  for (std::size_t i = 0; i < m; ++i) {
    dpacked[i] = dg.mean[i];
    const double lv = packed[m + i];
    dpacked[m + i] = (lv >= kLogvarMin && lv <= kLogvarMax) ? dg.logvar[i] : 0.0;
  }
}

std::vector<double> reparameterize(const GaussianParams& g, std::span<const double> noise) {
  require(noise.size() == g.mean.size(), "reparameterize: noise length");
  std::vector<double> z(g.mean.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (noise[i] == 0.0) {
      z[i] = g.mean[i];
    } else {
      z[i] = g.mean[i] + std::exp(0.5 * g.logvar[i]) * noise[i];
    }
  }
  return z;
}

void reparameterize_backward(const GaussianParams& g, std::span<const double> noise,
                             std::span<const double> dz, GaussianParams& dg) {
  for (std::size_t i = 0; i < dz.size(); ++i) {
    dg.mean[i] += dz[i];
    dg.logvar[i] += dz[i] * noise[i] * 0.5 * std::exp(0.5 * g.logvar[i]);
  }
}

double sampled_softmax_ce(double target_logit, std::span<const double> negative_logits) {
  require(!negative_logits.empty(), "sampled_softmax_ce: no negatives");
  double mx = target_logit;
  for (double n : negative_logits) mx = std::max(mx, n);
  double sum = std::exp(target_logit - mx);
  for (double n : negative_logits) sum += std::exp(n - mx);
  return std::log(sum) - (target_logit - mx);
}

double sampled_softmax_ce(double target_logit, std::span<const double> negative_logits,
                          double& d_target, std::span<double> d_negatives) {
  require(!negative_logits.empty(), "sampled_softmax_ce: no negatives");
  require(d_negatives.size() == negative_logits.size(), "sampled_softmax_ce: grad length");
  double mx = target_logit;
  for (double n : negative_logits) mx = std::max(mx, n);
  const double et = std::exp(target_logit - mx);
  double sum = et;
  for (std::size_t i = 0; i < negative_logits.size(); ++i) {
    d_negatives[i] = std::exp(negative_logits[i] - mx);
    sum += d_negatives[i];
  }
  for (auto& d : d_negatives) d /= sum;
  d_target = et / sum - 1.0;
  return std::log(sum) - (target_logit - mx);
}

double bce_with_logit(double logit, double label, double* d_logit) {
  if (d_logit) *d_logit = sigmoid(logit) - label;
  // -(y log s + (1-y) log(1-s)) = softplus(x) - y x
  return softplus(logit) - label * logit;
}

// ---------------------------------------------------------------------------

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
    : w1_(hidden, in), b1_(1, hidden), w2_(out, hidden), b2_(1, out),
      gw1_(hidden, in), gb1_(1, hidden), gw2_(out, hidden), gb2_(1, out) {
  const double a1 = 1.0 / std::sqrt(static_cast<double>(in));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  std::uniform_real_distribution<double> u1(-a1, a1), u2(-a2, a2);
  for (auto& v : w1_.data) v = u1(rng);
  for (auto& v : b1_.data) v = u1(rng);
  for (auto& v : w2_.data) v = u2(rng);
  for (auto& v : b2_.data) v = u2(rng);
}

std::vector<double> Mlp::forward(std::span<const double> x, MlpCache* cache) const {
  std::vector<double> pre = affine_apply(w1_, b1_.data, x);
  std::vector<double> h(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) h[i] = pre[i] > 0.0 ? pre[i] : 0.0;
  std::vector<double> y = affine_apply(w2_, b2_.data, h);
  if (cache) {
    cache->input.assign(x.begin(), x.end());
    cache->hidden_pre = std::move(pre);
    cache->hidden = std::move(h);
  }
  return y;
}

void Mlp::backward(const MlpCache& cache, std::span<const double> dy, std::span<double> dx) {
  std::vector<double> dh(hidden_dim());
  affine_backward(w2_, cache.hidden, dy, gw2_, gb2_.data, dh);
  for (std::size_t i = 0; i < dh.size(); ++i)
    if (cache.hidden_pre[i] <= 0.0) dh[i] = 0.0;
  affine_backward(w1_, cache.input, dh, gw1_, gb1_.data, dx);
}

void Mlp::zero_grad() {
  gw1_.fill(0.0);
  gb1_.fill(0.0);
  gw2_.fill(0.0);
  gb2_.fill(0.0);
}

void Mlp::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w1", &w1_, &gw1_});
  out.push_back({prefix + ".b1", &b1_, &gb1_});
  out.push_back({prefix + ".w2", &w2_, &gw2_});
  out.push_back({prefix + ".b2", &b2_, &gb2_});
}

// ---------------------------------------------------------------------------

void zero_grads(std::span<const ParamRef> params) {
  for (const auto& p : params) p.grad->fill(0.0);
}

void scale_grads(std::span<const ParamRef> params, double factor) {
  for (const auto& p : params)
    for (auto& g : p.grad->data) g *= factor;
}

void adam_step(AdamState& state, std::span<const ParamRef> params) {
  for (const auto& p : params) {
    require(p.value->size() == p.grad->size(), "adam_step: grad/param size mismatch");
    for (double g : p.grad->data)
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in " + p.name);
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.value->size(), 0.0);
      state.second_moment.emplace_back(p.value->size(), 0.0);
    }
  }
  require(state.first_moment.size() == params.size(), "adam_step: state not aligned with params");

  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    auto& w = params[k].value->data;
    const auto& g = params[k].grad->data;
    require(m.size() == w.size(), "adam_step: moment size mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + c.eps);
      if (c.weight_decay != 0.0) update += c.weight_decay * w[i];
      w[i] -= c.lr * update;
    }
  }
}

double grad_check(const std::function<double(bool)>& loss, std::span<const ParamRef> params,
                  double h) {
  require(h > 0.0, "grad_check: h must be positive");
  zero_grads(params);
  loss(true);
  double worst = 0.0;
  for (const auto& p : params) {
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      double& w = p.value->data[i];
      const double saved = w;
      w = saved + h;
      const double up = loss(false);
      w = saved - h;
      const double down = loss(false);
      w = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad->data[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kMagic = "slategen-params";

void write_le_double(std::ostream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

double read_le_double(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw std::runtime_error("parameter container truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_params(std::ostream& os, std::span<const NamedTensor> tensors) {
  os << kMagic << " 1\n" << tensors.size() << "\n";
  for (const auto& t : tensors) {
    require(t.name.find_first_of(" \t\n") == std::string::npos,
            "write_params: tensor names may not contain whitespace");
    os << t.name << ' ' << t.value->rows << ' ' << t.value->cols << "\n";
  }
  os << "end\n";
  for (const auto& t : tensors)
    for (double v : t.value->data) write_le_double(os, v);
}

void save_params(const std::string& path, std::span<const NamedTensor> tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_params(os, tensors);
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<std::pair<std::string, Tensor2>> read_params(std::istream& is) {
  std::string magic, line;
  int version = 0;
  std::size_t count = 0;
  is >> magic >> version >> count;
  if (!is || magic != kMagic || version != 1)
    throw std::runtime_error("not a slategen parameter container");
  std::vector<std::pair<std::string, Tensor2>> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    std::size_t r = 0, c = 0;
    is >> name >> r >> c;
    if (!is) throw std::runtime_error("malformed parameter header");
    out.emplace_back(name, Tensor2(r, c));
  }
  std::string end;
  is >> end;
  if (end != "end") throw std::runtime_error("malformed parameter header terminator");
  is.get();  // newline
  for (auto& [name, t] : out)
    for (auto& v : t.data) v = read_le_double(is);
  return out;
}

std::vector<std::pair<std::string, Tensor2>> load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_params(is);
}

void assign_params(const std::vector<std::pair<std::string, Tensor2>>& loaded,
                   std::span<const ParamRef> dest) {
  std::map<std::string, const Tensor2*> by_name;
  for (const auto& [name, t] : loaded) by_name[name] = &t;
  for (const auto& p : dest) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint missing tensor " + p.name);
    if (it->second->rows != p.value->rows || it->second->cols != p.value->cols)
      throw std::runtime_error("checkpoint shape mismatch for " + p.name);
    *p.value = *it->second;
  }
}

void save_adam_sidecar(const std::string& path, const AdamState& state) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.precision(17);
  os << "lr=" << state.config.lr << "\n"
     << "beta1=" << state.config.beta1 << "\n"
     << "beta2=" << state.config.beta2 << "\n"
     << "eps=" << state.config.eps << "\n"
     << "weight_decay=" << state.config.weight_decay << "\n"
     << "step=" << state.step << "\n";
}

AdamState load_adam_sidecar(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  AdamState s;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "lr") s.config.lr = std::stod(val);
    else if (key == "beta1") s.config.beta1 = std::stod(val);
    else if (key == "beta2") s.config.beta2 = std::stod(val);
    else if (key == "eps") s.config.eps = std::stod(val);
    else if (key == "weight_decay") s.config.weight_decay = std::stod(val);
    else if (key == "step") s.step = std::stoull(val);
  }
  return s;
}

}  // namespace numkit
}  // namespace slategen
