#include "utaca/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace utaca {

Mat::Mat(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Mat::Mat(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw DimensionError("Mat: value count does not match shape");
  }
}

Mat::Mat(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  values_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("Mat: ragged initializer");
    values_.insert(values_.end(), r.begin(), r.end());
  }
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vec matvec(const Mat& m, std::span<const double> x) {
  if (m.cols() != x.size()) {
    throw DimensionError("matvec: matrix has " + std::to_string(m.cols()) +
                         " columns but vector has " + std::to_string(x.size()));
  }
  Vec y(m.rows());
  const double* w = m.values().data();
  for (std::size_t i = 0; i < m.rows(); ++i, w += m.cols()) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) s += w[j] * x[j];
    y[i] = s;
  }
  return y;
}

Vec affine(const Mat& m, std::span<const double> x, std::span<const double> b) {
  if (b.size() != m.rows()) throw DimensionError("affine: bias length mismatch");
  Vec y = matvec(m, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

void matvec_transposed_acc(const Mat& m, std::span<const double> d, std::span<double> y) {
  if (d.size() != m.rows() || y.size() != m.cols()) {
    throw DimensionError("matvec_transposed_acc: shape mismatch");
  }
  const double* w = m.values().data();
  for (std::size_t i = 0; i < m.rows(); ++i, w += m.cols()) {
    const double di = d[i];
    if (di == 0.0) continue;
    for (std::size_t j = 0; j < m.cols(); ++j) y[j] += w[j] * di;
  }
}

void outer_acc(Mat& g, std::span<const double> d, std::span<const double> x) {
  if (d.size() != g.rows() || x.size() != g.cols()) {
    throw DimensionError("outer_acc: shape mismatch");
  }
  double* w = g.values().data();
  for (std::size_t i = 0; i < g.rows(); ++i, w += g.cols()) {
    const double di = d[i];
    if (di == 0.0) continue;
    for (std::size_t j = 0; j < g.cols(); ++j) w[j] += di * x[j];
  }
}

void add_inplace(std::span<double> y, std::span<const double> x) {
  if (y.size() != x.size()) throw DimensionError("add_inplace: length mismatch");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
}

void scale_inplace(std::span<double> y, double s) {
  for (double& v : y) v *= s;
}

Vec softmax(std::span<const double> x) {
  if (x.empty()) throw DimensionError("softmax: empty input");
  const double mx = *std::max_element(x.begin(), x.end());
  Vec y(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (double& v : y) v /= sum;
  return y;
}

Vec log_softmax(std::span<const double> x) {
  if (x.empty()) throw DimensionError("log_softmax: empty input");
  const double mx = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (double v : x) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - lse;
  return y;
}

Vec layer_norm(std::span<const double> x, std::span<const double> gamma,
               std::span<const double> beta, double eps) {
  if (x.size() != gamma.size() || x.size() != beta.size()) {
    throw DimensionError("layer_norm: length mismatch");
  }
  if (x.empty()) throw DimensionError("layer_norm: empty input");
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
  return y;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::size_t argmax(std::span<const double> x) {
  if (x.empty()) throw DimensionError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return best;
}

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

std::mt19937_64 seeded_engine(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  words.reserve(keys.size() * 2);
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

Vec random_normal(std::mt19937_64& rng, std::size_t n, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Vec v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

Vec random_unit(std::mt19937_64& rng, std::size_t n) {
  Vec v = random_normal(rng, n, 1.0);
  double norm = std::sqrt(dot(v, v));
  if (norm == 0.0) {
    v[0] = 1.0;
    norm = 1.0;
  }
  scale_inplace(v, 1.0 / norm);
  return v;
}

Mat random_uniform(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat m(rows, cols);
  for (double& x : m.values()) x = dist(rng);
  return m;
}

}  // namespace utaca
