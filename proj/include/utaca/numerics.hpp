#pragma once

// Dense vector/matrix primitives shared by the decoders and the detector.
// Everything is 64-bit and evaluated in a fixed summation order so that
// identical inputs always produce bit-identical outputs.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace utaca {

using Vec = std::vector<double>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row-major dense matrix.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0);
  Mat(std::size_t rows, std::size_t cols, std::vector<double> values);
  Mat(std::initializer_list<std::initializer_list<double>> rows);

  static Mat identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool operator==(const Mat&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

double dot(std::span<const double> a, std::span<const double> b);

/// y = m * x
Vec matvec(const Mat& m, std::span<const double> x);
/// y = m * x + b
Vec affine(const Mat& m, std::span<const double> x, std::span<const double> b);
/// y += m^T * d  (backprop through a linear map)
void matvec_transposed_acc(const Mat& m, std::span<const double> d, std::span<double> y);
/// g += d * x^T
void outer_acc(Mat& g, std::span<const double> d, std::span<const double> x);

void add_inplace(std::span<double> y, std::span<const double> x);
void scale_inplace(std::span<double> y, double s);

Vec softmax(std::span<const double> x);
Vec log_softmax(std::span<const double> x);

inline constexpr double kLayerNormEps = 1e-5;

Vec layer_norm(std::span<const double> x, std::span<const double> gamma,
               std::span<const double> beta, double eps = kLayerNormEps);

/// tanh-approximation GELU.
double gelu(double x);
double gelu_derivative(double x);
double sigmoid(double x);

std::size_t argmax(std::span<const double> x);
bool all_finite(std::span<const double> x);

/// Deterministic engine seeded from a list of integers.
std::mt19937_64 seeded_engine(std::initializer_list<std::uint64_t> keys);

Vec random_normal(std::mt19937_64& rng, std::size_t n, double stddev);
Vec random_unit(std::mt19937_64& rng, std::size_t n);
Mat random_uniform(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double bound);

}  // namespace utaca
