#include "ssg/tensor.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "eigen_util.h"
#include "ssg/errors.h"

namespace ssg {

Matrix::Matrix(size_t rows, size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(size_t rows, size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                     " != " + std::to_string(rows_) + "x" +
                     std::to_string(cols_));
  }
}

Matrix Matrix::Identity(size_t n) {
  Matrix m(n, n);
  for (size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::Transposed() const {
  Matrix t(cols_, rows_);
  for (size_t r = 0; r < rows_; ++r) {
    for (size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  }
  return t;
}

TokenTensor::TokenTensor(size_t batch, size_t tokens, size_t channels)
    : TokenTensor(batch, tokens, channels,
                  std::vector<double>(batch * tokens * channels, 0.0)) {}

TokenTensor::TokenTensor(size_t batch, size_t tokens, size_t channels,
                         std::vector<double> data)
    : batch_(batch),
      tokens_(tokens),
      channels_(channels),
      data_(std::move(data)) {
  if (batch_ == 0 || tokens_ == 0 || channels_ == 0) {
    throw ShapeError("TokenTensor: every dimension must be >= 1");
  }
  if (data_.size() != batch_ * tokens_ * channels_) {
    throw ShapeError("TokenTensor: data length " +
                     std::to_string(data_.size()) + " != " +
                     std::to_string(batch_) + "x" + std::to_string(tokens_) +
                     "x" + std::to_string(channels_));
  }
}

Matrix TokenTensor::InstanceMatrix(size_t b) const {
  auto span = instance(b);
  return Matrix(tokens_, channels_, std::vector<double>(span.begin(), span.end()));
}

TokenTensor TokenTensor::Transposed() const {
  TokenTensor out(batch_, channels_, tokens_);
  for (size_t b = 0; b < batch_; ++b) {
    for (size_t t = 0; t < tokens_; ++t) {
      for (size_t d = 0; d < channels_; ++d) out(b, d, t) = (*this)(b, t, d);
    }
  }
  return out;
}

TokenTensor TokenTensor::Slice(size_t begin, size_t count) const {
  if (count == 0 || begin + count > batch_) {
    throw ShapeError("TokenTensor::Slice out of range");
  }
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(begin * instance_size());
  return TokenTensor(
      count, tokens_, channels_,
      std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * instance_size())));
}

TokenTensor TokenTensor::Concat(const TokenTensor& a, const TokenTensor& b) {
  if (a.tokens_ != b.tokens_ || a.channels_ != b.channels_) {
    throw ShapeError("TokenTensor::Concat: token/channel shape mismatch");
  }
  std::vector<double> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.data_.begin(), a.data_.end());
  data.insert(data.end(), b.data_.begin(), b.data_.end());
  return TokenTensor(a.batch_ + b.batch_, a.tokens_, a.channels_, std::move(data));
}

void CheckFinite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string("non-finite value in ") + what);
    }
  }
}

Matrix L2NormalizeRows(const Matrix& m, double eps) {
  if (!(eps > 0.0)) throw ShapeError("L2NormalizeRows: eps must be > 0");
  CheckFinite(m.data(), "L2NormalizeRows input");
  Matrix out(m.rows(), m.cols());
  for (size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    double sq = 0.0;
    for (double v : in) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm < eps) continue;
    auto dst = out.row(r);
    for (size_t c = 0; c < in.size(); ++c) dst[c] = in[c] / norm;
  }
  return out;
}

Matrix CosineSimilarityMatrix(const Matrix& m) {
  if (m.rows() < 2) throw ShapeError("CosineSimilarityMatrix: need >= 2 rows");
  const Matrix unit = L2NormalizeRows(m, 1e-12);
  const size_t n = m.rows();
  Matrix sim(n, n);
  for (size_t i = 0; i < n; ++i) {
    auto ri = unit.row(i);
    for (size_t j = i; j < n; ++j) {
      auto rj = unit.row(j);
      double dot = 0.0;
      for (size_t c = 0; c < ri.size(); ++c) dot += ri[c] * rj[c];
      sim(i, j) = dot;
      sim(j, i) = dot;
    }
  }
  return sim;
}

Matrix MatMul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("MatMul: inner dimensions " + std::to_string(a.cols()) +
                     " and " + std::to_string(b.rows()) + " differ");
  }
  Matrix c(a.rows(), b.cols());
  if (a.rows() == 0 || b.cols() == 0) return c;
  RowMap(c.mutable_data().data(), c.rows(), c.cols()).noalias() =
      ConstRowMap(a.data().data(), a.rows(), a.cols()) *
      ConstRowMap(b.data().data(), b.rows(), b.cols());
  CheckFinite(c.data(), "MatMul output");
  return c;
}

Matrix SoftmaxRows(const Matrix& m) {
  CheckFinite(m.data(), "SoftmaxRows input");
  Matrix out = m;
  for (size_t r = 0; r < out.rows(); ++r) kernels::SoftmaxInPlace(out.row(r));
  return out;
}

TokenTensor LayerNorm(const TokenTensor& x, std::span<const double> gain,
                      std::span<const double> bias, double eps) {
  if (gain.size() != x.channels() || bias.size() != x.channels()) {
    throw ShapeError("LayerNorm: gain/bias length must equal channel count");
  }
  if (!(eps > 0.0)) throw ShapeError("LayerNorm: eps must be > 0");
  CheckFinite(x.data(), "LayerNorm input");
  TokenTensor out(x.batch(), x.tokens(), x.channels());
  const size_t d = x.channels();
  const size_t rows = x.batch() * x.tokens();
  for (size_t r = 0; r < rows; ++r) {
    kernels::LayerNormRow(x.data().subspan(r * d, d), gain, bias, eps,
                          out.mutable_data().subspan(r * d, d), nullptr,
                          nullptr);
  }
  return out;
}

TokenTensor Gelu(const TokenTensor& x) {
  CheckFinite(x.data(), "Gelu input");
  TokenTensor out = x;
  for (double& v : out.mutable_data()) v = kernels::Gelu(v);
  return out;
}

namespace kernels {

namespace {
double NormalCdf(double x) { return 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
double NormalPdf(double x) {
  return std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
}
}  // namespace

double Gelu(double x) { return x * NormalCdf(x); }

double GeluGrad(double x) { return NormalCdf(x) + x * NormalPdf(x); }

void GeluWithGrad(double x, double* y, double* dy) {
  const double cdf = NormalCdf(x);
  *y = x * cdf;
  *dy = cdf + x * NormalPdf(x);
}

void LayerNormRow(std::span<const double> x, std::span<const double> gain,
                  std::span<const double> bias, double eps, std::span<double> y,
                  double* mean_out, double* rstd_out) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double rstd = 1.0 / std::sqrt(var + eps);
  for (size_t i = 0; i < x.size(); ++i) {
    y[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
  }
  if (mean_out != nullptr) *mean_out = mean;
  if (rstd_out != nullptr) *rstd_out = rstd;
}

void SoftmaxInPlace(std::span<double> row) {
  if (row.empty()) return;
  const double peak = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - peak);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

}  // namespace kernels
}  // namespace ssg
