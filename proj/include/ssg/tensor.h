#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ssg {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(size_t rows, size_t cols);
  // Throws ShapeError if data.size() != rows * cols.
  Matrix(size_t rows, size_t cols, std::vector<double> data);

  static Matrix Identity(size_t n);

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  double operator()(size_t r, size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(size_t r, size_t c) { return data_[r * cols_ + c]; }
  std::span<const double> row(size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row(size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }

  Matrix Transposed() const;

  bool operator==(const Matrix&) const = default;

 private:
  size_t rows_ = 0;
  size_t cols_ = 0;
  std::vector<double> data_;
};

// B x T x D activation tensor, row-major with channels fastest.
class TokenTensor {
 public:
  TokenTensor() = default;
  // Zero-filled. Throws ShapeError unless batch, tokens, channels >= 1.
  TokenTensor(size_t batch, size_t tokens, size_t channels);
  TokenTensor(size_t batch, size_t tokens, size_t channels,
              std::vector<double> data);

  size_t batch() const { return batch_; }
  size_t tokens() const { return tokens_; }
  size_t channels() const { return channels_; }
  size_t size() const { return data_.size(); }
  size_t instance_size() const { return tokens_ * channels_; }

  double operator()(size_t b, size_t t, size_t d) const {
    return data_[(b * tokens_ + t) * channels_ + d];
  }
  double& operator()(size_t b, size_t t, size_t d) {
    return data_[(b * tokens_ + t) * channels_ + d];
  }

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }
  std::span<const double> instance(size_t b) const {
    return {data_.data() + b * instance_size(), instance_size()};
  }
  std::span<double> instance(size_t b) {
    return {data_.data() + b * instance_size(), instance_size()};
  }

  // T x D view of one batch element, copied.
  Matrix InstanceMatrix(size_t b) const;
  // (B, T, D) -> (B, D, T).
  TokenTensor Transposed() const;
  // Batch elements [begin, begin + count).
  TokenTensor Slice(size_t begin, size_t count) const;
  // Concatenation along the batch axis.
  static TokenTensor Concat(const TokenTensor& a, const TokenTensor& b);

  bool SameShape(const TokenTensor& other) const {
    return batch_ == other.batch_ && tokens_ == other.tokens_ &&
           channels_ == other.channels_;
  }
  bool operator==(const TokenTensor&) const = default;

 private:
  size_t batch_ = 0;
  size_t tokens_ = 0;
  size_t channels_ = 0;
  std::vector<double> data_;
};

// Throws NumericalError naming `what` if any entry is NaN or infinite.
void CheckFinite(std::span<const double> values, const char* what);

// Rows scaled to unit L2 norm; rows with norm < eps become all-zero.
Matrix L2NormalizeRows(const Matrix& m, double eps);

// Pairwise cosine similarity between rows. Exactly symmetric. Rows with
// (near-)zero norm have similarity 0 with every row, themselves included.
Matrix CosineSimilarityMatrix(const Matrix& m);

Matrix MatMul(const Matrix& a, const Matrix& b);
Matrix SoftmaxRows(const Matrix& m);

// Per-token normalization over channels followed by the affine map.
TokenTensor LayerNorm(const TokenTensor& x, std::span<const double> gain,
                      std::span<const double> bias, double eps);

TokenTensor Gelu(const TokenTensor& x);

namespace kernels {

// Exact (erf) GELU and its derivative.
double Gelu(double x);
double GeluGrad(double x);
// Both at once; *y is bit-identical to Gelu(x).
void GeluWithGrad(double x, double* y, double* dy);

// y = gain * (x - mean) * rstd + bias over one row. Writes the statistics
// through the out-pointers when non-null.
void LayerNormRow(std::span<const double> x, std::span<const double> gain,
                  std::span<const double> bias, double eps, std::span<double> y,
                  double* mean_out, double* rstd_out);

// Numerically stable in-place softmax over one row.
void SoftmaxInPlace(std::span<double> row);

}  // namespace kernels
}  // namespace ssg
