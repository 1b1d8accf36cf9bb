#pragma once

#include "dropedge/common.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <vector>

namespace dropedge {

/// Compressed-sparse-row real matrix.
///
/// Backed by a compressed row-major Eigen::SparseMatrix. Every constructor
/// leaves the storage compressed, with column indices strictly increasing
/// inside each row and no explicitly stored zeros.
template <typename Scalar>
class CsrMatrix {
 public:
  using StorageIndex = int;
  using Storage = Eigen::SparseMatrix<Scalar, Eigen::RowMajor, StorageIndex>;
  using Triplet = Eigen::Triplet<Scalar, StorageIndex>;

  CsrMatrix() = default;

  CsrMatrix(Index rows, Index cols) : storage_(rows, cols) {
    storage_.makeCompressed();
  }

  explicit CsrMatrix(Storage storage) : storage_(std::move(storage)) {
    canonicalize();
  }

  /// Duplicate (row, col) entries are summed, then zeros are pruned.
  static CsrMatrix from_triplets(Index rows, Index cols,
                                 std::span<const Triplet> triplets) {
    for (const auto& t : triplets) {
      if (t.row() < 0 || t.row() >= rows || t.col() < 0 || t.col() >= cols) {
        throw DimensionError("CsrMatrix: triplet index out of range");
      }
    }
    Storage s(rows, cols);
    s.setFromTriplets(triplets.begin(), triplets.end());
    return CsrMatrix(std::move(s));
  }

  template <typename Derived>
  static CsrMatrix from_dense(const Eigen::MatrixBase<Derived>& dense) {
    return CsrMatrix(Storage(dense.sparseView()));
  }

  static CsrMatrix identity(Index n) {
    Storage s(n, n);
    s.setIdentity();
    return CsrMatrix(std::move(s));
  }

  Index rows() const { return storage_.rows(); }
  Index cols() const { return storage_.cols(); }
  Index nnz() const { return storage_.nonZeros(); }
  bool is_square() const { return rows() == cols(); }

  std::span<const StorageIndex> row_offsets() const {
    return {storage_.outerIndexPtr(), static_cast<std::size_t>(rows() + 1)};
  }
  std::span<const StorageIndex> col_indices() const {
    return {storage_.innerIndexPtr(), static_cast<std::size_t>(nnz())};
  }
  std::span<const Scalar> values() const {
    return {storage_.valuePtr(), static_cast<std::size_t>(nnz())};
  }

  std::span<const StorageIndex> row_indices(Index row) const {
    const auto off = row_offsets();
    return col_indices().subspan(off[row], off[row + 1] - off[row]);
  }
  std::span<const Scalar> row_values(Index row) const {
    const auto off = row_offsets();
    return values().subspan(off[row], off[row + 1] - off[row]);
  }

  Scalar coeff(Index row, Index col) const { return storage_.coeff(row, col); }

  const Storage& eigen() const { return storage_; }

  Matrix<Scalar> to_dense() const { return Matrix<Scalar>(storage_); }

  CsrMatrix transpose() const { return CsrMatrix(Storage(storage_.transpose())); }

  /// Structural and numerical symmetry, values compared to `tol`.
  bool is_symmetric(Scalar tol = Scalar(0)) const {
    if (!is_square()) return false;
    const Storage t = storage_.transpose();
    if (t.nonZeros() != nnz()) return false;
    for (Index r = 0; r < rows(); ++r) {
      typename Storage::InnerIterator a(storage_, r), b(t, r);
      for (; a && b; ++a, ++b) {
        if (a.col() != b.col() || std::abs(a.value() - b.value()) > tol) return false;
      }
      if (a || b) return false;
    }
    return true;
  }

  template <typename Derived>
  Matrix<Scalar> operator*(const Eigen::MatrixBase<Derived>& dense) const {
    if (dense.rows() != cols()) throw DimensionError("CsrMatrix * dense: inner dimension mismatch");
    return storage_ * dense;
  }

  /// Exact equality of shape, structure and values.
  friend bool operator==(const CsrMatrix& a, const CsrMatrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols() || a.nnz() != b.nnz()) return false;
    return std::ranges::equal(a.row_offsets(), b.row_offsets()) &&
           std::ranges::equal(a.col_indices(), b.col_indices()) &&
           std::ranges::equal(a.values(), b.values());
  }

 private:
  void canonicalize() {
    storage_.prune(Scalar(0), Scalar(0));
    storage_.makeCompressed();
    // A transposed copy of a transposed copy has sorted inner indices.
    const auto off = row_offsets();
    const auto col = col_indices();
    for (Index r = 0; r < rows(); ++r) {
      for (auto k = off[r] + 1; k < off[r + 1]; ++k) {
        if (col[k - 1] >= col[k]) {
          storage_ = Storage(Storage(storage_.transpose()).transpose());
          storage_.makeCompressed();
          return;
        }
      }
    }
  }

  Storage storage_;
};

using SparseMatrix = CsrMatrix<double>;
using SharedSparse = std::shared_ptr<const SparseMatrix>;

}  // namespace dropedge
