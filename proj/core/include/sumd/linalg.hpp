#pragma once

#include <Eigen/Dense>

#include "sumd/common.hpp"

namespace sumd {

template <class S>
using EigenRowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<EigenRowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const EigenRowMat<S>>;

// C = op(A) * op(B) where op(X) = X^T when the flag is set.
// A is (m x k) pre-op, B is (k x n) pre-op, C is (m x n) post-op, all row-major
// contiguous. Every matrix product in the project funnels through this one
// kernel so that the plain and the autodiff execution paths stay bit-identical.
template <class S>
void gemm(const S* a, int64_t a_rows, int64_t a_cols, bool trans_a,
          const S* b, int64_t b_rows, int64_t b_cols, bool trans_b,
          S* c, bool accumulate = false) {
  ConstMatMap<S> ma(a, a_rows, a_cols);
  ConstMatMap<S> mb(b, b_rows, b_cols);
  const int64_t m = trans_a ? a_cols : a_rows;
  const int64_t ka = trans_a ? a_rows : a_cols;
  const int64_t kb = trans_b ? b_cols : b_rows;
  const int64_t n = trans_b ? b_rows : b_cols;
  if (ka != kb)
    throw ConfigError("gemm: inner dimensions disagree: " + std::to_string(ka) + " vs " +
                      std::to_string(kb));
  MatMap<S> mc(c, m, n);
  if (!trans_a && !trans_b) {
    if (accumulate) mc.noalias() += ma * mb; else mc.noalias() = ma * mb;
  } else if (trans_a && !trans_b) {
    if (accumulate) mc.noalias() += ma.transpose() * mb; else mc.noalias() = ma.transpose() * mb;
  } else if (!trans_a && trans_b) {
    if (accumulate) mc.noalias() += ma * mb.transpose(); else mc.noalias() = ma * mb.transpose();
  } else {
    if (accumulate) mc.noalias() += ma.transpose() * mb.transpose();
    else mc.noalias() = ma.transpose() * mb.transpose();
  }
}

}  // namespace sumd
