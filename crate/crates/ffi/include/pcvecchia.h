#ifndef PCVECCHIA_H
#define PCVECCHIA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum PcvStatus {
  PCV_STATUS_OK = 0,
  PCV_STATUS_NULL_POINTER = 1,
  PCV_STATUS_INVALID_ARGUMENT = 2,
  // The factor has a zero diagonal entry where an inverse is needed.
  PCV_STATUS_NOT_POSITIVE_DEFINITE = 3,
  PCV_STATUS_BREAKDOWN = 4,
  PCV_STATUS_IO = 5,
  PCV_STATUS_FORMAT = 6,
  PCV_STATUS_PANIC = 7,
} PcvStatus;

typedef enum PcvPivotRule {
  // Randomly pivoted Cholesky.
  PCV_PIVOT_RULE_RPC = 0,
  // Squared-distance sampling.
  PCV_PIVOT_RULE_SDS = 1,
  // Greedy largest residual diagonal.
  PCV_PIVOT_RULE_CPC = 2,
  // Farthest point sampling.
  PCV_PIVOT_RULE_FPS = 3,
} PcvPivotRule;

typedef enum PcvSparsityRule {
  PCV_SPARSITY_RULE_NEAREST_NEIGHBORS = 0,
  // Orthogonal matching pursuit.
  PCV_SPARSITY_RULE_OMP = 1,
} PcvSparsityRule;

// Sparse inverse-Cholesky approximation of a matrix.
typedef struct PcvFactor PcvFactor;

// Symmetric PSD matrix, stored or evaluated entrywise.
typedef struct PcvOracle PcvOracle;

typedef struct PcvBuildOptions {
  enum PcvPivotRule pivot_rule;
  // Partial Cholesky rank.
  size_t rank;
  enum PcvSparsityRule sparsity_rule;
  // Residual entries kept per row.
  size_t q;
  // Candidate pool per row; 0 means `10 q`.
  size_t candidates;
  uint64_t seed;
} PcvBuildOptions;

typedef struct PcvSolveReport {
  size_t iterations;
  bool converged;
  // `|b - A x| / |b|` from the recurrence; 0 when `b` is zero.
  double relative_residual;
} PcvSolveReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *pcv_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *pcv_version(void);

// Wraps a row-major `n x n` matrix, which must be exactly symmetric. The
// values are copied.
//
// # Safety
// `values` must point to `n * n` readable doubles and `out` to writable
// storage for one pointer.
enum PcvStatus pcv_oracle_dense(size_t n, const double *values, struct PcvOracle **out);

// Gaussian kernel `exp(-|x - y|^2 / (2 d)) + mu * [i == j]` on `n` points
// of dimension `d`, given row-major. The points are copied; entries are
// computed on demand.
//
// # Safety
// `points` must point to `n * d` readable doubles and `out` to writable
// storage for one pointer.
enum PcvStatus pcv_oracle_rbf(const double *points,
                              size_t n,
                              size_t d,
                              double mu,
                              struct PcvOracle **out);

// Dimension of the matrix, or 0 for a null handle.
//
// # Safety
// `oracle` must be null or a live handle.
size_t pcv_oracle_dim(const struct PcvOracle *oracle);

// Writes `A v` to `out`.
//
// # Safety
// `v` and `out` must each hold `n` doubles, `n` the oracle dimension.
enum PcvStatus pcv_oracle_matvec(const struct PcvOracle *oracle,
                                 const double *v,
                                 double *out,
                                 size_t n);

// # Safety
// `oracle` must be null or a handle not yet freed.
void pcv_oracle_free(struct PcvOracle *oracle);

// RPC pivots of rank `floor(sqrt(n))`, OMP with `q = floor(n^(1/4))`.
struct PcvBuildOptions pcv_build_options_default(size_t n);

// Builds the hybrid approximation: partial Cholesky of rank
// `options->rank` followed by a sparse residual factor with `options->q`
// entries per row.
//
// # Safety
// `oracle` must be a live handle, `options` readable and `out` writable.
enum PcvStatus pcv_factor_build(const struct PcvOracle *oracle,
                                const struct PcvBuildOptions *options,
                                struct PcvFactor **out);

// # Safety
// `factor` must be null or a live handle.
size_t pcv_factor_dim(const struct PcvFactor *factor);

// `log det` of the approximation.
//
// # Safety
// `factor` must be a live handle and `out` writable.
enum PcvStatus pcv_factor_logdet(const struct PcvFactor *factor, double *out);

// Writes `Ahat v` to `out`.
//
// # Safety
// `v` and `out` must each hold `n` doubles, `n` the factor dimension.
enum PcvStatus pcv_factor_matvec(const struct PcvFactor *factor,
                                 const double *v,
                                 double *out,
                                 size_t n);

// Writes `Ahat^+ b` to `out`.
//
// # Safety
// `b` and `out` must each hold `n` doubles, `n` the factor dimension.
enum PcvStatus pcv_factor_solve(const struct PcvFactor *factor,
                                const double *b,
                                double *out,
                                size_t n);

// Kaporin condition number `log kappa` of the factor against the matrix.
// Writes infinity when the ranges differ.
//
// # Safety
// Both handles must be live and `out` writable.
enum PcvStatus pcv_factor_log_kappa(const struct PcvOracle *oracle,
                                    const struct PcvFactor *factor,
                                    double *out);

// # Safety
// `factor` must be a live handle and `path` a NUL-terminated string.
enum PcvStatus pcv_factor_save(const struct PcvFactor *factor, const char *path);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum PcvStatus pcv_factor_load(const char *path, struct PcvFactor **out);

// # Safety
// `factor` must be null or a handle not yet freed.
void pcv_factor_free(struct PcvFactor *factor);

// Preconditioned conjugate gradient for `A x = b`, starting from the
// contents of `x`. Stops when the relative residual drops below `tol` or
// after `max_iter` iterations; the latter is not an error.
//
// # Safety
// Handles must be live, `b` and `x` must hold `n` doubles, `report` must be
// null or writable.
enum PcvStatus pcv_pcg(const struct PcvOracle *oracle,
                       const struct PcvFactor *factor,
                       const double *b,
                       double *x,
                       size_t n,
                       double tol,
                       size_t max_iter,
                       struct PcvSolveReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCVECCHIA_H */
