#pragma once

#include "islice/types.hpp"

#include <optional>
#include <vector>

namespace islice {

// Streaming accumulator for X^T X over row batches.
struct GramAccumulator {
    int dim = 0;
    Mat gram;
    long samples = 0;

    GramAccumulator() = default;
    explicit GramAccumulator(int d) : dim(d), gram(Mat::Zero(d, d)) {}

    void add(const Mat& x);
    // (G + G^T)/2; accumulation drift is killed before any eigensolve.
    Mat symmetrized() const;
};

// Full spectrum of a symmetric matrix, eigenvalues descending, eigenvectors
// as columns in matching order.
struct EigenSystem {
    Vec values;
    Mat vectors;
};

// Square diagonal blocks laid out along the diagonal of an otherwise zero
// matrix. Blocks may be rectangular (rows != cols), offsets are cumulative.
struct BlockDiagonal {
    struct Block {
        int row_offset = 0;
        int col_offset = 0;
        Mat m;
    };
    std::vector<Block> blocks;

    void push(Mat b);
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    Mat dense() const;
    // x * B with x of width rows().
    Mat apply_right(const Mat& x) const;

  private:
    int rows_ = 0;
    int cols_ = 0;
};

EigenSystem sym_eig(const Mat& g, double sym_tol = 1e-8);

// Top-p eigenvector basis (dim x p), columns orthonormal.
Mat pca_basis(const Mat& gram, int p);
Mat pca_basis(const GramAccumulator& g, int p);

// (A^T A + lambda I)^{-1} A^T B. Throws NumericalError when lambda == 0 and
// the normal matrix is singular; callers retry with auto damping.
Mat ridge_solve(const Mat& a, const Mat& b, double lambda);
// Same solve given the normal matrix A^T A and right-hand side A^T B.
Mat ridge_solve_normal(const Mat& ata, const Mat& atb, double lambda);
// Relative damping used when a caller asks for "auto": 0.01 * mean(diag(A^T A)).
double auto_ridge_lambda(const Mat& ata);

// Policy wrapper: an explicit lambda is used as-is; with no lambda the solve
// is attempted exactly first and retried with auto damping on singularity.
Mat ridge_solve_policy(const Mat& a, const Mat& b, std::optional<double> lambda);
Mat ridge_solve_normal_policy(const Mat& ata, const Mat& atb, std::optional<double> lambda);

// Moore-Penrose pseudo-inverse via the eigendecomposition of Q^T Q or Q Q^T,
// whichever is smaller. Singular values below 1e-10 * max are truncated.
Mat pseudo_inverse(const Mat& q);

// Smallest k with sum(values[:k]) >= tau * sum(values); 0 for a zero spectrum.
int energy_rank(const Vec& values_desc, double tau);

}  // namespace islice
