#include "islice/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace islice {

void GramAccumulator::add(const Mat& x) {
    if (x.cols() != dim)
        throw DimensionError("gram accumulate: got " + std::to_string(x.cols()) +
                             " columns, accumulator dim is " + std::to_string(dim));
    Mat update = x.transpose() * x;
    gram += 0.5 * (update + update.transpose());
    samples += x.rows();
}

Mat GramAccumulator::symmetrized() const {
    return 0.5 * (gram + gram.transpose());
}

void BlockDiagonal::push(Mat b) {
    Block blk;
    blk.row_offset = rows_;
    blk.col_offset = cols_;
    rows_ += static_cast<int>(b.rows());
    cols_ += static_cast<int>(b.cols());
    blk.m = std::move(b);
    blocks.push_back(std::move(blk));
}

Mat BlockDiagonal::dense() const {
    Mat out = Mat::Zero(rows_, cols_);
    for (const auto& b : blocks)
        out.block(b.row_offset, b.col_offset, b.m.rows(), b.m.cols()) = b.m;
    return out;
}

Mat BlockDiagonal::apply_right(const Mat& x) const {
    if (x.cols() != rows_)
        throw DimensionError("block apply: x has " + std::to_string(x.cols()) +
                             " cols, block rows " + std::to_string(rows_));
    Mat out(x.rows(), cols_);
    for (const auto& b : blocks)
        out.middleCols(b.col_offset, b.m.cols()) =
            x.middleCols(b.row_offset, b.m.rows()) * b.m;
    return out;
}

EigenSystem sym_eig(const Mat& g, double sym_tol) {
    if (g.rows() != g.cols()) throw DimensionError("sym_eig: matrix not square");
    const double scale = std::max(1.0, g.cwiseAbs().maxCoeff());
    const double asym = (g - g.transpose()).cwiseAbs().maxCoeff();
    if (asym > sym_tol * scale)
        throw NumericalError("sym_eig: input asymmetric beyond tolerance (" +
                             std::to_string(asym / scale) + " relative)");

    Mat s = 0.5 * (g + g.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> solver(s);
    if (solver.info() != Eigen::Success)
        throw NumericalError("sym_eig: eigensolver failed to converge");

    const int n = static_cast<int>(g.rows());
    EigenSystem out;
    out.values = Vec(n);
    out.vectors = Mat(n, n);
    // Eigen returns ascending order; flip to descending and fix signs so the
    // largest-magnitude component of each eigenvector is positive.
    for (int i = 0; i < n; ++i) {
        out.values[i] = solver.eigenvalues()[n - 1 - i];
        Vec v = solver.eigenvectors().col(n - 1 - i);
        int arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) v = -v;
        out.vectors.col(i) = v;
    }
    return out;
}

Mat pca_basis(const Mat& gram, int p) {
    if (p < 1 || p > gram.rows())
        throw DimensionError("pca_basis: p=" + std::to_string(p) + " out of range [1, " +
                             std::to_string(gram.rows()) + "]");
    EigenSystem es = sym_eig(gram);
    return es.vectors.leftCols(p);
}

Mat pca_basis(const GramAccumulator& g, int p) {
    return pca_basis(g.symmetrized(), p);
}

Mat ridge_solve_normal(const Mat& ata, const Mat& atb, double lambda) {
    if (lambda < 0) throw DimensionError("ridge: lambda must be nonnegative");
    if (ata.rows() != ata.cols() || ata.rows() != atb.rows())
        throw DimensionError("ridge: inconsistent normal system shapes");

    EigenSystem es = sym_eig(0.5 * (ata + ata.transpose()), 1e-6);
    const double vmax = es.values.size() ? std::max(es.values[0], 0.0) : 0.0;
    if (lambda == 0.0) {
        const double vmin = es.values[es.values.size() - 1];
        if (vmax <= 0.0 || vmin <= 1e-12 * vmax)
            throw NumericalError("ridge: singular normal matrix with lambda = 0");
    }
    Vec inv(es.values.size());
    for (int i = 0; i < inv.size(); ++i) {
        const double v = std::max(es.values[i], 0.0) + lambda;
        inv[i] = v > 0 ? 1.0 / v : 0.0;
    }
    return es.vectors * inv.asDiagonal() * es.vectors.transpose() * atb;
}

Mat ridge_solve(const Mat& a, const Mat& b, double lambda) {
    if (a.rows() != b.rows())
        throw DimensionError("ridge: A and B row counts differ");
    return ridge_solve_normal(a.transpose() * a, a.transpose() * b, lambda);
}

double auto_ridge_lambda(const Mat& ata) {
    const double m = ata.diagonal().mean();
    return m > 0 ? 0.01 * m : 1e-12;
}

Mat ridge_solve_policy(const Mat& a, const Mat& b, std::optional<double> lambda) {
    return ridge_solve_normal_policy(a.transpose() * a, a.transpose() * b, lambda);
}

Mat ridge_solve_normal_policy(const Mat& ata, const Mat& atb, std::optional<double> lambda) {
    if (lambda) return ridge_solve_normal(ata, atb, *lambda);
    try {
        return ridge_solve_normal(ata, atb, 0.0);
    } catch (const NumericalError&) {
        return ridge_solve_normal(ata, atb, auto_ridge_lambda(ata));
    }
}

Mat pseudo_inverse(const Mat& q) {
    if (!q.allFinite()) throw NumericalError("pseudo_inverse: non-finite input");
    const bool tall = q.rows() >= q.cols();
    Mat g = tall ? Mat(q.transpose() * q) : Mat(q * q.transpose());
    EigenSystem es = sym_eig(g);
    const double lmax = es.values.size() ? std::max(es.values[0], 0.0) : 0.0;
    // sigma_i < 1e-10 * sigma_max  <=>  lambda_i < 1e-20 * lambda_max
    const double cut = 1e-20 * lmax;
    Vec inv(es.values.size());
    for (int i = 0; i < inv.size(); ++i)
        inv[i] = es.values[i] > cut && es.values[i] > 0 ? 1.0 / es.values[i] : 0.0;
    Mat core = es.vectors * inv.asDiagonal() * es.vectors.transpose();
    return tall ? Mat(core * q.transpose()) : Mat(q.transpose() * core);
}

int energy_rank(const Vec& values_desc, double tau) {
    if (tau <= 0.0 || tau > 1.0)
        throw DimensionError("energy_rank: tau must lie in (0, 1]");
    const int n = static_cast<int>(values_desc.size());
    double vmax = 0.0;
    for (int i = 0; i < n; ++i) vmax = std::max(vmax, values_desc[i]);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = values_desc[i];
        if (v < -1e-10 * std::max(vmax, 1.0))
            throw NumericalError("energy_rank: negative eigenvalue beyond tolerance");
        if (i > 0 && v > values_desc[i - 1] + 1e-12 * std::max(vmax, 1.0))
            throw DimensionError("energy_rank: values not descending");
        total += std::max(v, 0.0);
    }
    if (total <= 0.0) return 0;
    double prefix = 0.0;
    for (int k = 0; k < n; ++k) {
        prefix += std::max(values_desc[k], 0.0);
        if (prefix >= tau * total - 1e-9 * total) return k + 1;
    }
    return n;
}

}  // namespace islice
