#pragma once

#include "islice/model.hpp"

#include <iosfwd>
#include <optional>
#include <vector>

namespace islice {

struct FfnTransforms {
    Mat qc;  // D_inter x P; 0/1 selection initially, possibly dense after iteration
    Mat qr;  // P x D_inter
};

struct SliceSchedule {
    int slice_width = 16;
    int sweeps = 4;
    int steps_per_slice = 8;
    bool enabled = false;
    double amplitude_bound = 1.0;
    bool linear_probe = false;  // drop the gating nonlinearity (oracle tests)
    std::optional<double> ridge_lambda;  // nullopt: exact solve, auto-damped on singularity
};

struct SliceTraceEntry {
    int sweep = 0;   // 0 = initialization
    int slice = -1;  // -1 = initialization / Qr re-solve events
    double objective = 0.0;
};

Vec ffn_channel_importance(const Mat& xd_gram, const Mat& wd);

// Top-P channels by importance as a 0/1 selection, ties to the lower index.
Mat init_qc_select(const Vec& importance, int p);
Mat init_qc_select(const Mat& xd_gram, const Mat& wd, int p);

bool is_selection_matrix(const Mat& qc);

// The compressed intermediate f(X qc): column slices of X_d for a selection
// qc, otherwise (U qc) .* silu(G qc).
Mat compressed_intermediate(const Mat& out_u, const Mat& out_g, const Mat& xd,
                            const Mat& qc, bool linear_probe = false);

Mat solve_qr(const Mat& qc, const Mat& out_u, const Mat& out_g, const Mat& xd,
             std::optional<double> lambda, bool linear_probe = false);
// Selection-only fast path from the X_d Gram.
Mat solve_qr_gram(const Mat& qc, const Mat& xd_gram, std::optional<double> lambda);

// ||X_d - f(X qc) qr||_F^2 on the given rows.
double ffn_objective(const Mat& out_u, const Mat& out_g, const Mat& xd, const Mat& qc,
                     const Mat& qr, bool linear_probe = false);

struct SliceState {
    int slice_width = 0;
    Mat c_u;  // contributions of all other slices to the up stream
    Mat c_g;  // same for the gate stream
    Mat y_r;  // target X_d qr^+
};

// Projected gradient descent with backtracking on one slice block. Never
// returns a block with higher proxy objective; a non-finite objective aborts
// the slice and keeps the previous block.
Mat slice_optimize_qc(const SliceState& state, const Mat& u_slice, const Mat& g_slice,
                      const Mat& q_block, int steps, double amplitude_bound,
                      bool linear_probe);

FfnTransforms iterate_pca(const Mat& out_u, const Mat& out_g, const Mat& xd_rows,
                          const Mat& xd_gram, const Mat& wd, int target_p,
                          const SliceSchedule& sched,
                          std::vector<SliceTraceEntry>* trace = nullptr,
                          std::ostream* log = nullptr);

void fuse_ffn(Checkpoint& ckpt, int layer, const FfnTransforms& t);

}  // namespace islice
