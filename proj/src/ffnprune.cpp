#include "islice/ffnprune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace islice {

namespace {

Mat silu(const Mat& z) {
    return (z.array() / (1.0 + (-z.array()).exp())).matrix();
}

Mat silu_grad(const Mat& z) {
    auto s = 1.0 / (1.0 + (-z.array()).exp());
    return (s * (1.0 + z.array() * (1.0 - s))).matrix();
}

}  // namespace

Vec ffn_channel_importance(const Mat& xd_gram, const Mat& wd) {
    if (xd_gram.rows() != wd.rows())
        throw DimensionError("ffn importance: gram dim must match W_d rows");
    Vec out(wd.rows());
    for (Eigen::Index i = 0; i < wd.rows(); ++i)
        out[i] = std::max(xd_gram(i, i), 0.0) * wd.row(i).squaredNorm();
    return out;
}

Mat init_qc_select(const Vec& importance, int p) {
    const int n = static_cast<int>(importance.size());
    if (p < 1 || p > n)
        throw DimensionError("init_qc_select: P out of range [1, " + std::to_string(n) + "]");
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return importance[a] > importance[b]; });
    Mat qc = Mat::Zero(n, p);
    for (int j = 0; j < p; ++j) qc(order[j], j) = 1.0;
    return qc;
}

Mat init_qc_select(const Mat& xd_gram, const Mat& wd, int p) {
    return init_qc_select(ffn_channel_importance(xd_gram, wd), p);
}

bool is_selection_matrix(const Mat& qc) {
    for (Eigen::Index j = 0; j < qc.cols(); ++j) {
        int ones = 0;
        for (Eigen::Index i = 0; i < qc.rows(); ++i) {
            const double v = qc(i, j);
            if (v == 1.0)
                ++ones;
            else if (v != 0.0)
                return false;
        }
        if (ones != 1) return false;
    }
    return true;
}

Mat compressed_intermediate(const Mat& out_u, const Mat& out_g, const Mat& xd,
                            const Mat& qc, bool linear_probe) {
    if (linear_probe) return out_u * qc;
    if (is_selection_matrix(qc)) return xd * qc;
    return (out_u * qc).cwiseProduct(silu(out_g * qc));
}

Mat solve_qr(const Mat& qc, const Mat& out_u, const Mat& out_g, const Mat& xd,
             std::optional<double> lambda, bool linear_probe) {
    Mat fx = compressed_intermediate(out_u, out_g, xd, qc, linear_probe);
    return ridge_solve_policy(fx, xd, lambda);
}

Mat solve_qr_gram(const Mat& qc, const Mat& xd_gram, std::optional<double> lambda) {
    if (!is_selection_matrix(qc))
        throw DimensionError("solve_qr_gram: only valid for a selection qc");
    Mat ata = qc.transpose() * xd_gram * qc;
    Mat atb = qc.transpose() * xd_gram;
    return ridge_solve_normal_policy(0.5 * (ata + ata.transpose()), atb, lambda);
}

double ffn_objective(const Mat& out_u, const Mat& out_g, const Mat& xd, const Mat& qc,
                     const Mat& qr, bool linear_probe) {
    Mat fx = compressed_intermediate(out_u, out_g, xd, qc, linear_probe);
    return (xd - fx * qr).squaredNorm();
}

Mat slice_optimize_qc(const SliceState& state, const Mat& u_slice, const Mat& g_slice,
                      const Mat& q_block, int steps, double amplitude_bound,
                      bool linear_probe) {
    auto clamp = [&](Mat m) {
        return m.cwiseMax(-amplitude_bound).cwiseMin(amplitude_bound);
    };
    auto proxy = [&](const Mat& q) {
        if (linear_probe) return (state.y_r - (state.c_u + u_slice * q)).squaredNorm();
        Mat pre_u = state.c_u + u_slice * q;
        Mat pre_g = state.c_g + g_slice * q;
        return (state.y_r - pre_u.cwiseProduct(silu(pre_g))).squaredNorm();
    };

    Mat q = q_block;
    double obj = proxy(q);
    if (!std::isfinite(obj)) return q_block;

    double step = 1.0 / (u_slice.squaredNorm() + g_slice.squaredNorm() + 1.0);
    for (int it = 0; it < steps; ++it) {
        Mat grad;
        if (linear_probe) {
            Mat resid = (state.c_u + u_slice * q) - state.y_r;
            grad = 2.0 * (u_slice.transpose() * resid);
        } else {
            Mat pre_u = state.c_u + u_slice * q;
            Mat pre_g = state.c_g + g_slice * q;
            Mat resid = pre_u.cwiseProduct(silu(pre_g)) - state.y_r;
            Mat du = resid.cwiseProduct(silu(pre_g));
            Mat dg = resid.cwiseProduct(pre_u).cwiseProduct(silu_grad(pre_g));
            grad = 2.0 * (u_slice.transpose() * du + g_slice.transpose() * dg);
        }
        if (!grad.allFinite()) return q_block;
        if (grad.squaredNorm() < 1e-24 * (1.0 + obj)) break;

        bool accepted = false;
        while (step > 1e-14) {
            Mat trial = clamp(q - step * grad);
            const double tobj = proxy(trial);
            if (!std::isfinite(tobj)) return q_block;
            const double decrease = (trial - q).squaredNorm() / step;
            if (tobj <= obj - 1e-4 * decrease) {
                q = std::move(trial);
                obj = tobj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        step *= 2.0;
    }
    return q;
}

FfnTransforms iterate_pca(const Mat& out_u, const Mat& out_g, const Mat& xd_rows,
                          const Mat& xd_gram, const Mat& wd, int target_p,
                          const SliceSchedule& sched,
                          std::vector<SliceTraceEntry>* trace, std::ostream* log) {
    const int d_inter = static_cast<int>(xd_gram.rows());
    Mat qc = init_qc_select(xd_gram, wd, target_p);
    Mat qr = solve_qr(qc, out_u, out_g, xd_rows, sched.ridge_lambda, sched.linear_probe);
    double obj = ffn_objective(out_u, out_g, xd_rows, qc, qr, sched.linear_probe);

    auto record = [&](int sweep, int slice, double o) {
        if (trace) trace->push_back({sweep, slice, o});
        if (log)
            (*log) << "{\"sweep\":" << sweep << ",\"slice\":" << slice
                   << ",\"objective\":" << o << "}\n";
    };
    record(0, -1, obj);

    FfnTransforms best{qc, qr};
    double best_obj = obj;

    if (!sched.enabled || sched.sweeps <= 0) return best;

    const int width = std::max(1, sched.slice_width);
    Mat s_u = out_u * qc;
    Mat s_g = out_g * qc;
    Mat y_r = xd_rows * pseudo_inverse(qr);

    for (int sweep = 1; sweep <= sched.sweeps; ++sweep) {
        for (int start = 0, slice = 0; start < d_inter; start += width, ++slice) {
            const int dk = std::min(width, d_inter - start);
            SliceState st;
            st.slice_width = dk;
            Mat u_k = out_u.middleCols(start, dk);
            Mat g_k = out_g.middleCols(start, dk);
            Mat q_k = qc.middleRows(start, dk);
            st.c_u = s_u - u_k * q_k;
            st.c_g = s_g - g_k * q_k;
            st.y_r = y_r;

            Mat q_new = slice_optimize_qc(st, u_k, g_k, q_k, sched.steps_per_slice,
                                          sched.amplitude_bound, sched.linear_probe);

            Mat qc_cand = qc;
            qc_cand.middleRows(start, dk) = q_new;
            const double cand =
                ffn_objective(out_u, out_g, xd_rows, qc_cand, qr, sched.linear_probe);
            if (std::isfinite(cand) && cand <= obj) {
                qc = std::move(qc_cand);
                s_u = st.c_u + u_k * q_new;
                s_g = st.c_g + g_k * q_new;
                obj = cand;
            }
            record(sweep, slice, obj);
        }

        Mat qr_cand =
            solve_qr(qc, out_u, out_g, xd_rows, sched.ridge_lambda, sched.linear_probe);
        const double cand =
            ffn_objective(out_u, out_g, xd_rows, qc, qr_cand, sched.linear_probe);
        if (std::isfinite(cand) && cand <= obj) {
            qr = std::move(qr_cand);
            obj = cand;
            y_r = xd_rows * pseudo_inverse(qr);
        }
        record(sweep, -1, obj);

        if (obj < best_obj) {
            best = {qc, qr};
            best_obj = obj;
        }
    }
    return best;
}

void fuse_ffn(Checkpoint& ckpt, int layer, const FfnTransforms& t) {
    const Mat& wu = ckpt.tensor(tname(layer, "wu"));
    const Mat& wg = ckpt.tensor(tname(layer, "wg"));
    const Mat& wd = ckpt.tensor(tname(layer, "wd"));
    if (wu.cols() != t.qc.rows() || wd.rows() != t.qc.rows() ||
        t.qc.cols() != t.qr.rows())
        throw DimensionError("fuse_ffn: transform shapes inconsistent with weights");

    Mat nwu = wu * t.qc;
    Mat nwg = wg * t.qc;
    Mat nwd = t.qr * wd;
    ckpt.tensor(tname(layer, "wu")) = std::move(nwu);
    ckpt.tensor(tname(layer, "wg")) = std::move(nwg);
    ckpt.tensor(tname(layer, "wd")) = std::move(nwd);
    ckpt.layout[layer].ffn_dim = static_cast<int>(t.qc.cols());
}

}  // namespace islice
