#include "islice/headprune.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>

namespace islice {

Vec channel_importance(const Mat& x, const Mat& w) {
    if (x.cols() != w.rows())
        throw DimensionError("channel_importance: X cols must match W rows");
    Vec out(w.rows());
    for (Eigen::Index i = 0; i < w.rows(); ++i)
        out[i] = x.col(i).squaredNorm() * w.row(i).squaredNorm();
    return out;
}

Vec channel_importance_from_gram(const Mat& gram, const Mat& w) {
    if (gram.rows() != w.rows())
        throw DimensionError("channel_importance: gram dim must match W rows");
    Vec out(w.rows());
    for (Eigen::Index i = 0; i < w.rows(); ++i)
        out[i] = std::max(gram(i, i), 0.0) * w.row(i).squaredNorm();
    return out;
}

double head_recon_score(double r_h, const Vec& v_desc, int p) {
    if (p > v_desc.size()) throw DimensionError("head_recon_score: p beyond spectrum");
    const double total = v_desc.sum();
    if (total <= 0.0) return 0.0;
    return r_h * v_desc.head(p).sum() / total;
}

HeadScoreTable build_head_scores(const Mat& xo_gram, const Mat& wo, int heads) {
    if (xo_gram.rows() != wo.rows())
        throw DimensionError("head scores: gram dim must match W_o rows");
    if (xo_gram.rows() % heads != 0)
        throw DimensionError("head scores: width not divisible by head count");
    const int hd = static_cast<int>(xo_gram.rows()) / heads;
    HeadScoreTable t;
    t.head_dim = hd;
    Vec imp = channel_importance_from_gram(xo_gram, wo);
    for (int h = 0; h < heads; ++h) {
        Vec ci = imp.segment(h * hd, hd);
        t.r.push_back(ci.sum());
        t.channel_importance.push_back(ci);
        t.v.push_back(sym_eig(xo_gram.block(h * hd, h * hd, hd, hd)).values);
    }
    return t;
}

CompressionPlan greedy_remove(const HeadScoreTable& scores, int target_p, int min_head_dim) {
    const int heads = static_cast<int>(scores.r.size());
    const int hd = scores.head_dim;
    if (heads < 1) throw DimensionError("greedy_remove: no heads");
    if (target_p < min_head_dim)
        throw DimensionError("greedy_remove: target " + std::to_string(target_p) +
                             " infeasible even with one head (min " +
                             std::to_string(min_head_dim) + ")");

    auto total_score = [&](const std::vector<int>& set, int p) {
        double s = 0.0;
        for (int h : set) s += head_recon_score(scores.r[h], scores.v[h], std::min(p, hd));
        return s;
    };

    // Candidates leave in ascending-R order. Each removal frees per-head
    // budget for the survivors; the accepted prefix is the one whose realized
    // score is best, so no removal with a nonpositive gain survives into the
    // returned plan.
    std::vector<int> order(heads);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores.r[a] < scores.r[b]; });

    std::vector<int> kept(heads);
    std::iota(kept.begin(), kept.end(), 0);
    std::vector<int> best_kept = kept;
    double best_score = total_score(kept, std::clamp(target_p / heads, min_head_dim, hd));

    for (int k = 0; k + 1 < heads; ++k) {
        kept.erase(std::find(kept.begin(), kept.end(), order[k]));
        const int p_star = target_p / static_cast<int>(kept.size());
        const double gain = total_score(kept, std::min(p_star, hd)) - best_score;
        if (gain > 0.0) {
            best_kept = kept;
            best_score += gain;
        }
        if (p_star >= hd) break;  // survivors already at full width
    }

    CompressionPlan plan;
    plan.kept = std::move(best_kept);
    for (int h = 0; h < heads; ++h)
        if (std::find(plan.kept.begin(), plan.kept.end(), h) == plan.kept.end())
            plan.removed.push_back(h);
    plan.p = std::clamp(target_p / static_cast<int>(plan.kept.size()), min_head_dim, hd);
    plan.target_p_total = target_p;
    return plan;
}

CompressionPlan evenize_plan(CompressionPlan plan, int min_head_dim, int head_dim) {
    int p = plan.p;
    if (p % 2 != 0) p += 1;  // round toward retention
    p = std::clamp(p, std::min(min_head_dim + min_head_dim % 2, head_dim), head_dim);
    plan.p = p;
    plan.target_p_total = p * static_cast<int>(plan.kept.size());
    return plan;
}

namespace {

std::vector<int> group_list(const std::vector<int>& kept, int group_size) {
    std::vector<int> groups;
    for (int h : kept) {
        const int g = h / group_size;
        if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
    }
    std::sort(groups.begin(), groups.end());
    return groups;
}

// Top pairs by importance, ties to the lower pair index.
std::vector<bool> select_pairs(const Vec& pair_imp, int keep) {
    const int n = static_cast<int>(pair_imp.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return pair_imp[a] > pair_imp[b]; });
    std::vector<bool> mask(n, false);
    for (int i = 0; i < keep; ++i) mask[order[i]] = true;
    return mask;
}

Mat pair_selection_matrix(const std::vector<bool>& mask, int head_dim) {
    const int half = head_dim / 2;
    std::vector<int> idx;
    for (int j = 0; j < half; ++j)
        if (mask[j]) idx.push_back(j);
    const int p = 2 * static_cast<int>(idx.size());
    Mat q = Mat::Zero(head_dim, p);
    for (size_t j = 0; j < idx.size(); ++j) {
        q(idx[j], static_cast<long>(j)) = 1.0;
        q(idx[j] + half, static_cast<long>(j) + idx.size()) = 1.0;
    }
    return q;
}

struct HeadStats {
    std::vector<Vec> q_imp;    // per query head, Eq-1 importance of each output channel
    std::vector<Vec> k_imp;    // per KV head
    std::vector<Mat> q_gram;   // per query head
    std::vector<Mat> k_gram;   // per KV head
};

Q1Result build_q1_impl(const HeadStats& st, const CompressionPlan& plan, bool rope,
                       int group_size, int head_dim) {
    Q1Result out;
    if (rope && plan.p % 2 != 0)
        throw DimensionError("build_q1: odd p with RoPE enabled");

    std::vector<int> groups = group_list(plan.kept, group_size);
    std::vector<Mat> group_q1(groups.size());
    std::vector<std::vector<bool>> group_mask(groups.size());

    for (size_t gi = 0; gi < groups.size(); ++gi) {
        const int g = groups[gi];
        if (rope) {
            const int half = head_dim / 2;
            Vec pair_imp = Vec::Zero(half);
            for (int h : plan.kept) {
                if (h / group_size != g) continue;
                for (int j = 0; j < half; ++j)
                    pair_imp[j] += st.q_imp[h][j] + st.q_imp[h][j + half];
            }
            for (int j = 0; j < half; ++j)
                pair_imp[j] += st.k_imp[g][j] + st.k_imp[g][j + half];
            group_mask[gi] = select_pairs(pair_imp, plan.p / 2);
            group_q1[gi] = pair_selection_matrix(group_mask[gi], head_dim);
        } else {
            Mat pooled = Mat::Zero(head_dim, head_dim);
            for (int h : plan.kept)
                if (h / group_size == g) pooled += st.q_gram[h];
            pooled += st.k_gram[g];
            group_q1[gi] = pca_basis(pooled, plan.p);
        }
    }

    for (int h : plan.kept) {
        const size_t gi = static_cast<size_t>(
            std::find(groups.begin(), groups.end(), h / group_size) - groups.begin());
        out.q1.push_back(group_q1[gi]);
        if (rope) out.pair_mask.push_back(group_mask[gi]);
    }
    return out;
}

}  // namespace

Q1Result build_q1(const std::vector<Mat>& out_q, const std::vector<Mat>& out_k,
                  const std::vector<Mat>& wq_cols, const std::vector<Mat>& wk_cols,
                  const CompressionPlan& plan, bool rope, int group_size) {
    const int head_dim = static_cast<int>(out_q.at(0).cols());
    HeadStats st;
    for (size_t h = 0; h < out_q.size(); ++h) {
        Vec imp(head_dim);
        for (int c = 0; c < head_dim; ++c)
            imp[c] = out_q[h].col(c).squaredNorm() * wq_cols[h].col(c).squaredNorm();
        st.q_imp.push_back(imp);
        st.q_gram.push_back(out_q[h].transpose() * out_q[h]);
    }
    for (size_t g = 0; g < out_k.size(); ++g) {
        Vec imp(head_dim);
        for (int c = 0; c < head_dim; ++c)
            imp[c] = out_k[g].col(c).squaredNorm() * wk_cols[g].col(c).squaredNorm();
        st.k_imp.push_back(imp);
        st.k_gram.push_back(out_k[g].transpose() * out_k[g]);
    }
    return build_q1_impl(st, plan, rope, group_size, head_dim);
}

Q1Result build_q1_from_gram(const Mat& input_gram, const Mat& wq, const Mat& wk,
                            const CompressionPlan& plan, bool rope,
                            const ModelConfig& cfg) {
    const int hd = cfg.head_dim;
    HeadStats st;
    for (int h = 0; h < cfg.heads; ++h) {
        Mat wqh = wq.middleCols(static_cast<long>(h) * hd, hd);
        Mat g = wqh.transpose() * input_gram * wqh;  // Gram of this head's q output
        Vec imp(hd);
        for (int c = 0; c < hd; ++c)
            imp[c] = std::max(g(c, c), 0.0) * wqh.col(c).squaredNorm();
        st.q_imp.push_back(imp);
        st.q_gram.push_back(0.5 * (g + g.transpose()));
    }
    for (int g = 0; g < cfg.kv_groups; ++g) {
        Mat wkg = wk.middleCols(static_cast<long>(g) * hd, hd);
        Mat gk = wkg.transpose() * input_gram * wkg;
        Vec imp(hd);
        for (int c = 0; c < hd; ++c)
            imp[c] = std::max(gk(c, c), 0.0) * wkg.col(c).squaredNorm();
        st.k_imp.push_back(imp);
        st.k_gram.push_back(0.5 * (gk + gk.transpose()));
    }
    return build_q1_impl(st, plan, rope, cfg.group_size(), hd);
}

BlockDiagonal build_q2(const Mat& xo_gram, const CompressionPlan& plan, int head_dim,
                       int group_size) {
    std::vector<int> groups = group_list(plan.kept, group_size);
    std::vector<Mat> group_basis(groups.size());
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        Mat pooled = Mat::Zero(head_dim, head_dim);
        for (int h : plan.kept)
            if (h / group_size == groups[gi])
                pooled += xo_gram.block(static_cast<long>(h) * head_dim,
                                        static_cast<long>(h) * head_dim, head_dim, head_dim);
        group_basis[gi] = pca_basis(0.5 * (pooled + pooled.transpose()), plan.p);
    }
    BlockDiagonal q2;
    for (int h : plan.kept) {
        const size_t gi = static_cast<size_t>(
            std::find(groups.begin(), groups.end(), h / group_size) - groups.begin());
        q2.push(group_basis[gi]);
    }
    return q2;
}

Mat kept_columns(const Mat& xo_rows, const CompressionPlan& plan, int head_dim) {
    Mat out(xo_rows.rows(), static_cast<long>(plan.kept.size()) * head_dim);
    for (size_t i = 0; i < plan.kept.size(); ++i)
        out.middleCols(static_cast<long>(i) * head_dim, head_dim) =
            xo_rows.middleCols(static_cast<long>(plan.kept[i]) * head_dim, head_dim);
    return out;
}

Mat kept_gram(const Mat& xo_gram, const CompressionPlan& plan, int head_dim) {
    const long n = static_cast<long>(plan.kept.size()) * head_dim;
    Mat out(n, n);
    for (size_t i = 0; i < plan.kept.size(); ++i)
        for (size_t j = 0; j < plan.kept.size(); ++j)
            out.block(static_cast<long>(i) * head_dim, static_cast<long>(j) * head_dim,
                      head_dim, head_dim) =
                xo_gram.block(static_cast<long>(plan.kept[i]) * head_dim,
                              static_cast<long>(plan.kept[j]) * head_dim, head_dim,
                              head_dim);
    return out;
}

Mat correct_q2(const BlockDiagonal& q2, const Mat& xo_rows_kept, double lambda) {
    if (xo_rows_kept.rows() == 0)
        throw DimensionError("correct_q2: empty activation sample");
    Mat compressed = q2.apply_right(xo_rows_kept);
    return ridge_solve(compressed, xo_rows_kept, lambda);
}

Mat correct_q2_from_gram(const BlockDiagonal& q2, const Mat& xo_gram_kept, double lambda) {
    Mat qd = q2.dense();
    Mat ata = qd.transpose() * xo_gram_kept * qd;
    Mat atb = qd.transpose() * xo_gram_kept;
    return ridge_solve_normal(0.5 * (ata + ata.transpose()), atb, lambda);
}

void fuse_mha(Checkpoint& ckpt, int layer, const MhaTransforms& t,
              const CompressionPlan& plan) {
    const ModelConfig& cfg = ckpt.config;
    const int hd = cfg.head_dim;
    const int gs = cfg.group_size();
    const int p = plan.p;
    const int hk = static_cast<int>(plan.kept.size());
    if (static_cast<int>(t.q1.size()) != hk || static_cast<int>(t.q2.blocks.size()) != hk)
        throw DimensionError("fuse_mha: transforms inconsistent with plan");

    const Mat wq = ckpt.tensor(tname(layer, "wq"));
    const Mat wk = ckpt.tensor(tname(layer, "wk"));
    const Mat wv = ckpt.tensor(tname(layer, "wv"));
    const Mat wo = ckpt.tensor(tname(layer, "wo"));
    if (wq.cols() != static_cast<long>(cfg.heads) * hd)
        throw DimensionError("fuse_mha: layer already pruned");

    std::vector<int> groups = group_list(plan.kept, gs);
    const int gk = static_cast<int>(groups.size());

    Mat nwq(cfg.hidden, static_cast<long>(hk) * p);
    for (int i = 0; i < hk; ++i)
        nwq.middleCols(static_cast<long>(i) * p, p) =
            wq.middleCols(static_cast<long>(plan.kept[i]) * hd, hd) * t.q1[i];

    Mat nwk(cfg.hidden, static_cast<long>(gk) * p);
    Mat nwv(cfg.hidden, static_cast<long>(gk) * p);
    for (int j = 0; j < gk; ++j) {
        int rep = 0;
        for (int i = 0; i < hk; ++i)
            if (plan.kept[i] / gs == groups[j]) { rep = i; break; }
        nwk.middleCols(static_cast<long>(j) * p, p) =
            wk.middleCols(static_cast<long>(groups[j]) * hd, hd) * t.q1[rep];
        nwv.middleCols(static_cast<long>(j) * p, p) =
            wv.middleCols(static_cast<long>(groups[j]) * hd, hd) * t.q2.blocks[rep].m;
    }

    Mat wo_kept(static_cast<long>(hk) * hd, cfg.hidden);
    for (int i = 0; i < hk; ++i)
        wo_kept.middleRows(static_cast<long>(i) * hd, hd) =
            wo.middleRows(static_cast<long>(plan.kept[i]) * hd, hd);
    Mat nwo = t.q2_star * wo_kept;

    ckpt.tensor(tname(layer, "wq")) = std::move(nwq);
    ckpt.tensor(tname(layer, "wk")) = std::move(nwk);
    ckpt.tensor(tname(layer, "wv")) = std::move(nwv);
    ckpt.tensor(tname(layer, "wo")) = std::move(nwo);

    HeadLayout& hl = ckpt.layout[layer];
    hl.retained_heads = plan.kept;
    hl.per_head_dim = p;
    hl.rope_pair_mask = t.pair_mask;
}

OnlineMhaTransform to_online(const MhaTransforms& t, const CompressionPlan& plan) {
    OnlineMhaTransform o;
    o.kept_heads = plan.kept;
    o.p = plan.p;
    o.q1 = t.q1;
    for (const auto& b : t.q2.blocks) o.q2.push_back(b.m);
    o.q2_star = t.q2_star;
    o.pair_mask = t.pair_mask;
    return o;
}

}  // namespace islice
