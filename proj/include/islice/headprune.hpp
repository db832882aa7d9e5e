#pragma once

#include "islice/model.hpp"

#include <vector>

namespace islice {

struct HeadScoreTable {
    int head_dim = 0;
    std::vector<double> r;                // head importance R_h
    std::vector<Vec> v;                   // descending spectrum per head
    std::vector<Vec> channel_importance;  // per head, per channel
};

struct CompressionPlan {
    std::vector<int> removed;
    std::vector<int> kept;  // ascending
    int p = 0;              // retained dimensionality per kept head
    int target_p_total = 0;
};

// Per-input-channel importance: squared column norm of the activations times
// squared row norm of the consuming weight.
Vec channel_importance(const Mat& x, const Mat& w);
Vec channel_importance_from_gram(const Mat& gram, const Mat& w);

// R_h scaled by the spectral energy fraction retained at width p.
double head_recon_score(double r_h, const Vec& v_desc, int p);

HeadScoreTable build_head_scores(const Mat& xo_gram, const Mat& wo, int heads);

CompressionPlan greedy_remove(const HeadScoreTable& scores, int target_p, int min_head_dim);

// Round p up to even (RoPE pairs), clamped to [min_head_dim, head_dim];
// rewrites target_p_total to the realized value.
CompressionPlan evenize_plan(CompressionPlan plan, int min_head_dim, int head_dim);

struct MhaTransforms {
    std::vector<Mat> q1;                       // per kept head: head_dim x p
    BlockDiagonal q2;                          // (|kept| head_dim) x (|kept| p)
    Mat q2_star;                               // (|kept| p) x (|kept| head_dim)
    std::vector<std::vector<bool>> pair_mask;  // per kept head; empty without RoPE
};

struct Q1Result {
    std::vector<Mat> q1;  // per kept head; identical within a KV group
    std::vector<std::vector<bool>> pair_mask;
};

// Spec-level entry point working on raw pre-RoPE projection rows. out_q is
// indexed by query head, out_k/wk_cols by KV head; wq_cols/wk_cols are the
// per-head weight column blocks feeding those projections.
Q1Result build_q1(const std::vector<Mat>& out_q, const std::vector<Mat>& out_k,
                  const std::vector<Mat>& wq_cols, const std::vector<Mat>& wk_cols,
                  const CompressionPlan& plan, bool rope, int group_size);

// Pipeline path: same construction from the Gram of the shared input.
Q1Result build_q1_from_gram(const Mat& input_gram, const Mat& wq, const Mat& wk,
                            const CompressionPlan& plan, bool rope,
                            const ModelConfig& cfg);

// Per-kept-head top-p PCA bases of the o_proj-input Gram; group-pooled under GQA.
BlockDiagonal build_q2(const Mat& xo_gram, const CompressionPlan& plan, int head_dim,
                       int group_size);

// Dense reconstruction map of Eq-20 shape: fits compressed activations back to
// the kept-head channel space.
Mat correct_q2(const BlockDiagonal& q2, const Mat& xo_rows_kept, double lambda);
Mat correct_q2_from_gram(const BlockDiagonal& q2, const Mat& xo_gram_kept, double lambda);

// Select the kept heads' column/row blocks from the pre-prune X_o space.
Mat kept_columns(const Mat& xo_rows, const CompressionPlan& plan, int head_dim);
Mat kept_gram(const Mat& xo_gram, const CompressionPlan& plan, int head_dim);

// Absorb q1/q2/q2* into the four attention weights of one layer and rewrite
// its HeadLayout. The layer must still carry the full pre-prune layout.
void fuse_mha(Checkpoint& ckpt, int layer, const MhaTransforms& t,
              const CompressionPlan& plan);

OnlineMhaTransform to_online(const MhaTransforms& t, const CompressionPlan& plan);

}  // namespace islice
