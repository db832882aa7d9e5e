#pragma once

#include "islice/linalg.hpp"
#include "islice/types.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace islice {

struct ModelConfig {
    int layers = 2;
    int hidden = 32;        // D
    int heads = 4;          // H
    int kv_groups = 4;      // = heads for standard MHA
    int head_dim = 8;       // pre-pruning; hidden == heads * head_dim
    int inter = 128;        // D_inter
    int vocab = 256;
    double rope_theta = 10000.0;
    bool rope_enabled = true;

    int group_size() const { return heads / kv_groups; }
    void validate() const;
};

// Per-layer pruning metadata. A freshly initialized model carries the full
// layout: all heads retained at head_dim, all RoPE pairs live.
struct HeadLayout {
    std::vector<int> retained_heads;                // ascending query-head ids
    int per_head_dim = 0;
    std::vector<std::vector<bool>> rope_pair_mask;  // per retained head, over original pairs
    int ffn_dim = 0;

    int n_heads() const { return static_cast<int>(retained_heads.size()); }
};

HeadLayout full_layout(const ModelConfig& cfg);

// Query/key/value column blocks vary per layer after pruning; the layout is
// the single source of truth for their widths.
struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Mat> tensors;
    std::vector<HeadLayout> layout;

    Mat& tensor(const std::string& name);
    const Mat& tensor(const std::string& name) const;
    bool has(const std::string& name) const { return tensors.count(name) > 0; }

    // Groups (kv heads) that still serve at least one retained query head.
    std::vector<int> retained_groups(int layer) const;
    long total_params() const;
    long prunable_params() const;  // attention + FFN projection weights only
    void validate() const;
};

std::string tname(int layer, const std::string& suffix);

// One captured activation site: second moments always, plus a bounded row
// sample for solvers that need raw rows.
struct Capture {
    GramAccumulator gram;
    Mat rows;
    long total_rows = 0;

    void init(int dim) { gram = GramAccumulator(dim); rows = Mat(0, dim); }
    void add(const Mat& x, long row_cap);
    bool sample_complete() const { return rows.rows() == total_rows; }
};

struct LayerTrace {
    Capture mha_input;    // N x D, post attention-norm
    Capture o_proj_input; // N x current attention width
    Capture ffn_input;    // N x D, post ffn-norm
    Capture up_out;       // N x ffn_dim
    Capture gate_out;     // N x ffn_dim
    Capture down_input;   // N x ffn_dim
    Capture block_output; // N x D, residual stream after the block
};

struct ActivationTrace {
    std::vector<LayerTrace> layers;
    long rows = 0;
    long row_cap = 4096;
};

struct MaskGradients {
    std::vector<Vec> g_h;  // per layer, length = current attention width
    std::vector<Vec> g_f;  // per layer, length = current ffn width
};

// Transform matrices applied online (unfused) inside a layer. Used to check
// fusion algebra against explicit multiplication, and by the baselines.
struct OnlineMhaTransform {
    std::vector<int> kept_heads;
    int p = 0;
    std::vector<Mat> q1;                            // per kept head: head_dim x p
    std::vector<Mat> q2;                            // per kept head: head_dim x p
    Mat q2_star;                                    // (|kept| p) x (|kept| head_dim)
    std::vector<std::vector<bool>> pair_mask;       // per kept head; empty when rope off
};

struct OnlineFfnTransform {
    Mat qc;  // D_inter x P
    Mat qr;  // P x D_inter
};

struct OnlineTransforms {
    std::optional<OnlineMhaTransform> mha;
    std::optional<OnlineFfnTransform> ffn;
};

// Residual-stream projectors applied after chosen blocks (inter-PCA probe).
struct ResidualProbe {
    std::vector<std::pair<int, Mat>> projectors;  // (layer index, D x D projector)
};

struct ForwardOptions {
    bool capture = false;
    long row_cap = 4096;
    long position_offset = 0;  // global shift of RoPE positions
    const std::vector<OnlineTransforms>* online = nullptr;
    const ResidualProbe* probe = nullptr;
    const std::vector<Vec>* mask_h = nullptr;  // virtual mask values per layer
    const std::vector<Vec>* mask_f = nullptr;
};

struct ForwardResult {
    std::vector<Mat> logits;  // per sequence: T x vocab
    ActivationTrace trace;
};

using TokenBatch = std::vector<std::vector<int>>;

ForwardResult forward(const Checkpoint& ckpt, const TokenBatch& tokens,
                      const ForwardOptions& opts = {});

// Rotary rotation with pairwise selection: input carries the full head_dim
// channels, output keeps only the selected pairs, rotated at their original
// pair frequencies. Position 0 is the identity on the selected channels.
Mat apply_rope(const Mat& x, const std::vector<long>& positions, double theta,
               const std::vector<bool>& pair_mask);

// Rotation in the compressed layout: x has width 2*|pair_indices| and
// pair_indices name the original pairs each slot descends from.
Mat rope_rotate_compressed(const Mat& x, const std::vector<long>& positions, double theta,
                           const std::vector<int>& pair_indices, int orig_head_dim);

double mean_cross_entropy(const std::vector<Mat>& logits, const TokenBatch& tokens);

struct LossResult {
    double loss = 0.0;
    MaskGradients mask_grads;
};

LossResult loss_and_mask_gradients(const Checkpoint& ckpt, const TokenBatch& batch);

struct Gradients {
    double loss = 0.0;
    std::map<std::string, Mat> weights;
    MaskGradients masks;
};

Gradients backward(const Checkpoint& ckpt, const TokenBatch& batch, bool want_weights,
                   bool want_masks, const std::vector<Vec>* mask_h = nullptr,
                   const std::vector<Vec>* mask_f = nullptr);

double perplexity(const Checkpoint& ckpt, const std::vector<int>& corpus, int seq_len);

struct TrainOptions {
    long steps = 2000;
    double lr = 0.05;
    uint64_t seed = 0;
    int batch = 8;
    int seq_len = 64;
    double clip_norm = 1.0;
    bool verbose = false;
    long log_every = 100;
};

Checkpoint init_checkpoint(const ModelConfig& cfg, uint64_t seed);
Checkpoint train_toy(const ModelConfig& cfg, const std::vector<int>& corpus,
                     const TrainOptions& opts);

}  // namespace islice
