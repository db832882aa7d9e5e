#pragma once

#include "islice/checkpoint_io.hpp"
#include "islice/ffnprune.hpp"
#include "islice/globalratio.hpp"
#include "islice/headprune.hpp"

#include <optional>
#include <string>
#include <vector>

namespace islice {

struct CalibConfig {
    std::string path;
    int num_samples = 32;
    int seq_len = 128;
};

enum class IterateMode { Auto, On, Off };

struct RunConfig {
    double sparsity = 0.3;
    double lambda_b = 1.0;
    CalibConfig calib;
    uint64_t seed = 0;
    bool repropagate = true;
    IterateMode iterate_ffn = IterateMode::Auto;
    std::optional<double> ridge_lambda;  // nullopt = exact solve, auto-damped on singularity
    double per_layer_cap = 0.8;
    double min_head_dim_ratio = 0.75;
    SliceSchedule slice;  // enabled flag is decided per layer by iterate_ffn
    long row_cap = 4096;
    int ffn_pca_block = 32;
    bool verbose = false;
};

RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& cfg);

// Token stream from a file: the ISLTOK01 binary format or UTF-8 text at byte
// level.
std::vector<int> load_corpus(const std::string& path);

// Deterministic calibration windows of seq_len + 1 tokens. When the file is
// too short for the requested count, the available non-overlapping windows
// are returned with a warning on stderr.
TokenBatch load_calibration(const std::string& path, int num_samples, int seq_len,
                            uint64_t seed);

struct TransformSet {
    CompressionPlan plan;
    MhaTransforms mha;
    FfnTransforms ffn;
};

struct LayerReport {
    int layer = 0;
    std::vector<int> removed_heads;
    int kept_heads = 0;
    int per_head_dim = 0;
    int ffn_dim = 0;
    double mha_seconds = 0.0;
    double ffn_seconds = 0.0;
    std::vector<SliceTraceEntry> ffn_objective;
};

struct PruneReport {
    std::vector<LayerReport> layers;
    long params_before = 0, params_after = 0;
    long prunable_before = 0, prunable_after = 0;
    double realized_sparsity = 0.0;  // over prunable parameters
    double ppl_before = 0.0, ppl_after = 0.0;
    double fuse_divergence = 0.0;
    double total_seconds = 0.0;
    std::optional<RatioPlan> ratio_plan;
    // Timing is excluded when include_timing is false so reports stay
    // bit-comparable across runs.
    std::string to_json(bool include_timing = true) const;
};

struct PruneOutput {
    Checkpoint pruned;
    PruneReport report;
    std::vector<TransformSet> transforms;
};

PruneOutput run_prune(const RunConfig& cfg, const Checkpoint& ckpt);

// Core loop with explicit per-layer (mha, ffn) retained-dimension targets.
// compensate carries parameter-accounting drift into later stage targets;
// allow_ffn_comp lets it touch FFN widths.
PruneOutput run_prune_targets(const RunConfig& cfg, const Checkpoint& ckpt,
                              const std::vector<std::pair<int, int>>& targets,
                              const TokenBatch& calib, bool compensate = true,
                              bool allow_ffn_comp = true);

// Worst max-abs logit divergence between the fused model and the original
// model with every layer's transforms applied online.
double fuse_check(const Checkpoint& original, const Checkpoint& pruned,
                  const std::vector<TransformSet>& transforms, int trials,
                  uint64_t seed);

std::vector<OnlineTransforms> to_online_transforms(const std::vector<TransformSet>& sets);

// Transforms log round trip so fuse-check can run after the fact.
void save_transforms(const std::string& path, const std::vector<TransformSet>& sets);
std::vector<TransformSet> load_transforms(const std::string& path);

}  // namespace islice
