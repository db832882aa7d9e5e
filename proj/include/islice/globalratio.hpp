#pragma once

#include "islice/model.hpp"

#include <utility>
#include <vector>

namespace islice {

struct UnitImportance {
    std::vector<Vec> i_h;  // per layer, length D
    std::vector<Vec> i_f;  // per layer, length D_inter
};

// Lossless block-diagonal rotations of the mask spaces: head-width blocks of
// the o_proj-input Gram for MHA, fixed-width blocks of the down-input Gram
// for FFN.
struct SparseRotations {
    std::vector<BlockDiagonal> mha;
    std::vector<BlockDiagonal> ffn;
};

SparseRotations block_sparse_pca(const ActivationTrace& trace, const ModelConfig& cfg,
                                 int ffn_block = 32);

BlockDiagonal block_eigenbasis(const Mat& gram, const std::vector<int>& widths);

// Squared rotated mask gradients; reduces to squared raw gradients when the
// rotation is the identity.
UnitImportance correct_importance(const MaskGradients& g, const SparseRotations& q_s);

struct ParamModel {
    int layers = 0;
    int units_h = 0;   // MHA channels per layer (D)
    int units_f = 0;   // FFN channels per layer (D_inter)
    double cost_h = 0; // parameters retired per MHA channel
    double cost_f = 0; // parameters retired per FFN channel
    double total() const { return layers * (units_h * cost_h + units_f * cost_f); }
    double total_h() const { return static_cast<double>(layers) * units_h * cost_h; }
    double total_f() const { return static_cast<double>(layers) * units_f * cost_f; }
};

ParamModel param_model(const ModelConfig& cfg);

struct RatioPlan {
    std::vector<double> s_h, s_f;
    std::vector<int> removed_h, removed_f;  // unit counts behind the ratios
    double r = 0.0;
    double lambda_b = 1.0;
    double cap = 0.8;
    double realized_sparsity = 0.0;
    std::string to_json() const;
};

// Group budgets from the pruning bias, then retained-importance maximization
// under each group's parameter budget, with a per-layer ratio cap that spills
// overflow to the next-cheapest units elsewhere.
RatioPlan allocate_ratios(const UnitImportance& imp, const ParamModel& pm, double r,
                          double lambda_b, double cap);

// Removal counts per layer for one group; throws when the cap makes the
// budget infeasible, naming the binding layer.
std::vector<int> select_group_removals(const std::vector<Vec>& imps, long n_remove,
                                       int per_layer_cap_units);

// Integer retained-dimension targets (MHA, FFN) per layer. MHA targets honor
// the min-head-dim floor and, under RoPE, round the per-head share up to even.
std::vector<std::pair<int, int>> plan_to_targets(const RatioPlan& plan,
                                                 const ModelConfig& cfg,
                                                 double min_head_ratio);

}  // namespace islice
