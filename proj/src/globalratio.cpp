#include "islice/globalratio.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace islice {

BlockDiagonal block_eigenbasis(const Mat& gram, const std::vector<int>& widths) {
    BlockDiagonal out;
    int offset = 0;
    for (int w : widths) {
        Mat block = gram.block(offset, offset, w, w);
        out.push(pca_basis(0.5 * (block + block.transpose()), w));
        offset += w;
    }
    if (offset != gram.rows())
        throw DimensionError("block_eigenbasis: widths do not partition the dimension");
    return out;
}

SparseRotations block_sparse_pca(const ActivationTrace& trace, const ModelConfig& cfg,
                                 int ffn_block) {
    SparseRotations out;
    for (const LayerTrace& lt : trace.layers) {
        const Mat go = lt.o_proj_input.gram.symmetrized();
        std::vector<int> head_widths(go.rows() / cfg.head_dim, cfg.head_dim);
        out.mha.push_back(block_eigenbasis(go, head_widths));

        const Mat gf = lt.down_input.gram.symmetrized();
        std::vector<int> ffn_widths;
        for (int off = 0; off < gf.rows(); off += ffn_block)
            ffn_widths.push_back(std::min<int>(ffn_block, static_cast<int>(gf.rows()) - off));
        out.ffn.push_back(block_eigenbasis(gf, ffn_widths));
    }
    return out;
}

UnitImportance correct_importance(const MaskGradients& g, const SparseRotations& q_s) {
    if (g.g_h.size() != q_s.mha.size() || g.g_f.size() != q_s.ffn.size())
        throw DimensionError("correct_importance: layer counts differ");
    UnitImportance imp;
    for (size_t l = 0; l < g.g_h.size(); ++l) {
        if (g.g_h[l].size() != q_s.mha[l].rows() || g.g_f[l].size() != q_s.ffn[l].rows())
            throw DimensionError("correct_importance: dimension mismatch at layer " +
                                 std::to_string(l));
        Mat rh = q_s.mha[l].apply_right(g.g_h[l].transpose());
        Mat rf = q_s.ffn[l].apply_right(g.g_f[l].transpose());
        imp.i_h.push_back(rh.row(0).transpose().cwiseAbs2());
        imp.i_f.push_back(rf.row(0).transpose().cwiseAbs2());
    }
    return imp;
}

ParamModel param_model(const ModelConfig& cfg) {
    ParamModel pm;
    pm.layers = cfg.layers;
    pm.units_h = cfg.hidden;
    pm.units_f = cfg.inter;
    // One MHA channel owns a W_q column and a W_o row outright plus a 1/gs
    // share of the group's W_k and W_v columns.
    pm.cost_h = cfg.hidden * (2.0 + 2.0 / cfg.group_size());
    pm.cost_f = 3.0 * cfg.hidden;  // W_u column, W_g column, W_d row
    return pm;
}

std::vector<int> select_group_removals(const std::vector<Vec>& imps, long n_remove,
                                       int per_layer_cap_units) {
    struct Unit {
        double imp;
        int idx;
        int layer;
    };
    std::vector<Unit> units;
    for (size_t l = 0; l < imps.size(); ++l)
        for (int i = 0; i < imps[l].size(); ++i)
            units.push_back({imps[l][i], i, static_cast<int>(l)});
    // Ascending importance; ties spread across layers by channel index so a
    // fully symmetric instance removes uniformly.
    std::sort(units.begin(), units.end(), [](const Unit& a, const Unit& b) {
        if (a.imp != b.imp) return a.imp < b.imp;
        if (a.idx != b.idx) return a.idx < b.idx;
        return a.layer < b.layer;
    });

    std::vector<int> counts(imps.size(), 0);
    long removed = 0;
    for (const Unit& u : units) {
        if (removed >= n_remove) break;
        if (counts[u.layer] >= per_layer_cap_units) continue;
        ++counts[u.layer];
        ++removed;
    }
    if (removed < n_remove) {
        int binding = 0;
        for (size_t l = 0; l < counts.size(); ++l)
            if (counts[l] >= per_layer_cap_units) binding = static_cast<int>(l);
        throw ConfigError("pruning budget infeasible under per-layer cap; binding layer " +
                          std::to_string(binding));
    }
    return counts;
}

RatioPlan allocate_ratios(const UnitImportance& imp, const ParamModel& pm, double r,
                          double lambda_b, double cap) {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("allocate_ratios: r must lie in (0, 1)");
    if (lambda_b < 0.0) throw ConfigError("allocate_ratios: lambda_b must be nonnegative");
    if (lambda_b * r > cap + 1e-12)
        throw ConfigError("allocate_ratios: lambda_b * r exceeds the per-layer cap");
    if (static_cast<int>(imp.i_h.size()) != pm.layers ||
        static_cast<int>(imp.i_f.size()) != pm.layers)
        throw DimensionError("allocate_ratios: importance layer count mismatch");

    const double r_f = lambda_b * r;
    // MHA ratio solved from parameter accounting so the removed total is r * T.
    const double r_h = (r * pm.total() - r_f * pm.total_f()) / pm.total_h();
    if (r_h < -1e-9 || r_h > cap + 1e-9)
        throw ConfigError("allocate_ratios: compensating MHA ratio " + std::to_string(r_h) +
                          " infeasible (cap " + std::to_string(cap) + ")");

    const long n_f = std::lround(r_f * pm.layers * pm.units_f);
    const long n_h = std::lround(std::clamp(r_h, 0.0, cap) * pm.layers * pm.units_h);

    RatioPlan plan;
    plan.r = r;
    plan.lambda_b = lambda_b;
    plan.cap = cap;
    plan.removed_f = select_group_removals(
        imp.i_f, n_f, static_cast<int>(std::floor(cap * pm.units_f)));
    plan.removed_h = select_group_removals(
        imp.i_h, n_h, static_cast<int>(std::floor(cap * pm.units_h)));

    double removed_params = 0.0;
    for (int l = 0; l < pm.layers; ++l) {
        plan.s_h.push_back(static_cast<double>(plan.removed_h[l]) / pm.units_h);
        plan.s_f.push_back(static_cast<double>(plan.removed_f[l]) / pm.units_f);
        removed_params += plan.removed_h[l] * pm.cost_h + plan.removed_f[l] * pm.cost_f;
    }
    plan.realized_sparsity = removed_params / pm.total();
    return plan;
}

std::vector<std::pair<int, int>> plan_to_targets(const RatioPlan& plan,
                                                 const ModelConfig& cfg,
                                                 double min_head_ratio) {
    const int min_hd = static_cast<int>(std::ceil(min_head_ratio * cfg.head_dim));
    std::vector<std::pair<int, int>> targets;
    for (size_t l = 0; l < plan.removed_h.size(); ++l) {
        int t_mha = cfg.hidden - plan.removed_h[l];
        t_mha = std::max(t_mha, min_hd);
        if (cfg.rope_enabled && t_mha < cfg.hidden) {
            // Round the per-head share up to an even width (toward retention).
            const int unit = 2 * cfg.heads;
            t_mha = std::min(cfg.hidden, unit * ((t_mha + unit - 1) / unit));
        }
        int t_ffn = std::max(1, cfg.inter - plan.removed_f[l]);
        targets.emplace_back(t_mha, t_ffn);
    }
    return targets;
}

std::string RatioPlan::to_json() const {
    nlohmann::json j;
    j["r"] = r;
    j["lambda_b"] = lambda_b;
    j["cap"] = cap;
    j["realized_sparsity"] = realized_sparsity;
    j["s_h"] = s_h;
    j["s_f"] = s_f;
    j["removed_h"] = removed_h;
    j["removed_f"] = removed_f;
    return j.dump(2);
}

}  // namespace islice
