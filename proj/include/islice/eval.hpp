#pragma once

#include "islice/pipeline.hpp"

#include <map>
#include <string>
#include <vector>

namespace islice {

struct RankProfile {
    std::string label;
    std::vector<int> ranks;  // per layer, energy rank of the block output
};

RankProfile rank_profile(const Checkpoint& ckpt, const TokenBatch& calib, double tau,
                         const ResidualProbe* probe = nullptr,
                         const std::string& label = "dense");

// Projectors onto the top-(1-s)D basis of the dense residual stream at the
// chosen block boundaries. Online only; weights are never touched.
ResidualProbe make_inter_pca_probe(const Checkpoint& ckpt, const TokenBatch& calib,
                                   double sparsity, const std::vector<int>& layer_set);

enum class BaselineKind { Random, Magnitude };

struct BaselineSpec {
    BaselineKind kind = BaselineKind::Random;
    double sparsity = 0.3;
    uint64_t seed = 0;
};

// Structural deletion baselines: random keeps a uniform random unit subset,
// magnitude keeps the top units by importance. No PCA rotation, no ridge
// correction; fusion is plain column/row slicing.
PruneOutput baseline_prune(const Checkpoint& ckpt, const BaselineSpec& spec,
                           const TokenBatch& calib);

void emit_report(const std::vector<RankProfile>& profiles,
                 const std::map<std::string, double>& ppls,
                 const std::map<std::string, long>& params, const std::string& json_path,
                 const std::string& csv_path);

}  // namespace islice
