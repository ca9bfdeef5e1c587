// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <vector>

namespace ctrlora {

/// A scored rank-1 direction for one layer: singular triple of the whitened
/// gradient plus its unwhitened counterpart, marginal utility sigma^2 / 2,
/// and the parameter cost of one rank unit on that layer.
struct CandidateDirection {
    std::size_t layer_id = 0;
    double sigma = 0.0;
    std::vector<double> u;           // unwhitened, unit norm, d_out
    std::vector<double> v;           // unwhitened, unit norm, d_in
    std::vector<double> u_whitened;  // singular vector of the whitened gradient
    std::vector<double> v_whitened;
    double utility = 0.0;            // sigma^2 / 2
    std::size_t cost = 0;            // d_in + d_out
};

/// Per-layer rank assignment with budget accounting.
struct BudgetPlan {
    std::map<std::size_t, std::size_t> ranks;  // layer_id -> rank
    std::size_t budget_limit = 0;
    std::size_t spent = 0;
    std::vector<CandidateDirection> selection_log;

    std::size_t rank_for(std::size_t layer_id) const {
        auto it = ranks.find(layer_id);
        return it == ranks.end() ? 0 : it->second;
    }
};

}  // namespace ctrlora
