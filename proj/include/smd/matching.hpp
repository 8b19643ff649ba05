// Copyright 2026 The SMD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "smd/errors.hpp"
#include "smd/lattice.hpp"
#include "smd/noise.hpp"
#include "smd/rng.hpp"

namespace smd {

/// -log odds of an error mechanism firing with probability q. Degenerate rates
/// fall back to finite weights: q = 0 gets a large weight, q >= 1/2 a tiny one.
inline double log_odds_weight(double q) {
    if (q <= 0.0) {
        return 50.0;
    }
    return std::max(std::log((1.0 - q) / q), 1e-9);
}

/// A defect of the graph's check type at a given record.
struct DefectNode {
    int node = 0;   // index into MatchingGraph::stabilizers
    int round = 1;  // 1-based record
};

/// Matching graph for the checks of one type. Space-time distances are
/// separable: spatial shortest path plus |dt| temporal hops.
///
/// Weights: each data qubit is an edge between the (one or two) checks of this
/// type it touches, weighted -log(q/(1-q)) with q = 2p/3, the rate of the error
/// components this check type sees. Each temporal hop costs -log(pm/(1-pm)).
class MatchingGraph {
  public:
    struct Edge {
        int a = 0;
        int b = -1;  // -1 = virtual boundary
        int qubit = 0;
        uint8_t flips_logical = 0;
        double weight = 1.0;
    };

    MatchingGraph() = default;

    MatchingGraph(const Lattice &lattice, CheckType checks, double space_weight, double time_weight)
        : checks_(checks), time_weight_(time_weight) {
        stabilizers_ = lattice.stabilizers_of_type(checks);
        node_of_stab_.assign(lattice.num_stabilizers(), -1);
        for (size_t n = 0; n < stabilizers_.size(); ++n) {
            node_of_stab_[static_cast<size_t>(stabilizers_[n])] = static_cast<int>(n);
        }
        // Z checks see X components, which flip lambda_Z when they cross the
        // logical-Z support; X checks likewise with the logical-X support.
        const auto &logical = checks == CheckType::Z ? lattice.logical_z_support() : lattice.logical_x_support();
        std::vector<uint8_t> on_logical(lattice.num_data_qubits(), 0);
        for (int q : logical) {
            on_logical[static_cast<size_t>(q)] = 1;
        }
        for (size_t q = 0; q < lattice.num_data_qubits(); ++q) {
            const auto &cs = lattice.checks_on_qubit(static_cast<int>(q), checks);
            Edge e;
            e.qubit = static_cast<int>(q);
            e.flips_logical = on_logical[q];
            e.weight = space_weight;
            e.a = node_of_stab_[static_cast<size_t>(cs.at(0))];
            e.b = cs.size() == 2 ? node_of_stab_[static_cast<size_t>(cs[1])] : -1;
            edges_.push_back(e);
        }
        compute_shortest_paths();
    }

    CheckType checks() const { return checks_; }
    size_t num_nodes() const { return stabilizers_.size(); }
    const std::vector<int> &stabilizers() const { return stabilizers_; }
    int node_of_stabilizer(int stab) const { return node_of_stab_.at(static_cast<size_t>(stab)); }
    const std::vector<Edge> &edges() const { return edges_; }
    double time_weight() const { return time_weight_; }

    double spatial_distance(int u, int v) const { return dist_[idx(u, v)]; }
    uint8_t spatial_parity(int u, int v) const { return parity_[idx(u, v)]; }
    double boundary_distance(int u) const { return bdist_[static_cast<size_t>(u)]; }
    uint8_t boundary_parity(int u) const { return bparity_[static_cast<size_t>(u)]; }

    double pair_weight(const DefectNode &a, const DefectNode &b) const {
        return spatial_distance(a.node, b.node) + std::abs(a.round - b.round) * time_weight_;
    }
    double boundary_weight(const DefectNode &a) const { return boundary_distance(a.node); }

    /// Copy with every spatial edge weight scaled by exp(N(0, scale^2)) and the
    /// temporal weight by one shared factor of the same law.
    MatchingGraph perturbed(double scale, Rng &rng) const {
        MatchingGraph g = *this;
        for (auto &e : g.edges_) {
            e.weight *= std::exp(scale * standard_normal(rng));
        }
        g.time_weight_ *= std::exp(scale * standard_normal(rng));
        g.compute_shortest_paths();
        return g;
    }

    /// Copy with every weight multiplied by c > 0.
    MatchingGraph scaled(double c) const {
        MatchingGraph g = *this;
        for (auto &e : g.edges_) {
            e.weight *= c;
        }
        g.time_weight_ *= c;
        g.compute_shortest_paths();
        return g;
    }

  private:
    size_t idx(int u, int v) const { return static_cast<size_t>(u) * stabilizers_.size() + static_cast<size_t>(v); }

    // Floyd-Warshall over check nodes only (pairs never route through the
    // boundary; the matcher covers that by sending both ends to it).
    void compute_shortest_paths() {
        const size_t n = stabilizers_.size();
        const double inf = std::numeric_limits<double>::infinity();
        dist_.assign(n * n, inf);
        parity_.assign(n * n, 0);
        for (size_t u = 0; u < n; ++u) {
            dist_[u * n + u] = 0.0;
        }
        for (const auto &e : edges_) {
            if (e.b < 0) {
                continue;
            }
            const size_t ab = idx(e.a, e.b);
            if (e.weight < dist_[ab]) {
                dist_[ab] = dist_[idx(e.b, e.a)] = e.weight;
                parity_[ab] = parity_[idx(e.b, e.a)] = e.flips_logical;
            }
        }
        for (size_t k = 0; k < n; ++k) {
            for (size_t i = 0; i < n; ++i) {
                const double dik = dist_[i * n + k];
                if (dik == inf) {
                    continue;
                }
                for (size_t j = 0; j < n; ++j) {
                    const double cand = dik + dist_[k * n + j];
                    if (cand < dist_[i * n + j]) {
                        dist_[i * n + j] = cand;
                        parity_[i * n + j] = parity_[i * n + k] ^ parity_[k * n + j];
                    }
                }
            }
        }
        bdist_.assign(n, inf);
        bparity_.assign(n, 0);
        for (size_t u = 0; u < n; ++u) {
            for (const auto &e : edges_) {
                if (e.b >= 0) {
                    continue;
                }
                const double cand = dist_[idx(static_cast<int>(u), e.a)] + e.weight;
                if (cand < bdist_[u]) {
                    bdist_[u] = cand;
                    bparity_[u] = parity_[idx(static_cast<int>(u), e.a)] ^ e.flips_logical;
                }
            }
        }
    }

    CheckType checks_ = CheckType::Z;
    double time_weight_ = 1.0;
    std::vector<int> stabilizers_;
    std::vector<int> node_of_stab_;
    std::vector<Edge> edges_;
    std::vector<double> dist_;
    std::vector<uint8_t> parity_;
    std::vector<double> bdist_;
    std::vector<uint8_t> bparity_;
};

/// Graph for the checks of `checks` type under `noise`.
inline MatchingGraph build_matching_graph(const Lattice &lattice, const NoiseConfig &noise, CheckType checks) {
    noise.validate();
    const double space = log_odds_weight(2.0 * noise.p / 3.0);
    const double time =
        noise.kind == NoiseKind::CodeCapacity ? 1.0 : log_odds_weight(noise.measurement_error());
    return MatchingGraph(lattice, checks, space, time);
}

struct MatchingGraphs {
    MatchingGraph z;  // Z checks, predicts lambda_Z
    MatchingGraph x;  // X checks, predicts lambda_X
};

inline MatchingGraphs build_matching_graphs(const Lattice &lattice, const NoiseConfig &noise) {
    return {build_matching_graph(lattice, noise, CheckType::Z), build_matching_graph(lattice, noise, CheckType::X)};
}

inline constexpr int kBoundary = -1;

struct MatchResult {
    std::vector<int> partner;  // per defect: partner index or kBoundary
    double total_weight = 0.0;
    uint8_t prediction = 0;
    bool exact = true;  // false when the greedy fallback ran
};

inline constexpr size_t kExactMatchingLimit = 20;

namespace detail {

inline bool strictly_less(double a, double b) {
    return a < b - 1e-9 * (1.0 + std::abs(b));
}

inline uint8_t matching_parity(std::span<const DefectNode> defects, const MatchingGraph &g,
                               const std::vector<int> &partner) {
    uint8_t parity = 0;
    for (size_t i = 0; i < partner.size(); ++i) {
        if (partner[i] == kBoundary) {
            parity ^= g.boundary_parity(defects[i].node);
        } else if (static_cast<size_t>(partner[i]) > i) {
            parity ^= g.spatial_parity(defects[i].node, defects[static_cast<size_t>(partner[i])].node);
        }
    }
    return parity;
}

}  // namespace detail

/// Minimum-weight perfect matching of defects, each either paired with another
/// defect or sent to the boundary. Exact bitmask DP up to kExactMatchingLimit
/// defects; greedy cheapest-edge-first above that (result.exact = false).
/// Equal-weight optima resolve to the lexicographically smallest partner list,
/// with the boundary ordered before every defect.
inline MatchResult decode_mwpm(std::span<const DefectNode> defects, const MatchingGraph &g) {
    const size_t k = defects.size();
    MatchResult res;
    res.partner.assign(k, kBoundary);
    if (k == 0) {
        return res;
    }

    std::vector<double> w(k * k);
    std::vector<double> bw(k);
    for (size_t i = 0; i < k; ++i) {
        bw[i] = g.boundary_weight(defects[i]);
        for (size_t j = 0; j < k; ++j) {
            w[i * k + j] = g.pair_weight(defects[i], defects[j]);
        }
    }

    if (k <= kExactMatchingLimit) {
        // best[mask] = cheapest matching of the defects in mask. The lowest set
        // bit is matched first, which enumerates each matching exactly once.
        const size_t full = (size_t{1} << k) - 1;
        std::vector<double> best(full + 1);
        std::vector<int8_t> choice(full + 1);
        best[0] = 0.0;
        for (size_t mask = 1; mask <= full; ++mask) {
            const int i = std::countr_zero(mask);
            const size_t rest = mask & ~(size_t{1} << i);
            double cost = best[rest] + bw[static_cast<size_t>(i)];
            int8_t pick = kBoundary;
            for (size_t m = rest; m; m &= m - 1) {
                const int j = std::countr_zero(m);
                const double cand = best[rest & ~(size_t{1} << j)] + w[static_cast<size_t>(i) * k + static_cast<size_t>(j)];
                if (detail::strictly_less(cand, cost)) {
                    cost = cand;
                    pick = static_cast<int8_t>(j);
                }
            }
            best[mask] = cost;
            choice[mask] = pick;
        }
        size_t mask = full;
        while (mask) {
            const int i = std::countr_zero(mask);
            const int j = choice[mask];
            mask &= ~(size_t{1} << i);
            res.partner[static_cast<size_t>(i)] = j;
            if (j != kBoundary) {
                res.partner[static_cast<size_t>(j)] = i;
                mask &= ~(size_t{1} << j);
            }
        }
        res.total_weight = best[full];
    } else {
        res.exact = false;
        struct Cand {
            double weight;
            int i;
            int j;
        };
        std::vector<Cand> cands;
        for (size_t i = 0; i < k; ++i) {
            cands.push_back({bw[i], static_cast<int>(i), kBoundary});
            for (size_t j = i + 1; j < k; ++j) {
                cands.push_back({w[i * k + j], static_cast<int>(i), static_cast<int>(j)});
            }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand &a, const Cand &b) { return a.weight < b.weight; });
        std::vector<uint8_t> used(k, 0);
        for (const auto &c : cands) {
            if (used[static_cast<size_t>(c.i)] || (c.j != kBoundary && used[static_cast<size_t>(c.j)])) {
                continue;
            }
            used[static_cast<size_t>(c.i)] = 1;
            res.partner[static_cast<size_t>(c.i)] = c.j;
            if (c.j != kBoundary) {
                used[static_cast<size_t>(c.j)] = 1;
                res.partner[static_cast<size_t>(c.j)] = c.i;
            }
            res.total_weight += c.weight;
        }
    }
    res.prediction = detail::matching_parity(defects, g, res.partner);
    return res;
}

/// Defects of the graph's check type in a shot.
inline std::vector<DefectNode> defect_nodes(const Shot &shot, const MatchingGraph &g) {
    std::vector<DefectNode> out;
    for (int t = 1; t <= shot.num_records; ++t) {
        for (int i = 0; i < shot.num_stabilizers; ++i) {
            if (shot.event(i, t)) {
                const int node = g.node_of_stabilizer(i);
                if (node >= 0) {
                    out.push_back({node, t});
                }
            }
        }
    }
    return out;
}

struct ShotPrediction {
    uint8_t obs_z = 0;
    uint8_t obs_x = 0;
    bool exact = true;
};

/// Independent per-basis matching: Z-check defects give lambda_Z, X-check
/// defects lambda_X.
inline ShotPrediction decode_shot_mwpm(const Shot &shot, const MatchingGraphs &graphs) {
    const auto dz = defect_nodes(shot, graphs.z);
    const auto dx = defect_nodes(shot, graphs.x);
    const auto rz = decode_mwpm(dz, graphs.z);
    const auto rx = decode_mwpm(dx, graphs.x);
    return {rz.prediction, rx.prediction, rz.exact && rx.exact};
}

/// Majority vote of M matchings. Member 0 uses the unperturbed weights, members
/// 1..M-1 independently perturbed ones (see MatchingGraph::perturbed). Ties go
/// to member 0.
inline uint8_t libra_vote(std::span<const DefectNode> defects, const MatchingGraph &g, int members, double scale,
                          uint64_t seed) {
    if (members < 1 || scale < 0.0) {
        throw DomainError("libra_vote needs members >= 1 and scale >= 0");
    }
    const uint8_t base = decode_mwpm(defects, g).prediction;
    if (members == 1 || defects.empty()) {
        return base;
    }
    Rng rng(seed);
    int ones = base;
    for (int m = 1; m < members; ++m) {
        const auto pg = scale > 0.0 ? g.perturbed(scale, rng) : g;
        ones += decode_mwpm(defects, pg).prediction;
    }
    if (2 * ones > members) {
        return 1;
    }
    if (2 * ones < members) {
        return 0;
    }
    return base;
}

inline ShotPrediction decode_shot_libra(const Shot &shot, const MatchingGraphs &graphs, int members, double scale,
                                        uint64_t seed) {
    const auto dz = defect_nodes(shot, graphs.z);
    const auto dx = defect_nodes(shot, graphs.x);
    return {libra_vote(dz, graphs.z, members, scale, splitmix64(seed)),
            libra_vote(dx, graphs.x, members, scale, splitmix64(seed ^ 0x5851F42D4C957F2DULL)), true};
}

}  // namespace smd
