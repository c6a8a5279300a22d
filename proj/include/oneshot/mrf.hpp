#pragma once

// Correspondence refinement on the detected grid graph.
//
// E(X) = sum_v g_v(X_v) + sum_(u,v) h_uv(X_u, X_v) with g = -log prob (G_MAX off the list) and
// h = 0 when the pattern adjacency agrees with the edge direction, lambda otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oneshot/core/error.hpp"
#include "oneshot/graphext.hpp"
#include "oneshot/pattern.hpp"

namespace oneshot {

using Labeling = std::vector<std::int32_t>;  // kNoNode = unassigned

inline constexpr double kGMax = 50.0;

/// Row-major (or column-major) lattice adjacency for a rows x cols grid of IDs.
inline PatternAdjacency lattice_adjacency(int rows, int cols, bool column_major = false) {
    PatternAdjacency a;
    a.neighbors.resize(static_cast<std::size_t>(rows) * cols);
    auto id = [&](int i, int j) { return column_major ? j * rows + i : i * cols + j; };
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            auto& n = a.neighbors[static_cast<std::size_t>(id(i, j))];
            n[index_of(Direction::Up)] = i > 0 ? id(i - 1, j) : kNoNode;
            n[index_of(Direction::Down)] = i + 1 < rows ? id(i + 1, j) : kNoNode;
            n[index_of(Direction::Left)] = j > 0 ? id(i, j - 1) : kNoNode;
            n[index_of(Direction::Right)] = j + 1 < cols ? id(i, j + 1) : kNoNode;
        }
    return a;
}

// --- energy ------------------------------------------------------------------------

inline double data_cost(const GraphNode& n, std::int32_t label) {
    for (const auto& c : n.candidates)
        if (c.id == label) return std::min(kGMax, -std::log(c.prob));
    return kGMax;
}

inline double smoothness_cost(const PatternAdjacency& adj, std::int32_t from, std::int32_t to, Direction d, double lambda) {
    return adj(from, d) == to && to != kNoNode ? 0.0 : lambda;
}

inline void require_assigned(const DetectedGraph& g, const Labeling& x) {
    if (x.size() != g.size()) throw StageError("refine", "labeling size does not match the graph");
    for (std::size_t n = 0; n < x.size(); ++n)
        if (x[n] == kNoNode) throw StageError("refine", "node " + std::to_string(n) + " is unassigned");
}

/// Each undirected edge counts once (its right/down orientation).
inline double energy(const DetectedGraph& g, const PatternAdjacency& adj, const Labeling& x, double lambda) {
    require_assigned(g, x);
    double e = 0;
    for (std::size_t n = 0; n < g.size(); ++n) {
        e += data_cost(g.nodes[n], x[n]);
        for (auto d : {Direction::Right, Direction::Down}) {
            const auto m = g.links[n][index_of(d)];
            if (m != kNoNode) e += smoothness_cost(adj, x[n], x[static_cast<std::size_t>(m)], d, lambda);
        }
    }
    return e;
}

/// 2 * median gap between the top two data costs, floored at 1.
inline double default_lambda(const DetectedGraph& g) {
    std::vector<double> gaps;
    for (const auto& n : g.nodes)
        if (n.candidates.size() >= 2) gaps.push_back(-std::log(n.candidates[1].prob) + std::log(n.candidates[0].prob));
    if (gaps.empty()) return 1.0;
    std::nth_element(gaps.begin(), gaps.begin() + static_cast<std::ptrdiff_t>(gaps.size() / 2), gaps.end());
    return std::max(1.0, 2.0 * gaps[gaps.size() / 2]);
}

// --- solvers ---------------------------------------------------------------------------

struct RefineResult {
    Labeling labels;
    bool converged = false;
    int sweeps = 0;
    std::vector<int> scores;           // per-node vote score (vote solver) at termination
    std::vector<double> energy_trace;  // energy before the first sweep and after each sweep (icm)
    std::vector<long> score_trace;     // total vote score before the first sweep and after each sweep (vote)
};

inline void require_candidates(const DetectedGraph& g) {
    for (std::size_t n = 0; n < g.size(); ++n)
        if (g.nodes[n].candidates.empty()) throw StageError("refine", "node " + std::to_string(n) + " has no candidates");
}


/// Node visiting order: by pixel row, then column, then index.
inline std::vector<std::size_t> raster_order(const DetectedGraph& g) {
    std::vector<std::size_t> order(g.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto &pa = g.nodes[a].pixel, &pb = g.nodes[b].pixel;
        return pa.y() < pb.y() || (pa.y() == pb.y() && pa.x() < pb.x());
    });
    return order;
}

/// Number of neighbors of node n whose current label is what `label` predicts in that direction.
inline int vote_score(const DetectedGraph& g, const PatternAdjacency& adj, const Labeling& x, std::size_t n, std::int32_t label) {
    int s = 0;
    for (auto d : kDirections) {
        const auto m = g.links[n][index_of(d)];
        if (m == kNoNode) continue;
        const auto expect = adj(label, d);
        s += expect != kNoNode && x[static_cast<std::size_t>(m)] == expect;
    }
    return s;
}

/// Score of every candidate of node n under labeling x, in candidate order.
inline std::vector<int> candidate_scores(const DetectedGraph& g, const PatternAdjacency& adj, const Labeling& x, std::size_t n) {
    std::vector<int> s;
    for (const auto& c : g.nodes[n].candidates) s.push_back(vote_score(g, adj, x, n, c.id));
    return s;
}

namespace detail {

/// Candidate index preferred under (key descending, prob descending, id ascending).
template <typename Key>
std::size_t best_candidate(const GraphNode& node, Key&& key) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < node.candidates.size(); ++k) {
        const auto kb = key(best), kk = key(k);
        const auto &cb = node.candidates[best], &ck = node.candidates[k];
        if (kk > kb || (kk == kb && (ck.prob > cb.prob || (ck.prob == cb.prob && ck.id < cb.id)))) best = k;
    }
    return best;
}

inline long total_score(const DetectedGraph& g, const PatternAdjacency& adj, const Labeling& x) {
    long s = 0;
    for (std::size_t n = 0; n < g.size(); ++n) s += vote_score(g, adj, x, n, x[n]);
    return s;
}

}  // namespace detail

/// Highest-probability candidate per node; equal probabilities resolve to the lower ID.
inline Labeling top_candidates(const DetectedGraph& g) {
    require_candidates(g);
    Labeling x(g.size());
    for (std::size_t n = 0; n < g.size(); ++n)
        x[n] = g.nodes[n].candidates[detail::best_candidate(g.nodes[n], [](std::size_t) { return 0; })].id;
    return x;
}

/// Neighbor-ID voting: each node takes the candidate that agrees with the most neighbors.
inline RefineResult vote_refine(const DetectedGraph& g, const PatternAdjacency& adj, int max_sweeps = 50) {
    RefineResult r;
    r.labels = top_candidates(g);
    const auto order = raster_order(g);
    r.score_trace.push_back(detail::total_score(g, adj, r.labels));
    while (r.sweeps < max_sweeps) {
        bool changed = false;
        for (auto n : order) {
            const auto& node = g.nodes[n];
            const auto scores = candidate_scores(g, adj, r.labels, n);
            const auto k = detail::best_candidate(node, [&](std::size_t i) { return scores[i]; });
            if (node.candidates[k].id != r.labels[n]) {
                r.labels[n] = node.candidates[k].id;
                changed = true;
            }
        }
        ++r.sweeps;
        r.score_trace.push_back(detail::total_score(g, adj, r.labels));
        if (!changed) {
            r.converged = true;
            break;
        }
    }
    r.scores.resize(g.size());
    for (std::size_t n = 0; n < g.size(); ++n) r.scores[n] = vote_score(g, adj, r.labels, n, r.labels[n]);
    return r;
}

/// Local energy of node n taking `label`, neighbors fixed.
inline double local_energy(const DetectedGraph& g, const PatternAdjacency& adj, const Labeling& x, std::size_t n,
                           std::int32_t label, double lambda) {
    double e = data_cost(g.nodes[n], label);
    for (auto d : kDirections) {
        const auto m = g.links[n][index_of(d)];
        if (m != kNoNode) e += smoothness_cost(adj, label, x[static_cast<std::size_t>(m)], d, lambda);
    }
    return e;
}

/// Iterated conditional modes over the candidate lists; a label changes only on strict improvement.
inline RefineResult icm_refine(const DetectedGraph& g, const PatternAdjacency& adj, double lambda, int max_sweeps = 50) {
    RefineResult r;
    r.labels = top_candidates(g);
    const auto order = raster_order(g);
    r.energy_trace.push_back(energy(g, adj, r.labels, lambda));
    while (r.sweeps < max_sweeps) {
        bool changed = false;
        for (auto n : order) {
            const auto& node = g.nodes[n];
            const double current = local_energy(g, adj, r.labels, n, r.labels[n], lambda);
            std::vector<double> e;
            for (const auto& c : node.candidates) e.push_back(local_energy(g, adj, r.labels, n, c.id, lambda));
            const auto k = detail::best_candidate(node, [&](std::size_t i) { return -e[i]; });
            if (e[k] < current - 1e-12 && node.candidates[k].id != r.labels[n]) {
                r.labels[n] = node.candidates[k].id;
                changed = true;
            }
        }
        ++r.sweeps;
        r.energy_trace.push_back(energy(g, adj, r.labels, lambda));
        if (!changed) {
            r.converged = true;
            break;
        }
    }
    r.scores.resize(g.size());
    for (std::size_t n = 0; n < g.size(); ++n) r.scores[n] = vote_score(g, adj, r.labels, n, r.labels[n]);
    return r;
}

/// Exact minimum over all candidate combinations; ties resolve to the lexicographically first
/// combination of candidate indices in node order. Depth-first with pruning on the partial energy,
/// which is exact because every term is non-negative.
inline RefineResult brute_force_map(const DetectedGraph& g, const PatternAdjacency& adj, double lambda,
                                    double max_combinations = 1e7) {
    require_candidates(g);
    double combos = 1;
    for (const auto& n : g.nodes) combos *= static_cast<double>(n.candidates.size());
    if (combos > max_combinations) throw StageError("refine", "instance too large for exact search");
    const std::size_t nn = g.size();
    std::vector<std::vector<double>> unary(nn);
    for (std::size_t n = 0; n < nn; ++n)
        for (const auto& c : g.nodes[n].candidates) unary[n].push_back(data_cost(g.nodes[n], c.id));
    // Edges to earlier nodes, charged when the later endpoint is assigned.
    struct Back {
        std::size_t other;
        Direction dir;  // from the earlier node to this one
    };
    std::vector<std::vector<Back>> back(nn);
    for (std::size_t n = 0; n < nn; ++n)
        for (auto d : {Direction::Right, Direction::Down}) {
            const auto m = g.links[n][index_of(d)];
            if (m == kNoNode) continue;
            const auto mm = static_cast<std::size_t>(m);
            if (mm > n) back[mm].push_back({n, d});
            else back[n].push_back({mm, opposite(d)});
        }
    std::vector<std::size_t> idx(nn, 0), best_idx(nn, 0);
    std::vector<double> partial(nn + 1, 0.0);
    double best = std::numeric_limits<double>::infinity();
    auto label = [&](std::size_t n) { return g.nodes[n].candidates[idx[n]].id; };
    std::size_t depth = 0;
    if (nn == 0) best = 0;
    while (nn > 0) {
        // Evaluate the current choice at `depth`.
        double e = partial[depth] + unary[depth][idx[depth]];
        for (const auto& b : back[depth]) e += smoothness_cost(adj, label(b.other), label(depth), b.dir, lambda);
        bool descend = e < best;
        if (descend && depth + 1 == nn) {
            best = e;
            best_idx = idx;
            descend = false;
        }
        if (descend) {
            partial[++depth] = e;
            idx[depth] = 0;
            continue;
        }
        // Advance to the next sibling, backtracking as needed.
        while (++idx[depth] >= g.nodes[depth].candidates.size()) {
            if (depth == 0) break;
            --depth;
        }
        if (depth == 0 && idx[0] >= g.nodes[0].candidates.size()) break;
    }
    RefineResult r;
    r.labels.resize(nn);
    for (std::size_t n = 0; n < nn; ++n) r.labels[n] = g.nodes[n].candidates[best_idx[n]].id;
    r.converged = true;
    r.energy_trace = {energy(g, adj, r.labels, lambda)};
    r.scores.resize(nn);
    for (std::size_t n = 0; n < nn; ++n) r.scores[n] = vote_score(g, adj, r.labels, n, r.labels[n]);
    return r;
}

// --- synthetic instances ------------------------------------------------------------------

struct InstanceOptions {
    int rows = 3;
    int cols = 3;
    int max_candidates = 5;
    bool random_count = false;  // draw each list length from [1, max_candidates]
    double corruption = 0.0;    // fraction of nodes whose truth is ranked below an impostor
};

struct SyntheticInstance {
    DetectedGraph graph;
    Labeling truth;
};

/// A fully linked rows x cols window of the pattern lattice with ranked candidate lists around the
/// true labels (distractors within two lattice steps).
inline SyntheticInstance synthetic_instance(const GridPattern& pattern, const InstanceOptions& opt, std::uint64_t seed) {
    if (opt.rows > pattern.rows || opt.cols > pattern.cols) throw ConfigError("instance window exceeds the pattern");
    if (opt.max_candidates < 1) throw ConfigError("instance needs at least one candidate per node");
    std::mt19937_64 rng(seed);
    const int i0 = static_cast<int>(rng() % static_cast<std::uint64_t>(pattern.rows - opt.rows + 1));
    const int j0 = static_cast<int>(rng() % static_cast<std::uint64_t>(pattern.cols - opt.cols + 1));
    std::uniform_real_distribution<double> unit(0.05, 1.0), mass(0.8, 1.0);
    SyntheticInstance inst;
    for (int r = 0; r < opt.rows; ++r)
        for (int c = 0; c < opt.cols; ++c) {
            const std::int32_t t = pattern.id(i0 + r, j0 + c);
            GraphNode n;
            n.pixel = Vec2(20.0 * c, 20.0 * r);
            n.code = pattern.code(i0 + r, j0 + c);
            const int k = opt.random_count ? 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(opt.max_candidates))
                                           : opt.max_candidates;
            std::vector<std::int32_t> pool;
            for (int di = -2; di <= 2; ++di)
                for (int dj = -2; dj <= 2; ++dj) {
                    const int i = i0 + r + di, j = j0 + c + dj;
                    if ((di || dj) && i >= 0 && j >= 0 && i < pattern.rows && j < pattern.cols) pool.push_back(pattern.id(i, j));
                }
            std::shuffle(pool.begin(), pool.end(), rng);
            std::vector<double> p(static_cast<std::size_t>(k));
            for (double& v : p) v = unit(rng);
            std::sort(p.rbegin(), p.rend());
            const double scale = mass(rng) / std::accumulate(p.begin(), p.end(), 0.0);
            n.candidates.push_back({t, p[0] * scale});
            for (int q = 1; q < k && q - 1 < static_cast<int>(pool.size()); ++q) n.candidates.push_back({pool[q - 1], p[q] * scale});
            inst.graph.add_node(std::move(n));
            inst.truth.push_back(t);
        }
    for (int r = 0; r < opt.rows; ++r)
        for (int c = 0; c < opt.cols; ++c) {
            const auto a = static_cast<std::int32_t>(r * opt.cols + c);
            if (c + 1 < opt.cols) inst.graph.link(a, a + 1, Direction::Right);
            if (r + 1 < opt.rows) inst.graph.link(a, a + opt.cols, Direction::Down);
        }
    corrupt_candidates(inst.graph, inst.truth, pattern, opt.corruption, rng());
    for (auto& n : inst.graph.nodes)
        if (static_cast<int>(n.candidates.size()) > opt.max_candidates) n.candidates.resize(static_cast<std::size_t>(opt.max_candidates));
    return inst;
}

/// Fraction of nodes whose label equals the truth.
inline double label_accuracy(const Labeling& x, const Labeling& truth) {
    if (x.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t n = 0; n < x.size() && n < truth.size(); ++n) ok += x[n] == truth[n];
    return static_cast<double>(ok) / static_cast<double>(x.size());
}

// --- JSON ----------------------------------------------------------------------------------

inline nlohmann::json to_json(const RefineResult& r, const std::string& solver, double lambda, double e) {
    return {{"solver", solver}, {"labels", r.labels},  {"converged", r.converged}, {"sweeps", r.sweeps},
            {"scores", r.scores}, {"lambda", lambda}, {"energy", e}};
}

inline Labeling labels_from_json(const nlohmann::json& j, const DetectedGraph& g, const GridPattern& pattern) {
    Labeling x;
    try {
        x = j.at("labels").get<Labeling>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("labels: ") + e.what());
    }
    if (x.size() != g.size()) throw FormatError("labels: count does not match the graph");
    for (std::size_t n = 0; n < x.size(); ++n)
        if (x[n] != kNoNode && !pattern.contains_id(x[n])) throw FormatError("labels: node " + std::to_string(n) + " outside the pattern");
    return x;
}

/// Regression-corpus instance: graph plus a pattern reference (inline JSON or a path).
inline nlohmann::json instance_to_json(const DetectedGraph& g, const nlohmann::json& pattern_ref, const Labeling& truth = {}) {
    nlohmann::json j = {{"graph", to_json(g)}, {"pattern", pattern_ref}};
    if (!truth.empty()) j["truth"] = truth;
    return j;
}

}  // namespace oneshot
