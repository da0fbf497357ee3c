// Exact discrete optimal transport under the squared Euclidean ground cost.
//
// solve_simplex implements the transportation simplex: north-west-corner
// initial basis, spanning-tree duals, Dantzig pricing with a fallback to
// Bland's rule after a run of degenerate pivots so cycling cannot occur.
// brute_force_assignment enumerates permutations and exists purely as a
// test oracle for small uniform-weight instances.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "cotmap/matrix.hpp"

namespace cotmap {

struct DiscreteOTProblem {
    Matrix source;                 // n x d
    Matrix target;                 // m x d
    std::vector<double> source_w;  // n, nonnegative, sums to 1
    std::vector<double> target_w;  // m, nonnegative, sums to 1

    DiscreteOTProblem(Matrix src, Matrix tgt, std::vector<double> sw, std::vector<double> tw)
        : source(std::move(src)), target(std::move(tgt)), source_w(std::move(sw)),
          target_w(std::move(tw)) {
        if (source.cols != target.cols)
            throw std::invalid_argument("DiscreteOTProblem: dimension mismatch");
        if (source_w.size() != source.rows || target_w.size() != target.rows)
            throw std::invalid_argument("DiscreteOTProblem: weight count mismatch");
        check_weights(source_w, "source");
        check_weights(target_w, "target");
    }

    static DiscreteOTProblem uniform(Matrix src, Matrix tgt) {
        std::vector<double> sw(src.rows, 1.0 / static_cast<double>(src.rows));
        std::vector<double> tw(tgt.rows, 1.0 / static_cast<double>(tgt.rows));
        return DiscreteOTProblem(std::move(src), std::move(tgt), std::move(sw), std::move(tw));
    }

private:
    static void check_weights(const std::vector<double>& w, const char* side) {
        if (w.empty())
            throw std::invalid_argument(std::string("DiscreteOTProblem: empty ") + side);
        double sum = 0.0;
        for (double x : w) {
            if (x < 0.0)
                throw std::invalid_argument(std::string("DiscreteOTProblem: negative ") + side +
                                            " weight");
            sum += x;
        }
        if (std::fabs(sum - 1.0) > 1e-9)
            throw std::invalid_argument(std::string("DiscreteOTProblem: ") + side +
                                        " weights sum to " + std::to_string(sum) +
                                        ", expected 1 (renormalize before solving)");
    }
};

struct PlanEntry {
    std::size_t i, j;
    double mass;
};

struct TransportPlan {
    std::vector<PlanEntry> entries; // basic cells, at most n+m-1
    double cost = 0.0;

    // Marginal feasibility: row sums match source weights, column sums match
    // target weights.
    bool feasible(const DiscreteOTProblem& p, double tol = 1e-8) const {
        std::vector<double> rs(p.source_w.size(), 0.0), cs(p.target_w.size(), 0.0);
        for (const auto& e : entries) {
            if (e.mass < -tol) return false;
            rs[e.i] += e.mass;
            cs[e.j] += e.mass;
        }
        for (std::size_t i = 0; i < rs.size(); ++i)
            if (std::fabs(rs[i] - p.source_w[i]) > tol) return false;
        for (std::size_t j = 0; j < cs.size(); ++j)
            if (std::fabs(cs[j] - p.target_w[j]) > tol) return false;
        return true;
    }
};

inline Matrix cost_matrix(const DiscreteOTProblem& p) {
    Matrix c(p.source.rows, p.target.rows);
    for (std::size_t i = 0; i < p.source.rows; ++i)
        for (std::size_t j = 0; j < p.target.rows; ++j)
            c.at(i, j) = sq_dist(p.source.row(i), p.target.row(j));
    return c;
}

namespace detail {

// Spanning-tree state of the transportation simplex basis.
struct SimplexState {
    std::size_t n, m;
    std::vector<std::size_t> cell_i, cell_j; // basic cells, n+m-1 of them
    std::vector<double> mass;
    std::vector<std::vector<std::size_t>> row_adj, col_adj; // node -> incident basic cells

    explicit SimplexState(std::size_t n_, std::size_t m_) : n(n_), m(m_) {
        row_adj.resize(n);
        col_adj.resize(m);
    }

    void add_edge(std::size_t i, std::size_t j, double w) {
        cell_i.push_back(i);
        cell_j.push_back(j);
        mass.push_back(w);
        row_adj[i].push_back(cell_i.size() - 1);
        col_adj[j].push_back(cell_i.size() - 1);
    }

    void replace_edge(std::size_t slot, std::size_t i, std::size_t j, double w) {
        auto drop = [slot](std::vector<std::size_t>& v) {
            v.erase(std::find(v.begin(), v.end(), slot));
        };
        drop(row_adj[cell_i[slot]]);
        drop(col_adj[cell_j[slot]]);
        cell_i[slot] = i;
        cell_j[slot] = j;
        mass[slot] = w;
        row_adj[i].push_back(slot);
        col_adj[j].push_back(slot);
    }
};

} // namespace detail

// Exact solver for balanced discrete OT. Throws "simplex stalled" if the
// pivot cap is exceeded.
inline TransportPlan solve_simplex(const DiscreteOTProblem& p) {
    const std::size_t n = p.source.rows, m = p.target.rows;
    const Matrix c = cost_matrix(p);

    detail::SimplexState st(n, m);

    // North-west-corner start. Exactly one index advances per cell, so the
    // basis is a staircase spanning tree with exactly n+m-1 edges; ties
    // leave zero-mass basic cells.
    {
        std::vector<double> a = p.source_w, b = p.target_w;
        std::size_t i = 0, j = 0;
        for (std::size_t step = 0; step + 1 < n + m; ++step) {
            const double w = std::max(0.0, std::min(a[i], b[j]));
            st.add_edge(i, j, w);
            a[i] -= w;
            b[j] -= w;
            if (i + 1 == n)
                ++j;
            else if (j + 1 == m)
                ++i;
            else if (a[i] <= b[j])
                ++i;
            else
                ++j;
        }
    }

    std::vector<double> u(n), v(m);
    std::vector<char> row_seen(n), col_seen(m);
    std::vector<std::size_t> stack;

    auto compute_duals = [&] {
        std::fill(row_seen.begin(), row_seen.end(), 0);
        std::fill(col_seen.begin(), col_seen.end(), 0);
        u[0] = 0.0;
        row_seen[0] = 1;
        stack.assign(1, 0); // encoded: row r -> r, col j -> n + j
        while (!stack.empty()) {
            const std::size_t node = stack.back();
            stack.pop_back();
            if (node < n) {
                for (std::size_t e : st.row_adj[node]) {
                    const std::size_t j = st.cell_j[e];
                    if (!col_seen[j]) {
                        col_seen[j] = 1;
                        v[j] = c.at(node, j) - u[node];
                        stack.push_back(n + j);
                    }
                }
            } else {
                const std::size_t j = node - n;
                for (std::size_t e : st.col_adj[j]) {
                    const std::size_t i = st.cell_i[e];
                    if (!row_seen[i]) {
                        row_seen[i] = 1;
                        u[i] = c.at(i, j) - v[j];
                        stack.push_back(i);
                    }
                }
            }
        }
    };

    double cmax = 0.0;
    for (double x : c.data) cmax = std::max(cmax, std::fabs(x));
    const double tol = 1e-12 * (1.0 + cmax);

    // Finds the tree path from row `si` to col `sj` (parents over nodes).
    std::vector<std::int64_t> parent_edge(n + m);
    auto find_cycle_path = [&](std::size_t si, std::size_t sj, std::vector<std::size_t>& path) {
        std::fill(parent_edge.begin(), parent_edge.end(), -1);
        std::fill(row_seen.begin(), row_seen.end(), 0);
        std::fill(col_seen.begin(), col_seen.end(), 0);
        row_seen[si] = 1;
        stack.assign(1, si);
        while (!stack.empty()) {
            const std::size_t node = stack.back();
            stack.pop_back();
            if (node == n + sj) break;
            if (node < n) {
                for (std::size_t e : st.row_adj[node]) {
                    const std::size_t j = st.cell_j[e];
                    if (!col_seen[j]) {
                        col_seen[j] = 1;
                        parent_edge[n + j] = static_cast<std::int64_t>(e);
                        stack.push_back(n + j);
                    }
                }
            } else {
                for (std::size_t e : st.col_adj[node - n]) {
                    const std::size_t i = st.cell_i[e];
                    if (!row_seen[i]) {
                        row_seen[i] = 1;
                        parent_edge[i] = static_cast<std::int64_t>(e);
                        stack.push_back(i);
                    }
                }
            }
        }
        // walk back from col sj to row si
        path.clear();
        std::size_t node = n + sj;
        while (node != si) {
            const std::int64_t e = parent_edge[node];
            if (e < 0) throw std::runtime_error("solve_simplex: basis lost connectivity");
            path.push_back(static_cast<std::size_t>(e));
            const std::size_t i = st.cell_i[static_cast<std::size_t>(e)];
            const std::size_t j = st.cell_j[static_cast<std::size_t>(e)];
            node = (node == n + j) ? i : n + j;
        }
    };

    const std::size_t max_pivots = 2000 * (n + m) + 20000;
    std::size_t degenerate_run = 0;
    bool bland = false;
    std::vector<std::size_t> path;

    for (std::size_t pivot = 0;; ++pivot) {
        if (pivot >= max_pivots) throw std::runtime_error("simplex stalled");
        compute_duals();

        // entering cell
        std::int64_t ei = -1, ej = -1;
        if (bland) {
            for (std::size_t i = 0; i < n && ei < 0; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    if (c.at(i, j) - u[i] - v[j] < -tol) {
                        ei = static_cast<std::int64_t>(i);
                        ej = static_cast<std::int64_t>(j);
                        break;
                    }
        } else {
            double best = -tol;
            for (std::size_t i = 0; i < n; ++i) {
                const double* crow = c.data.data() + i * m;
                const double ui = u[i];
                for (std::size_t j = 0; j < m; ++j) {
                    const double rc = crow[j] - ui - v[j];
                    if (rc < best) {
                        best = rc;
                        ei = static_cast<std::int64_t>(i);
                        ej = static_cast<std::int64_t>(j);
                    }
                }
            }
        }
        if (ei < 0) break; // optimal

        find_cycle_path(static_cast<std::size_t>(ei), static_cast<std::size_t>(ej), path);

        // Path runs col(ej) -> ... -> row(ei); with the entering edge at
        // position 0, edges at odd positions give up mass.
        double theta = std::numeric_limits<double>::infinity();
        std::size_t leave = 0;
        bool have_leave = false;
        for (std::size_t k = 0; k < path.size(); ++k) {
            if (k % 2 != 0) continue; // positions 1,3,... of the cycle
            const std::size_t e = path[k];
            const bool better =
                !have_leave || st.mass[e] < theta - 1e-15 ||
                (std::fabs(st.mass[e] - theta) <= 1e-15 &&
                 (st.cell_i[e] < st.cell_i[leave] ||
                  (st.cell_i[e] == st.cell_i[leave] && st.cell_j[e] < st.cell_j[leave])));
            if (better) {
                theta = st.mass[e];
                leave = e;
                have_leave = true;
            }
        }
        if (!have_leave) throw std::runtime_error("solve_simplex: degenerate cycle");

        for (std::size_t k = 0; k < path.size(); ++k) {
            if (k % 2 == 0)
                st.mass[path[k]] -= theta;
            else
                st.mass[path[k]] += theta;
        }
        st.replace_edge(leave, static_cast<std::size_t>(ei), static_cast<std::size_t>(ej), theta);

        if (theta <= 1e-15) {
            if (++degenerate_run > n + m && !bland) bland = true;
        } else {
            degenerate_run = 0;
            bland = false;
        }
    }

    TransportPlan plan;
    plan.entries.reserve(st.mass.size());
    double cost = 0.0;
    for (std::size_t e = 0; e < st.mass.size(); ++e) {
        cost += st.mass[e] * c.at(st.cell_i[e], st.cell_j[e]);
        if (st.mass[e] != 0.0) plan.entries.push_back({st.cell_i[e], st.cell_j[e], st.mass[e]});
    }
    plan.cost = cost;
    return plan;
}

// Exhaustive assignment oracle: minimum over all permutations, valid because
// balanced uniform-weight OT admits a permutation solution.
inline double brute_force_assignment(const DiscreteOTProblem& p) {
    const std::size_t n = p.source.rows;
    if (p.target.rows != n)
        throw std::invalid_argument("brute_force_assignment: requires n == m");
    if (n > 8) throw std::invalid_argument("brute_force_assignment: n > 8 refused");
    for (double w : p.source_w)
        if (std::fabs(w - 1.0 / static_cast<double>(n)) > 1e-12)
            throw std::invalid_argument("brute_force_assignment: weights must be uniform");
    for (double w : p.target_w)
        if (std::fabs(w - 1.0 / static_cast<double>(n)) > 1e-12)
            throw std::invalid_argument("brute_force_assignment: weights must be uniform");

    const Matrix c = cost_matrix(p);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double cost = 0.0;
        for (std::size_t i = 0; i < n; ++i) cost += c.at(i, perm[i]);
        best = std::min(best, cost);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / static_cast<double>(n);
}

// Mean pairwise squared distance over unordered pairs:
// (2 / (N(N-1))) * sum_{j1<j2} ||y_j1 - y_j2||^2.
inline double u_statistic_bound(const Matrix& samples) {
    const std::size_t n = samples.rows;
    if (n < 2) throw std::invalid_argument("u_statistic_bound: need at least 2 samples");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) acc += sq_dist(samples.row(i), samples.row(j));
    return 2.0 * acc / (static_cast<double>(n) * static_cast<double>(n - 1));
}

} // namespace cotmap
