#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace volterra {

struct TimeGrid {
    double T = 1.0;
    int N = 1;

    double h() const { return T / N; }
    double node(int i) const { return T * i / N; }
    int nodes() const { return N + 1; }

    void validate() const {
        if (!(T > 0.0) || N <= 0) throw std::invalid_argument("TimeGrid requires T > 0, N > 0");
    }
};

/// Memory guard for large path/grid allocations (default 4 GiB).
void set_memory_budget(std::size_t bytes);
std::size_t memory_budget();

/// Worker cap for path-parallel loops (default 1). Results are deterministic
/// and independent of the cap: workers write disjoint path slices.
void set_thread_cap(int threads);
int thread_cap();

/// Runs fn(begin, end) over a partition of [0, n), on up to thread_cap() workers.
void parallel_for_paths(int n, const std::function<void(int, int)>& fn);

/// Counter-based normal variate: reproducible from (seed, path, step, coord),
/// order-independent so path-parallel generation is deterministic.
double counter_gaussian(std::uint64_t seed, std::uint64_t path, std::uint64_t step,
                        std::uint64_t coord);

class FilteredEnsemble;

/// Per-path, per-node values of a one-parameter process (dimension dim).
struct AdaptedProcess {
    int dim = 1;
    int paths = 0;
    int nodes = 0;
    std::vector<double> v;  // [path][node][dim]

    std::span<double> at(int path, int node) {
        return {v.data() + (static_cast<std::size_t>(path) * nodes + node) * dim,
                static_cast<std::size_t>(dim)};
    }
    std::span<const double> at(int path, int node) const {
        return {v.data() + (static_cast<std::size_t>(path) * nodes + node) * dim,
                static_cast<std::size_t>(dim)};
    }

    static AdaptedProcess zeros(const FilteredEnsemble& ens, int dim);
    static AdaptedProcess constant(const FilteredEnsemble& ens, std::span<const double> value);
    static AdaptedProcess from_fn(
        const FilteredEnsemble& ens, int dim,
        const std::function<void(int path, int node, std::span<double> out)>& fn);
};

/// Per-path values on the (t_i, s_j) grid; rows are t-nodes, cols s-steps
/// (or s-nodes when cols == N+1, as for fundamental solutions).
struct TwoParameterProcess {
    int dim = 1;
    int paths = 0;
    int rows = 0;
    int cols = 0;
    std::vector<double> v;  // [path][row][col][dim]

    std::span<double> at(int path, int i, int j) {
        std::size_t idx = ((static_cast<std::size_t>(path) * rows + i) * cols + j) * dim;
        return {v.data() + idx, static_cast<std::size_t>(dim)};
    }
    std::span<const double> at(int path, int i, int j) const {
        std::size_t idx = ((static_cast<std::size_t>(path) * rows + i) * cols + j) * dim;
        return {v.data() + idx, static_cast<std::size_t>(dim)};
    }

    static TwoParameterProcess zeros(int paths, int rows, int cols, int dim);
};

/// Regression feature set for least-squares Monte Carlo conditional
/// expectations: polynomials of total degree <= 2 in (W(t_i), caller features).
struct RegressionBasis {
    bool include_wiener = true;
    /// Extra adapted features f(path, node); each must be F_{t_node}-measurable.
    std::vector<std::function<double(int path, int node)>> features;
};

struct RegressionStats {
    int ridge_fallbacks = 0;       // singular normal matrix -> ridge 1e-10
    double max_residual = 0.0;     // sup over fits of rms residual
};

enum class EnsembleModel { Tree, MonteCarlo };

/// Discrete-time filtration carrier: time grid plus either an exact binary
/// tree (d = 1, all 2^N paths) or a seeded Monte Carlo bundle of Brownian
/// increments.
class FilteredEnsemble {
  public:
    static FilteredEnsemble tree(TimeGrid grid);
    static FilteredEnsemble montecarlo(TimeGrid grid, int paths, std::uint64_t seed, int d = 1);

    EnsembleModel model() const { return model_; }
    bool is_tree() const { return model_ == EnsembleModel::Tree; }
    const TimeGrid& grid() const { return grid_; }
    int paths() const { return paths_; }
    int dims() const { return d_; }
    std::uint64_t seed() const { return seed_; }

    double increment(int path, int step, int k = 0) const;
    double wiener(int path, int node, int k = 0) const;
    double path_weight(int) const { return 1.0 / paths_; }

    /// E[payoff | F_{t_node}] per path. Exact block average on the tree,
    /// least-squares regression on the feature basis for Monte Carlo.
    void cond_expect(std::span<const double> payoff, int dim, int node, std::span<double> out,
                     const RegressionBasis* basis = nullptr,
                     RegressionStats* stats = nullptr) const;

    /// Martingale-representation coefficient at one step:
    /// Z_j = E[payoff * dW_j^T | F_{s_j}] / h, laid out [path][dim][d].
    void repr_step(std::span<const double> payoff, int dim, int step, std::span<double> out,
                   const RegressionBasis* basis = nullptr,
                   RegressionStats* stats = nullptr) const;

    /// Plain expectation over paths.
    void mean(std::span<const double> payoff, int dim, std::span<double> out) const;

  private:
    EnsembleModel model_ = EnsembleModel::Tree;
    TimeGrid grid_;
    int paths_ = 0;
    int d_ = 1;
    std::uint64_t seed_ = 0;
    std::vector<double> wiener_;  // cached cumulative W per [path][node][d]

    void build_wiener_cache();
    void regression_fit(std::span<const double> target, int dim, int node,
                        std::span<double> out, const RegressionBasis* basis,
                        RegressionStats* stats) const;
};

struct EnsembleSpec {
    EnsembleModel model = EnsembleModel::Tree;
    int paths = 0;  // Monte Carlo only
    std::uint64_t seed = 0;
    int d = 1;
};

FilteredEnsemble build_ensemble(const TimeGrid& grid, const EnsembleSpec& spec);

/// Tree-model adaptedness certificate: values at t_i constant across paths
/// sharing the first i increments (within tol). Monte Carlo returns true.
bool check_adapted(const FilteredEnsemble& ens, const AdaptedProcess& p, double tol = 0.0);

struct MartingaleRepresentation {
    /// z[path][j][dim*d] for j < upto_node.
    std::vector<double> z;
    int steps = 0;
    double residual = 0.0;  // rms of Y - E[Y] - sum Z dW (exactly 0 on tree)
};

/// Decomposes Y(t_i) = E[Y(t_i)] + sum_{j<i} Z(t_i, s_j) dW(s_j).
MartingaleRepresentation martingale_represent(const FilteredEnsemble& ens,
                                              std::span<const double> y, int dim, int upto_node,
                                              const RegressionBasis* basis = nullptr,
                                              RegressionStats* stats = nullptr);

/// Left-rectangle estimate of E[int_0^T e^{2 beta t} |f(t)|^2 dt]^{1/2}.
double weighted_sq_norm(const FilteredEnsemble& ens, const AdaptedProcess& p, double beta);

/// Two-parameter analogue: E[int e^{2 beta t} int |z(t,s)|^2 ds dt]^{1/2}
/// with the s-integral running over all stored columns.
double weighted_sq_norm(const FilteredEnsemble& ens, const TwoParameterProcess& z, double beta);

}  // namespace volterra
