#include "volterra/ensemble.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <mutex>
#include <numbers>
#include <thread>

namespace volterra {

namespace {

std::atomic<std::size_t> g_budget{4ull << 30};
std::atomic<int> g_thread_cap{1};

void guard_alloc(std::size_t doubles) {
    if (doubles * sizeof(double) > g_budget.load()) {
        throw std::runtime_error("allocation of " + std::to_string(doubles * sizeof(double)) +
                                 " bytes exceeds the memory budget");
    }
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_key(std::uint64_t seed, std::uint64_t path, std::uint64_t step,
                             std::uint64_t coord, std::uint64_t salt) {
    std::uint64_t k = splitmix64(seed ^ 0x8F1BBCDC0B0FD1A3ull);
    k = splitmix64(k ^ path);
    k = splitmix64(k ^ (step << 1));
    k = splitmix64(k ^ (coord << 2));
    return splitmix64(k ^ salt);
}

// Cholesky solve of the symmetric positive (semi)definite system A x = b.
// Returns false on a non-positive pivot.
bool cholesky_solve(std::vector<double>& a, std::vector<double>& b, int n, int nrhs) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[i * n + j];
            for (int k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            if (i == j) {
                if (s <= 0.0) return false;
                a[i * n + i] = std::sqrt(s);
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    for (int r = 0; r < nrhs; ++r) {
        double* x = b.data() + static_cast<std::size_t>(r) * n;
        for (int i = 0; i < n; ++i) {
            double s = x[i];
            for (int k = 0; k < i; ++k) s -= a[i * n + k] * x[k];
            x[i] = s / a[i * n + i];
        }
        for (int i = n - 1; i >= 0; --i) {
            double s = x[i];
            for (int k = i + 1; k < n; ++k) s -= a[k * n + i] * x[k];
            x[i] = s / a[i * n + i];
        }
    }
    return true;
}

}  // namespace

void set_memory_budget(std::size_t bytes) { g_budget.store(bytes); }
std::size_t memory_budget() { return g_budget.load(); }

void set_thread_cap(int threads) { g_thread_cap.store(std::max(1, threads)); }
int thread_cap() { return g_thread_cap.load(); }

void parallel_for_paths(int n, const std::function<void(int, int)>& fn) {
    int workers = std::min(thread_cap(), n);
    if (workers <= 1) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex err_mutex;
    int chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        int begin = w * chunk;
        int end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&, begin, end] {
            try {
                fn(begin, end);
            } catch (...) {
                std::scoped_lock lock(err_mutex);
                if (!failed.exchange(true)) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

double counter_gaussian(std::uint64_t seed, std::uint64_t path, std::uint64_t step,
                        std::uint64_t coord) {
    std::uint64_t h1 = mix_key(seed, path, step, coord, 0x1234567890ABCDEFull);
    std::uint64_t h2 = mix_key(seed, path, step, coord, 0xFEDCBA0987654321ull);
    // u1 in (0, 1], u2 in [0, 1).
    double u1 = (static_cast<double>(h1 >> 11) + 1.0) * 0x1.0p-53;
    double u2 = static_cast<double>(h2 >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

AdaptedProcess AdaptedProcess::zeros(const FilteredEnsemble& ens, int dim) {
    AdaptedProcess p;
    p.dim = dim;
    p.paths = ens.paths();
    p.nodes = ens.grid().nodes();
    guard_alloc(static_cast<std::size_t>(p.paths) * p.nodes * dim);
    p.v.assign(static_cast<std::size_t>(p.paths) * p.nodes * dim, 0.0);
    return p;
}

AdaptedProcess AdaptedProcess::constant(const FilteredEnsemble& ens,
                                        std::span<const double> value) {
    AdaptedProcess p = zeros(ens, static_cast<int>(value.size()));
    for (int path = 0; path < p.paths; ++path) {
        for (int node = 0; node < p.nodes; ++node) {
            std::copy(value.begin(), value.end(), p.at(path, node).begin());
        }
    }
    return p;
}

AdaptedProcess AdaptedProcess::from_fn(
    const FilteredEnsemble& ens, int dim,
    const std::function<void(int, int, std::span<double>)>& fn) {
    AdaptedProcess p = zeros(ens, dim);
    for (int path = 0; path < p.paths; ++path) {
        for (int node = 0; node < p.nodes; ++node) fn(path, node, p.at(path, node));
    }
    return p;
}

TwoParameterProcess TwoParameterProcess::zeros(int paths, int rows, int cols, int dim) {
    TwoParameterProcess z;
    z.dim = dim;
    z.paths = paths;
    z.rows = rows;
    z.cols = cols;
    guard_alloc(static_cast<std::size_t>(paths) * rows * cols * dim);
    z.v.assign(static_cast<std::size_t>(paths) * rows * cols * dim, 0.0);
    return z;
}

FilteredEnsemble FilteredEnsemble::tree(TimeGrid grid) {
    grid.validate();
    if (grid.N > 20) throw std::invalid_argument("tree model limited to N <= 20");
    FilteredEnsemble e;
    e.model_ = EnsembleModel::Tree;
    e.grid_ = grid;
    e.d_ = 1;
    e.paths_ = 1 << grid.N;
    e.build_wiener_cache();
    return e;
}

FilteredEnsemble FilteredEnsemble::montecarlo(TimeGrid grid, int paths, std::uint64_t seed,
                                              int d) {
    grid.validate();
    if (paths <= 0 || d <= 0) throw std::invalid_argument("montecarlo requires paths, d > 0");
    FilteredEnsemble e;
    e.model_ = EnsembleModel::MonteCarlo;
    e.grid_ = grid;
    e.d_ = d;
    e.paths_ = paths;
    e.seed_ = seed;
    e.build_wiener_cache();
    return e;
}

FilteredEnsemble build_ensemble(const TimeGrid& grid, const EnsembleSpec& spec) {
    if (spec.model == EnsembleModel::Tree) {
        if (spec.d > 1) throw std::invalid_argument("tree model requires d = 1");
        return FilteredEnsemble::tree(grid);
    }
    return FilteredEnsemble::montecarlo(grid, spec.paths, spec.seed, spec.d);
}

double FilteredEnsemble::increment(int path, int step, int k) const {
    const double h = grid_.h();
    if (model_ == EnsembleModel::Tree) {
        int bit = (path >> (grid_.N - 1 - step)) & 1;
        return bit == 0 ? std::sqrt(h) : -std::sqrt(h);
    }
    return std::sqrt(h) * counter_gaussian(seed_, static_cast<std::uint64_t>(path),
                                           static_cast<std::uint64_t>(step),
                                           static_cast<std::uint64_t>(k));
}

void FilteredEnsemble::build_wiener_cache() {
    guard_alloc(static_cast<std::size_t>(paths_) * grid_.nodes() * d_);
    wiener_.assign(static_cast<std::size_t>(paths_) * grid_.nodes() * d_, 0.0);
    for (int p = 0; p < paths_; ++p) {
        for (int k = 0; k < d_; ++k) {
            double w = 0.0;
            for (int j = 0; j < grid_.N; ++j) {
                w += increment(p, j, k);
                wiener_[(static_cast<std::size_t>(p) * grid_.nodes() + j + 1) * d_ + k] = w;
            }
        }
    }
}

double FilteredEnsemble::wiener(int path, int node, int k) const {
    return wiener_[(static_cast<std::size_t>(path) * grid_.nodes() + node) * d_ + k];
}

void FilteredEnsemble::mean(std::span<const double> payoff, int dim,
                            std::span<double> out) const {
    for (int c = 0; c < dim; ++c) out[c] = 0.0;
    for (int p = 0; p < paths_; ++p) {
        for (int c = 0; c < dim; ++c) out[c] += payoff[static_cast<std::size_t>(p) * dim + c];
    }
    for (int c = 0; c < dim; ++c) out[c] /= paths_;
}

void FilteredEnsemble::cond_expect(std::span<const double> payoff, int dim, int node,
                                   std::span<double> out, const RegressionBasis* basis,
                                   RegressionStats* stats) const {
    if (model_ == EnsembleModel::Tree) {
        const int block = 1 << (grid_.N - node);
        for (int start = 0; start < paths_; start += block) {
            for (int c = 0; c < dim; ++c) {
                double s = 0.0;
                for (int p = start; p < start + block; ++p) {
                    s += payoff[static_cast<std::size_t>(p) * dim + c];
                }
                s /= block;
                for (int p = start; p < start + block; ++p) {
                    out[static_cast<std::size_t>(p) * dim + c] = s;
                }
            }
        }
        return;
    }
    if (node == 0) {
        std::vector<double> m(dim);
        mean(payoff, dim, m);
        for (int p = 0; p < paths_; ++p) {
            for (int c = 0; c < dim; ++c) out[static_cast<std::size_t>(p) * dim + c] = m[c];
        }
        return;
    }
    regression_fit(payoff, dim, node, out, basis, stats);
}

void FilteredEnsemble::regression_fit(std::span<const double> target, int dim, int node,
                                      std::span<double> out, const RegressionBasis* basis,
                                      RegressionStats* stats) const {
    // Feature columns: 1, f_1..f_F, then all degree-2 monomials f_a f_b.
    std::vector<std::function<double(int)>> feats;
    if (!basis || basis->include_wiener) {
        for (int k = 0; k < d_; ++k) {
            feats.push_back([this, node, k](int p) { return wiener(p, node, k); });
        }
    }
    if (basis) {
        for (const auto& f : basis->features) {
            feats.push_back([&f, node](int p) { return f(p, node); });
        }
    }
    const int F = static_cast<int>(feats.size());
    const int nb = 1 + F + F * (F + 1) / 2;

    std::vector<double> row(nb);
    std::vector<double> ata(static_cast<std::size_t>(nb) * nb, 0.0);
    std::vector<double> atb(static_cast<std::size_t>(dim) * nb, 0.0);
    std::vector<double> design(static_cast<std::size_t>(paths_) * nb);
    std::vector<double> fv(F);
    for (int p = 0; p < paths_; ++p) {
        for (int a = 0; a < F; ++a) fv[a] = feats[a](p);
        int c = 0;
        row[c++] = 1.0;
        for (int a = 0; a < F; ++a) row[c++] = fv[a];
        for (int a = 0; a < F; ++a) {
            for (int b = a; b < F; ++b) row[c++] = fv[a] * fv[b];
        }
        std::copy(row.begin(), row.end(), design.begin() + static_cast<std::size_t>(p) * nb);
        for (int i = 0; i < nb; ++i) {
            for (int j = 0; j <= i; ++j) ata[i * nb + j] += row[i] * row[j];
            for (int r = 0; r < dim; ++r) {
                atb[static_cast<std::size_t>(r) * nb + i] +=
                    row[i] * target[static_cast<std::size_t>(p) * dim + r];
            }
        }
    }
    for (int i = 0; i < nb; ++i) {
        for (int j = i + 1; j < nb; ++j) ata[i * nb + j] = ata[j * nb + i];
    }

    std::vector<double> chol = ata;
    std::vector<double> beta = atb;
    if (!cholesky_solve(chol, beta, nb, dim)) {
        // Singular normal matrix: ridge fallback with penalty 1e-10.
        double tr = 0.0;
        for (int i = 0; i < nb; ++i) tr += ata[i * nb + i];
        double ridge = 1e-10 * std::max(tr / nb, 1.0);
        chol = ata;
        for (int i = 0; i < nb; ++i) chol[i * nb + i] += ridge;
        beta = atb;
        if (!cholesky_solve(chol, beta, nb, dim)) {
            throw std::runtime_error("regression normal matrix singular even with ridge");
        }
        if (stats) ++stats->ridge_fallbacks;
    }

    double ss = 0.0;
    for (int p = 0; p < paths_; ++p) {
        const double* drow = design.data() + static_cast<std::size_t>(p) * nb;
        for (int r = 0; r < dim; ++r) {
            double fit = 0.0;
            const double* b = beta.data() + static_cast<std::size_t>(r) * nb;
            for (int i = 0; i < nb; ++i) fit += drow[i] * b[i];
            out[static_cast<std::size_t>(p) * dim + r] = fit;
            double e = target[static_cast<std::size_t>(p) * dim + r] - fit;
            ss += e * e;
        }
    }
    if (stats) {
        stats->max_residual = std::max(stats->max_residual, std::sqrt(ss / (paths_ * dim)));
    }
}

void FilteredEnsemble::repr_step(std::span<const double> payoff, int dim, int step,
                                 std::span<double> out, const RegressionBasis* basis,
                                 RegressionStats* stats) const {
    const double h = grid_.h();
    if (model_ == EnsembleModel::Tree) {
        const int block = 1 << (grid_.N - step);
        const int half = block / 2;
        const double inv = 1.0 / (2.0 * std::sqrt(h));
        for (int start = 0; start < paths_; start += block) {
            for (int c = 0; c < dim; ++c) {
                double up = 0.0, down = 0.0;
                for (int p = start; p < start + half; ++p) {
                    up += payoff[static_cast<std::size_t>(p) * dim + c];
                }
                for (int p = start + half; p < start + block; ++p) {
                    down += payoff[static_cast<std::size_t>(p) * dim + c];
                }
                double z = (up / half - down / half) * inv;
                for (int p = start; p < start + block; ++p) {
                    out[static_cast<std::size_t>(p) * dim + c] = z;
                }
            }
        }
        return;
    }
    // Monte Carlo: Z^k = E[payoff * dW_k | F_{s_j}] / h via regression at s_j.
    std::vector<double> prod(static_cast<std::size_t>(paths_) * dim);
    std::vector<double> fit(static_cast<std::size_t>(paths_) * dim);
    for (int k = 0; k < d_; ++k) {
        for (int p = 0; p < paths_; ++p) {
            double dw = increment(p, step, k);
            for (int c = 0; c < dim; ++c) {
                prod[static_cast<std::size_t>(p) * dim + c] =
                    payoff[static_cast<std::size_t>(p) * dim + c] * dw / h;
            }
        }
        if (step == 0) {
            std::vector<double> m(dim);
            mean(prod, dim, m);
            for (int p = 0; p < paths_; ++p) {
                for (int c = 0; c < dim; ++c) fit[static_cast<std::size_t>(p) * dim + c] = m[c];
            }
        } else {
            regression_fit(prod, dim, step, fit, basis, stats);
        }
        for (int p = 0; p < paths_; ++p) {
            for (int c = 0; c < dim; ++c) {
                out[(static_cast<std::size_t>(p) * dim + c) * d_ + k] =
                    fit[static_cast<std::size_t>(p) * dim + c];
            }
        }
    }
}

bool check_adapted(const FilteredEnsemble& ens, const AdaptedProcess& p, double tol) {
    if (!ens.is_tree()) return true;
    const int N = ens.grid().N;
    for (int node = 0; node <= N; ++node) {
        const int block = 1 << (N - node);
        for (int start = 0; start < ens.paths(); start += block) {
            auto ref = p.at(start, node);
            for (int q = start + 1; q < start + block; ++q) {
                auto val = p.at(q, node);
                for (int c = 0; c < p.dim; ++c) {
                    if (std::fabs(val[c] - ref[c]) > tol) return false;
                }
            }
        }
    }
    return true;
}

MartingaleRepresentation martingale_represent(const FilteredEnsemble& ens,
                                              std::span<const double> y, int dim, int upto_node,
                                              const RegressionBasis* basis,
                                              RegressionStats* stats) {
    const int d = ens.dims();
    const int P = ens.paths();
    MartingaleRepresentation rep;
    rep.steps = upto_node;
    rep.z.assign(static_cast<std::size_t>(P) * upto_node * dim * d, 0.0);
    std::vector<double> zj(static_cast<std::size_t>(P) * dim * d);
    for (int j = 0; j < upto_node; ++j) {
        ens.repr_step(y, dim, j, zj, basis, stats);
        for (int p = 0; p < P; ++p) {
            std::memcpy(rep.z.data() + (static_cast<std::size_t>(p) * upto_node + j) * dim * d,
                        zj.data() + static_cast<std::size_t>(p) * dim * d,
                        sizeof(double) * dim * d);
        }
    }
    std::vector<double> m(dim);
    ens.mean(y, dim, m);
    double ss = 0.0;
    for (int p = 0; p < P; ++p) {
        for (int c = 0; c < dim; ++c) {
            double acc = m[c];
            for (int j = 0; j < upto_node; ++j) {
                const double* z =
                    rep.z.data() + ((static_cast<std::size_t>(p) * upto_node + j) * dim + c) * d;
                for (int k = 0; k < d; ++k) acc += z[k] * ens.increment(p, j, k);
            }
            double e = y[static_cast<std::size_t>(p) * dim + c] - acc;
            ss += e * e;
        }
    }
    rep.residual = std::sqrt(ss / (static_cast<double>(P) * dim));
    return rep;
}

double weighted_sq_norm(const FilteredEnsemble& ens, const AdaptedProcess& p, double beta) {
    const double h = ens.grid().h();
    double total = 0.0;
    for (int i = 0; i < ens.grid().N; ++i) {
        double w = std::exp(2.0 * beta * ens.grid().node(i)) * h;
        double s = 0.0;
        for (int path = 0; path < p.paths; ++path) {
            auto v = p.at(path, i);
            for (int c = 0; c < p.dim; ++c) s += v[c] * v[c];
        }
        total += w * s / p.paths;
    }
    return std::sqrt(total);
}

double weighted_sq_norm(const FilteredEnsemble& ens, const TwoParameterProcess& z, double beta) {
    const double h = ens.grid().h();
    double total = 0.0;
    for (int i = 0; i < ens.grid().N && i < z.rows; ++i) {
        double w = std::exp(2.0 * beta * ens.grid().node(i)) * h;
        double s = 0.0;
        for (int path = 0; path < z.paths; ++path) {
            for (int j = 0; j < z.cols; ++j) {
                auto v = z.at(path, i, j);
                for (int c = 0; c < z.dim; ++c) s += v[c] * v[c];
            }
        }
        total += w * (s * h) / z.paths;
    }
    return std::sqrt(total);
}

}  // namespace volterra
