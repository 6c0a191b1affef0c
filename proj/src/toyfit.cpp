#include "speclab/toyfit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "speclab/numeric.hpp"

namespace speclab::toyfit {

namespace {

constexpr double kBoundaryDensityLimit = 1e-10;

void require(bool ok, const char* message) {
    if (!ok) {
        throw std::invalid_argument(message);
    }
}

double gaussian_pdf(double x, double mu, double sigma) {
    const double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

void check_grid_coverage(const GaussianMixture& target, const Gaussian1D& draft,
                         const QuadratureGrid& grid) {
    for (double edge : {grid.lo, grid.hi}) {
        if (target.pdf(edge) > kBoundaryDensityLimit || draft.pdf(edge) > kBoundaryDensityLimit) {
            throw std::domain_error(
                "quadrature grid too narrow: boundary density exceeds 1e-10; widen the grid");
        }
    }
}

// Trapezoid rule over the grid applied to a pointwise integrand.
template <typename F>
double trapezoid(const QuadratureGrid& grid, F&& integrand) {
    const double h = grid.step();
    KahanAccumulator acc;
    for (std::size_t i = 0; i < grid.nodes; ++i) {
        const double x = grid.lo + h * static_cast<double>(i);
        const double w = (i == 0 || i == grid.nodes - 1) ? 0.5 : 1.0;
        acc.add(w * integrand(x));
    }
    return acc.value() * h;
}

double objective_value(ContinuousObjective kind, const GaussianMixture& target,
                       const Gaussian1D& draft, const QuadratureGrid& grid) {
    switch (kind) {
        case ContinuousObjective::ForwardKL:
            return trapezoid(grid, [&](double x) {
                const double p = target.pdf(x);
                if (p <= 0.0) {
                    return 0.0;
                }
                return p * (safe_log(p) - safe_log(draft.pdf(x)));
            });
        case ContinuousObjective::ReverseKL:
            return trapezoid(grid, [&](double x) {
                const double q = draft.pdf(x);
                if (q <= 0.0) {
                    return 0.0;
                }
                return q * (safe_log(q) - safe_log(target.pdf(x)));
            });
        case ContinuousObjective::TV:
            return 1.0 - overlap_alpha_continuous(target, draft, grid);
    }
    throw std::logic_error("objective_value: unreachable objective");
}

}  // namespace

double Gaussian1D::pdf(double x) const {
    return gaussian_pdf(x, mu, sigma);
}

GaussianMixture::GaussianMixture(std::vector<MixtureComponent> components)
    : components_(std::move(components)) {
    require(!components_.empty(), "GaussianMixture: need at least one component");
    KahanAccumulator acc;
    for (const auto& c : components_) {
        require(c.weight >= 0.0, "GaussianMixture: weights must be >= 0");
        require(c.sigma > 0.0, "GaussianMixture: sigmas must be positive");
        acc.add(c.weight);
    }
    require(std::abs(acc.value() - 1.0) <= kProbSumTolerance,
            "GaussianMixture: weights must sum to 1");
}

double GaussianMixture::pdf(double x) const {
    KahanAccumulator acc;
    for (const auto& c : components_) {
        acc.add(c.weight * gaussian_pdf(x, c.mu, c.sigma));
    }
    return acc.value();
}

double GaussianMixture::mean() const {
    KahanAccumulator acc;
    for (const auto& c : components_) {
        acc.add(c.weight * c.mu);
    }
    return acc.value();
}

double GaussianMixture::variance() const {
    const double m = mean();
    KahanAccumulator acc;
    for (const auto& c : components_) {
        acc.add(c.weight * (c.sigma * c.sigma + (c.mu - m) * (c.mu - m)));
    }
    return acc.value();
}

GaussianMixture GaussianMixture::canonical_bimodal() {
    return GaussianMixture({{0.7, -1.5, 1.0}, {0.3, 3.5, 1.0}});
}

QuadratureGrid::QuadratureGrid(double lo_, double hi_, std::size_t nodes_)
    : lo(lo_), hi(hi_), nodes(nodes_) {
    require(lo < hi, "QuadratureGrid: lo must be below hi");
    require(nodes >= 100, "QuadratureGrid: need at least 100 nodes");
}

QuadratureGrid QuadratureGrid::covering(const GaussianMixture& target, double mu_lo, double mu_hi,
                                        double sigma_hi, std::size_t nodes) {
    double lo = mu_lo - 10.0 * sigma_hi;
    double hi = mu_hi + 10.0 * sigma_hi;
    for (const auto& c : target.components()) {
        lo = std::min(lo, c.mu - 10.0 * c.sigma);
        hi = std::max(hi, c.mu + 10.0 * c.sigma);
    }
    return QuadratureGrid(lo, hi, nodes);
}

double overlap_alpha_continuous(const GaussianMixture& target, const Gaussian1D& draft,
                                const QuadratureGrid& grid) {
    check_grid_coverage(target, draft, grid);
    const double overlap = trapezoid(grid, [&](double x) {
        return std::min(target.pdf(x), draft.pdf(x));
    });
    return std::clamp(overlap, 0.0, 1.0);
}

double divergence_continuous(ContinuousObjective kind, const GaussianMixture& target,
                             const Gaussian1D& draft, const QuadratureGrid& grid) {
    check_grid_coverage(target, draft, grid);
    return objective_value(kind, target, draft, grid);
}

SearchConfig SearchConfig::for_target(const GaussianMixture& target) {
    double lo = target.components().front().mu;
    double hi = lo;
    double sigma_max = 0.0;
    for (const auto& c : target.components()) {
        lo = std::min(lo, c.mu);
        hi = std::max(hi, c.mu);
        sigma_max = std::max(sigma_max, c.sigma);
    }
    SearchConfig cfg;
    cfg.mu_lo = lo - 2.0 * sigma_max;
    cfg.mu_hi = hi + 2.0 * sigma_max;
    cfg.sigma_lo = 0.2;
    cfg.sigma_hi = std::max(3.0 * sigma_max, 1.5 * std::sqrt(target.variance()));
    return cfg;
}

FitResult fit_gaussian(const GaussianMixture& target, ContinuousObjective objective,
                       const QuadratureGrid& grid, const SearchConfig& search) {
    require(search.mu_cells >= 10 && search.sigma_cells >= 10,
            "fit_gaussian: need at least 10 cells per axis");

    const auto value = [&](double mu, double sigma) {
        return objective_value(objective, target, Gaussian1D{mu, sigma}, grid);
    };

    // Coarse pass over the search rectangle (sigma log-spaced).
    const double mu_step = (search.mu_hi - search.mu_lo) / static_cast<double>(search.mu_cells - 1);
    const double log_ratio = std::log(search.sigma_hi / search.sigma_lo) /
                             static_cast<double>(search.sigma_cells - 1);
    double best_mu = search.mu_lo;
    double best_sigma = search.sigma_lo;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < search.mu_cells; ++i) {
        const double mu = search.mu_lo + mu_step * static_cast<double>(i);
        for (std::size_t j = 0; j < search.sigma_cells; ++j) {
            const double sigma = search.sigma_lo * std::exp(log_ratio * static_cast<double>(j));
            const double v = value(mu, sigma);
            if (v < best) {
                best = v;
                best_mu = mu;
                best_sigma = sigma;
            }
        }
    }

    // Coordinate descent with halving steps.
    double step_mu = mu_step;
    double step_sigma = best_sigma * 0.5;
    while (step_mu > 1e-6 || step_sigma > 1e-6) {
        bool improved = false;
        for (double delta : {step_mu, -step_mu}) {
            const double v = value(best_mu + delta, best_sigma);
            if (v < best) {
                best = v;
                best_mu += delta;
                improved = true;
            }
        }
        for (double delta : {step_sigma, -step_sigma}) {
            if (best_sigma + delta <= 1e-3) {
                continue;
            }
            const double v = value(best_mu, best_sigma + delta);
            if (v < best) {
                best = v;
                best_sigma += delta;
                improved = true;
            }
        }
        if (!improved) {
            step_mu *= 0.5;
            step_sigma *= 0.5;
        }
    }

    FitResult result;
    result.params = Gaussian1D{best_mu, best_sigma};
    result.loss = best;
    result.alpha = overlap_alpha_continuous(target, result.params, grid);
    return result;
}

std::vector<LandscapeCell> landscape_grid(ContinuousObjective objective,
                                          const GaussianMixture& target,
                                          const QuadratureGrid& grid, const SearchConfig& search) {
    require(search.mu_cells >= 10 && search.sigma_cells >= 10,
            "landscape_grid: need at least 10 cells per axis");
    const double mu_step = (search.mu_hi - search.mu_lo) / static_cast<double>(search.mu_cells - 1);
    const double log_ratio = std::log(search.sigma_hi / search.sigma_lo) /
                             static_cast<double>(search.sigma_cells - 1);
    std::vector<LandscapeCell> cells;
    cells.reserve(search.mu_cells * search.sigma_cells);
    for (std::size_t i = 0; i < search.mu_cells; ++i) {
        const double mu = search.mu_lo + mu_step * static_cast<double>(i);
        for (std::size_t j = 0; j < search.sigma_cells; ++j) {
            const double sigma = search.sigma_lo * std::exp(log_ratio * static_cast<double>(j));
            cells.push_back({mu, sigma, objective_value(objective, target, {mu, sigma}, grid)});
        }
    }
    return cells;
}

// ---------------------------------------------------------------------------
// Discrete tasks
// ---------------------------------------------------------------------------

std::uint64_t ToyTask::fingerprint() const {
    std::uint64_t h = fnv1a_mix(0xcbf29ce484222325ULL, vocab_size);
    h = fnv1a_mix(h, contexts.size());
    h = fnv1a_mix(h, static_cast<std::uint64_t>(family));
    h = fnv1a_mix(h, seed);
    auto mix_double = [&h](double x) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(x));
        std::memcpy(&bits, &x, sizeof(bits));
        h = fnv1a_mix(h, bits);
    };
    mix_double(concentration);
    for (const auto& ctx : contexts) {
        for (double p : ctx.probs()) {
            mix_double(p);
        }
    }
    for (const auto& feat : features) {
        for (double f : feat) {
            mix_double(f);
        }
    }
    if (draft_mask.has_value()) {
        for (std::size_t i = 0; i < vocab_size; ++i) {
            h = fnv1a_mix(h, draft_mask->allows(i) ? 1 : 0);
        }
    }
    return h;
}

ToyTask make_capacity_task(std::size_t vocab_size, std::size_t num_contexts, double concentration,
                           std::uint64_t seed, DraftFamily family, std::size_t feature_dim) {
    require(vocab_size >= 2, "make_capacity_task: vocab size must be at least 2");
    require(num_contexts >= 2, "make_capacity_task: capacity limitation requires C >= 2");
    require(concentration > 0.0, "make_capacity_task: concentration must be positive");
    if (family == DraftFamily::LinearLogits) {
        require(feature_dim >= 1, "make_capacity_task: linear family needs feature_dim >= 1");
    }

    RandomStream rng(derive_seed(seed, 0x7a5c));
    ToyTask task;
    task.vocab_size = vocab_size;
    task.family = family;
    task.seed = seed;
    task.concentration = concentration;
    for (std::size_t c = 0; c < num_contexts; ++c) {
        task.contexts.emplace_back(rng.next_dirichlet(vocab_size, concentration));
    }
    if (family == DraftFamily::LinearLogits) {
        for (std::size_t c = 0; c < num_contexts; ++c) {
            std::vector<double> feat(feature_dim);
            for (auto& f : feat) {
                f = rng.next_gaussian();
            }
            task.features.push_back(std::move(feat));
        }
    }
    return task;
}

double mean_acceptance(const ToyTask& task, const Categorical& q) {
    require(q.size() == task.vocab_size, "mean_acceptance: vocab size mismatch");
    KahanAccumulator acc;
    for (const auto& p : task.contexts) {
        KahanAccumulator inner;
        for (std::size_t i = 0; i < q.size(); ++i) {
            inner.add(p[i] < q[i] ? p[i] : q[i]);
        }
        acc.add(inner.value());
    }
    return acc.value() / static_cast<double>(task.contexts.size());
}

namespace {

double mean_acceptance_raw(const ToyTask& task, const std::vector<double>& q) {
    double total = 0.0;
    for (const auto& p : task.contexts) {
        double inner = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            inner += p[i] < q[i] ? p[i] : q[i];
        }
        total += inner;
    }
    return total / static_cast<double>(task.contexts.size());
}

void enumerate_simplex(const ToyTask& task, std::vector<double>& q, std::size_t index,
                       std::size_t remaining, double unit, double& best_alpha,
                       std::vector<double>& best_q) {
    if (index == q.size() - 1) {
        q[index] = static_cast<double>(remaining) * unit;
        const double alpha = mean_acceptance_raw(task, q);
        if (alpha > best_alpha) {
            best_alpha = alpha;
            best_q = q;
        }
        return;
    }
    for (std::size_t c = 0; c <= remaining; ++c) {
        q[index] = static_cast<double>(c) * unit;
        enumerate_simplex(task, q, index + 1, remaining - c, unit, best_alpha, best_q);
    }
}

}  // namespace

BruteForceResult brute_force_optimal_alpha(const ToyTask& task, double resolution) {
    if (task.family != DraftFamily::SharedCategorical) {
        throw std::invalid_argument("brute_force_optimal_alpha: SharedCategorical tasks only");
    }
    if (task.vocab_size > 5) {
        throw std::invalid_argument("brute_force_optimal_alpha: V must be <= 5");
    }
    require(resolution > 0.0 && resolution <= 0.01 + 1e-15,
            "brute_force_optimal_alpha: resolution must be <= 0.01");

    const auto steps = static_cast<std::size_t>(std::llround(1.0 / resolution));
    const double unit = 1.0 / static_cast<double>(steps);
    std::vector<double> q(task.vocab_size, 0.0);
    std::vector<double> best_q(task.vocab_size, 0.0);
    double best_alpha = -1.0;
    enumerate_simplex(task, q, 0, steps, unit, best_alpha, best_q);

    // Local refinement: pairwise mass transfers with halving step.
    double step = unit;
    while (step > 1e-7) {
        bool improved = false;
        for (std::size_t from = 0; from < best_q.size(); ++from) {
            if (best_q[from] < step) {
                continue;
            }
            for (std::size_t to = 0; to < best_q.size(); ++to) {
                if (to == from) {
                    continue;
                }
                std::vector<double> candidate = best_q;
                candidate[from] -= step;
                candidate[to] += step;
                const double alpha = mean_acceptance_raw(task, candidate);
                if (alpha > best_alpha) {
                    best_alpha = alpha;
                    best_q = std::move(candidate);
                    improved = true;
                }
            }
        }
        if (!improved) {
            step *= 0.5;
        }
    }

    return BruteForceResult{Categorical::normalized(std::move(best_q)), best_alpha};
}

Categorical kl_optimal_shared_q(const ToyTask& task) {
    if (task.family != DraftFamily::SharedCategorical) {
        throw std::invalid_argument("kl_optimal_shared_q: SharedCategorical tasks only");
    }
    std::vector<double> mean(task.vocab_size, 0.0);
    for (const auto& p : task.contexts) {
        for (std::size_t i = 0; i < mean.size(); ++i) {
            mean[i] += p[i];
        }
    }
    return Categorical::normalized(std::move(mean));
}

}  // namespace speclab::toyfit
