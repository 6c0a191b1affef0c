#pragma once

/**
 * Desk-scale experiments contrasting divergence objectives with direct
 * acceptance optimization:
 *
 *  - continuous: fitting a single Gaussian to a bimodal mixture under
 *    forward KL, reverse KL and TV, with the density overlap (the continuous
 *    acceptance rate) as the comparison metric;
 *  - discrete: capacity-limited tasks with a known brute-force acceptance
 *    optimum and the closed-form mean-KL optimum.
 *
 * Grid evaluations and per-task experiments are pure functions of their
 * inputs and parallelize trivially.
 */

#include <cstdint>
#include <optional>
#include <vector>

#include "speclab/dist.hpp"

namespace speclab::toyfit {

struct Gaussian1D {
    double mu = 0.0;
    double sigma = 1.0;

    double pdf(double x) const;
};

struct MixtureComponent {
    double weight;
    double mu;
    double sigma;
};

class GaussianMixture {
public:
    explicit GaussianMixture(std::vector<MixtureComponent> components);

    double pdf(double x) const;
    double mean() const;
    double variance() const;
    const std::vector<MixtureComponent>& components() const { return components_; }

    // The fixed instance used by the overlap demo: 0.7 N(-1.5, 1) +
    // 0.3 N(3.5, 1). Zero mean by construction, so the mass-covering
    // (moment-matching) fit sits at mu = 0, sigma = 2.5 exactly, while the
    // mode-seeking and overlap-maximizing fits hug the dominant mode.
    static GaussianMixture canonical_bimodal();

private:
    std::vector<MixtureComponent> components_;
};

// Uniform trapezoid grid. Construction does not validate coverage; the
// quadrature routines reject grids whose boundary densities exceed 1e-10.
struct QuadratureGrid {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t nodes = 0;

    QuadratureGrid(double lo_, double hi_, std::size_t nodes_);
    double step() const { return (hi - lo) / static_cast<double>(nodes - 1); }

    // Grid covering every mixture component to +-10 sigma and the rectangle
    // of draft parameters the search may visit.
    static QuadratureGrid covering(const GaussianMixture& target, double mu_lo, double mu_hi,
                                   double sigma_hi, std::size_t nodes);
};

enum class ContinuousObjective { ForwardKL, ReverseKL, TV };

// Integral of min(p, q): the continuous acceptance rate (density overlap).
double overlap_alpha_continuous(const GaussianMixture& target, const Gaussian1D& draft,
                                const QuadratureGrid& grid);

double divergence_continuous(ContinuousObjective kind, const GaussianMixture& target,
                             const Gaussian1D& draft, const QuadratureGrid& grid);

struct SearchConfig {
    double mu_lo = -1.0;
    double mu_hi = 1.0;
    double sigma_lo = 0.2;
    double sigma_hi = 6.0;
    std::size_t mu_cells = 61;
    std::size_t sigma_cells = 40;

    static SearchConfig for_target(const GaussianMixture& target);
};

struct FitResult {
    Gaussian1D params;
    double loss = 0.0;
    double alpha = 0.0;
};

// Coarse grid search over (mu, sigma) followed by coordinate descent with
// halving steps until the parameter change drops below 1e-6.
FitResult fit_gaussian(const GaussianMixture& target, ContinuousObjective objective,
                       const QuadratureGrid& grid, const SearchConfig& search);

struct LandscapeCell {
    double mu;
    double sigma;
    double loss;
};

// Dense loss evaluation over the search rectangle, row-major in (mu, sigma).
std::vector<LandscapeCell> landscape_grid(ContinuousObjective objective,
                                          const GaussianMixture& target,
                                          const QuadratureGrid& grid, const SearchConfig& search);

// ---------------------------------------------------------------------------
// Discrete capacity-limited tasks
// ---------------------------------------------------------------------------

enum class DraftFamily { SharedCategorical, LinearLogits };

// C context-indexed target distributions fitted by a capacity-limited draft:
// either one shared categorical for all contexts, or a linear map from
// per-context features to logits.
struct ToyTask {
    std::size_t vocab_size = 0;
    std::vector<Categorical> contexts;
    DraftFamily family = DraftFamily::SharedCategorical;
    std::uint64_t seed = 0;
    double concentration = 0.0;
    std::vector<std::vector<double>> features;  // per context; empty for SharedCategorical
    std::optional<VocabMask> draft_mask;

    std::size_t num_contexts() const { return contexts.size(); }
    std::size_t feature_dim() const { return features.empty() ? 0 : features.front().size(); }
    std::uint64_t fingerprint() const;
};

// Targets drawn from a symmetric Dirichlet(concentration); LinearLogits
// tasks get standard-normal features of dimension feature_dim.
ToyTask make_capacity_task(std::size_t vocab_size, std::size_t num_contexts, double concentration,
                           std::uint64_t seed, DraftFamily family = DraftFamily::SharedCategorical,
                           std::size_t feature_dim = 0);

// Mean over contexts of sum_i min(p_c[i], q[i]).
double mean_acceptance(const ToyTask& task, const Categorical& q);

struct BruteForceResult {
    Categorical q;
    double alpha = 0.0;
};

// Exhaustive simplex-grid search (spacing = resolution) for the shared
// categorical maximizing mean acceptance, refined by local pairwise mass
// transfers. Bounded to V <= 5 and resolution <= 0.01.
BruteForceResult brute_force_optimal_alpha(const ToyTask& task, double resolution);

// Closed-form minimizer of mean forward KL over contexts: the average of
// the target distributions.
Categorical kl_optimal_shared_q(const ToyTask& task);

}  // namespace speclab::toyfit
