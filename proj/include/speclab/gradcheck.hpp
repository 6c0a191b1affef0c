#pragma once

/**
 * Independent verification of the analytic loss gradients by central finite
 * differences over the draft logits, plus the diffuse-draft / concentrated-
 * target regime study of gradient magnitudes.
 */

#include <cstddef>
#include <utility>
#include <vector>

#include "speclab/dist.hpp"
#include "speclab/losses.hpp"

namespace speclab::gradcheck {

// Diffuse-draft / concentrated-target construction: the draft is exactly
// uniform over V tokens and the target uniform over the first k (k < V).
struct RegimeSpec {
    std::size_t vocab_size = 0;    // V
    std::size_t support_size = 0;  // k
};

struct WorstCase {
    losses::LossKind kind = losses::LossKind::forward_kl();
    std::vector<double> target;
    std::vector<double> draft_logits;
    std::size_t coordinate = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradReport {
    bool passed = true;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t trials = 0;
    std::size_t comparisons = 0;
    // Coordinates excluded because |q_i - p_i| fell inside the near-tie band
    // of the non-differentiable TV manifold.
    std::size_t skipped_near_tie = 0;
    // Coordinates excluded because the sign pattern changed across the
    // finite-difference stencil (a kink inside the interval, where the
    // two-sided difference measures no derivative at all).
    std::size_t skipped_kink = 0;
    WorstCase worst;
};

// Width of the |q_i - p_i| band treated as the non-differentiable manifold.
inline constexpr double kTieBand = 1e-7;

// Central finite differences of the loss value over each logit coordinate.
// For the adaptive hybrid, lambda is frozen at the unperturbed point, which
// is exactly the stop-gradient semantics.
std::vector<double> finite_diff_grad(const losses::LossKind& kind, const Categorical& p,
                                     const Logits& z_q, double step);

// Loss value as a function of draft logits with lambda frozen; the scalar
// objective the finite differences probe.
double loss_value_at(const losses::LossKind& kind, const Categorical& p, const Logits& z_q,
                     double frozen_lambda);

// Samples random (target, draft-logit) pairs over vocab sizes in
// [v_min, v_max] and compares analytic gradients against central finite
// differences for every loss kind checked by the acceptance suite.
GradReport check_all_gradients(std::size_t num_trials, std::size_t v_min, std::size_t v_max,
                               RandomStream& rng, double tolerance, double step = 1e-6);

std::pair<Categorical, Categorical> make_regime(const RegimeSpec& spec);

struct MagnitudeRow {
    losses::LossKind kind = losses::LossKind::forward_kl();
    double measured_norm = 0.0;
    double predicted_norm = 0.0;
    double measured_on_support = 0.0;   // gradient value at a supported token
    double measured_off_support = 0.0;  // gradient value at an unsupported token
    double predicted_on_support = 0.0;
    double predicted_off_support = 0.0;
};

// Gradient norms and per-region components at the regime point for forward
// KL, TV and the log-acceptance loss, against the closed-form predictions
// 1/sqrt(k), sqrt(k)/V and 1/sqrt(k).
std::vector<MagnitudeRow> magnitude_report(const RegimeSpec& spec);

}  // namespace speclab::gradcheck
