#include "speclab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "speclab/numeric.hpp"

namespace speclab::gradcheck {

namespace {

using losses::LossFamily;
using losses::LossKind;

double frozen_lambda_for(const LossKind& kind, const Categorical& p, const Categorical& q) {
    if (kind.family() == LossFamily::LKHybridFixed) {
        return kind.fixed_lambda();
    }
    if (kind.family() == LossFamily::LKHybridAdaptive) {
        return losses::lambda_schedule(losses::acceptance_rate(p, q), kind.eta());
    }
    return 0.0;
}

std::vector<int> sign_pattern(const Categorical& p, const Categorical& q) {
    std::vector<int> signs(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        signs[i] = q[i] > p[i] ? 1 : (q[i] < p[i] ? -1 : 0);
    }
    return signs;
}

Logits perturbed(const Logits& z, std::size_t j, double delta) {
    std::vector<double> values = z.values;
    values[j] += delta;
    return Logits(std::move(values));
}

}  // namespace

double loss_value_at(const LossKind& kind, const Categorical& p, const Logits& z_q,
                     double frozen_lambda) {
    const Categorical q = softmax(z_q);
    switch (kind.family()) {
        case LossFamily::ForwardKL:
            return losses::kl_forward(p, q);
        case LossFamily::ReverseKL:
            return losses::kl_reverse(p, q);
        case LossFamily::TV:
            return losses::tv(p, q);
        case LossFamily::LKAlpha: {
            const double alpha = losses::acceptance_rate(p, q);
            if (alpha < kLogFloor) {
                throw std::domain_error("loss_value_at: zero acceptance");
            }
            return -std::log(alpha);
        }
        case LossFamily::LKHybridFixed:
        case LossFamily::LKHybridAdaptive:
            return frozen_lambda * losses::kl_forward(p, q) +
                   (1.0 - frozen_lambda) * losses::tv(p, q);
    }
    throw std::logic_error("loss_value_at: unreachable loss family");
}

std::vector<double> finite_diff_grad(const LossKind& kind, const Categorical& p, const Logits& z_q,
                                     double step) {
    if (!(step > 0.0)) {
        throw std::invalid_argument("finite_diff_grad: step must be positive");
    }
    const double lambda = frozen_lambda_for(kind, p, softmax(z_q));
    std::vector<double> grad(z_q.size());
    for (std::size_t j = 0; j < z_q.size(); ++j) {
        const double up = loss_value_at(kind, p, perturbed(z_q, j, step), lambda);
        const double down = loss_value_at(kind, p, perturbed(z_q, j, -step), lambda);
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw std::domain_error("finite_diff_grad: loss not finite at perturbed point");
        }
        grad[j] = (up - down) / (2.0 * step);
    }
    return grad;
}

GradReport check_all_gradients(std::size_t num_trials, std::size_t v_min, std::size_t v_max,
                               RandomStream& rng, double tolerance, double step) {
    if (tolerance < 0.0) {
        throw std::invalid_argument("check_all_gradients: tolerance must be >= 0");
    }
    if (v_min < 2 || v_min > v_max) {
        throw std::invalid_argument("check_all_gradients: bad vocabulary range");
    }

    const LossKind kinds[] = {
        LossKind::forward_kl(),    LossKind::reverse_kl(),
        LossKind::tv(),            LossKind::lk_alpha(),
        LossKind::lk_hybrid_fixed(0.5), LossKind::lk_hybrid_adaptive(3.0),
    };

    GradReport report;
    report.tolerance = tolerance;
    report.trials = num_trials;

    for (std::size_t trial = 0; trial < num_trials; ++trial) {
        const std::size_t v = v_min + static_cast<std::size_t>(rng.next_below(v_max - v_min + 1));
        const Categorical p(rng.next_dirichlet(v, 1.0));
        std::vector<double> raw(v);
        for (auto& x : raw) {
            x = 1.5 * rng.next_gaussian();
        }
        const Logits z(std::move(raw));
        const Categorical q = softmax(z);
        const std::vector<int> base_signs = sign_pattern(p, q);

        for (const LossKind& kind : kinds) {
            const double schedule_alpha = losses::acceptance_rate(p, q);
            const losses::LossOutput analytic = losses::evaluate(kind, p, q, schedule_alpha);
            const double lambda = frozen_lambda_for(kind, p, q);

            // Scale for the relative error: the larger gradient magnitude of
            // the pair, so negligible components do not manufacture failures
            // out of quadrature noise.
            double scale = 1e-12;
            for (double g : analytic.grad) {
                scale = std::max(scale, std::abs(g));
            }

            for (std::size_t j = 0; j < v; ++j) {
                if (kind.has_tv_component() && std::abs(q[j] - p[j]) < kTieBand) {
                    ++report.skipped_near_tie;
                    continue;
                }
                const Logits z_up = perturbed(z, j, step);
                const Logits z_down = perturbed(z, j, -step);
                if (kind.has_tv_component()) {
                    // The stencil must not straddle a kink of |p - q|.
                    const std::vector<int> s_up = sign_pattern(p, softmax(z_up));
                    const std::vector<int> s_down = sign_pattern(p, softmax(z_down));
                    if (s_up != base_signs || s_down != base_signs) {
                        ++report.skipped_kink;
                        continue;
                    }
                }
                const double up = loss_value_at(kind, p, z_up, lambda);
                const double down = loss_value_at(kind, p, z_down, lambda);
                const double numeric = (up - down) / (2.0 * step);
                const double denom = std::max({scale, std::abs(numeric), 1e-12});
                const double rel = std::abs(analytic.grad[j] - numeric) / denom;
                ++report.comparisons;
                if (rel > report.max_rel_error) {
                    report.max_rel_error = rel;
                    report.worst.kind = kind;
                    report.worst.target = p.probs();
                    report.worst.draft_logits = z.values;
                    report.worst.coordinate = j;
                    report.worst.analytic = analytic.grad[j];
                    report.worst.numeric = numeric;
                }
            }
        }
    }

    report.passed = report.comparisons == 0 || report.max_rel_error <= tolerance;
    return report;
}

std::pair<Categorical, Categorical> make_regime(const RegimeSpec& spec) {
    if (spec.support_size < 1 || spec.support_size >= spec.vocab_size) {
        throw std::invalid_argument("make_regime: need 1 <= k < V");
    }
    std::vector<double> target(spec.vocab_size, 0.0);
    std::fill(target.begin(), target.begin() + static_cast<std::ptrdiff_t>(spec.support_size), 1.0);
    return {Categorical::normalized(std::move(target)), Categorical::uniform(spec.vocab_size)};
}

std::vector<MagnitudeRow> magnitude_report(const RegimeSpec& spec) {
    const auto [p, q] = make_regime(spec);
    const double v = static_cast<double>(spec.vocab_size);
    const double k = static_cast<double>(spec.support_size);
    const std::size_t on_index = 0;
    const std::size_t off_index = spec.vocab_size - 1;

    std::vector<MagnitudeRow> rows;
    for (const LossKind& kind :
         {LossKind::forward_kl(), LossKind::tv(), LossKind::lk_alpha()}) {
        const losses::LossOutput out = losses::evaluate(kind, p, q);
        MagnitudeRow row;
        row.kind = kind;
        row.measured_norm = l2_norm(out.grad);
        row.measured_on_support = out.grad[on_index];
        row.measured_off_support = out.grad[off_index];
        switch (kind.family()) {
            case LossFamily::ForwardKL:
                row.predicted_norm = 1.0 / std::sqrt(k);
                row.predicted_on_support = -1.0 / k;
                row.predicted_off_support = 1.0 / v;
                break;
            case LossFamily::TV:
                row.predicted_norm = std::sqrt(k) / v;
                row.predicted_on_support = -1.0 / v;
                row.predicted_off_support = k / (v * v);  // effectively zero
                break;
            default:  // LKAlpha
                row.predicted_norm = 1.0 / std::sqrt(k);
                row.predicted_on_support = -1.0 / k;
                row.predicted_off_support = 1.0 / v;
                break;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace speclab::gradcheck
