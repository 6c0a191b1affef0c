#pragma once

/**
 * Training objectives over (target p, draft q) pairs and their analytic
 * gradients with respect to the draft logits z_q, where q = softmax(z_q):
 *
 *   forward KL        value sum p_i log(p_i/q_i)        grad q - p
 *   reverse KL        value sum q_i log(q_i/p_i)        grad q .* (log(q/p) - KL)
 *   total variation   value 0.5 sum |p_i - q_i|         grad 0.5 q .* (s - E_q[s])
 *   log-acceptance    value -log alpha                  grad grad_tv / alpha
 *   hybrid            lambda*KL + (1-lambda)*TV         grad blended, lambda constant
 *
 * with s_i = sign(q_i - p_i) and alpha = sum min(p_i, q_i) = 1 - TV. The
 * hybrid's lambda is either fixed or exp(-eta * alpha) with alpha treated
 * as a constant (stop-gradient), never differentiated.
 *
 * All functions are pure; everything is safe to call concurrently.
 */

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "speclab/dist.hpp"

namespace speclab::losses {

enum class LossFamily {
    ForwardKL,
    ReverseKL,
    TV,
    LKAlpha,
    LKHybridFixed,
    LKHybridAdaptive,
};

class LossKind {
public:
    static LossKind forward_kl() { return LossKind(LossFamily::ForwardKL); }
    static LossKind reverse_kl() { return LossKind(LossFamily::ReverseKL); }
    static LossKind tv() { return LossKind(LossFamily::TV); }
    static LossKind lk_alpha() { return LossKind(LossFamily::LKAlpha); }
    static LossKind lk_hybrid_fixed(double lambda);
    static LossKind lk_hybrid_adaptive(double eta);

    LossFamily family() const { return family_; }
    // Valid for LKHybridFixed only.
    double fixed_lambda() const { return lambda_; }
    // Valid for LKHybridAdaptive only.
    double eta() const { return eta_; }

    bool is_hybrid() const {
        return family_ == LossFamily::LKHybridFixed || family_ == LossFamily::LKHybridAdaptive;
    }
    // Kinds whose gradient contains the TV subgradient (non-smooth manifold).
    bool has_tv_component() const { return family_ != LossFamily::ForwardKL && family_ != LossFamily::ReverseKL; }

    std::string name() const;
    static LossKind parse(std::string_view text);

private:
    explicit LossKind(LossFamily family) : family_(family) {}

    LossFamily family_;
    double lambda_ = 0.0;
    double eta_ = 0.0;
};

struct LossOutput {
    double value = 0.0;
    std::vector<double> grad;       // d value / d z_q, sums to ~0
    double alpha = 0.0;             // acceptance rate, always vs the original target
    std::optional<double> lambda;   // set for hybrid kinds
    bool kl_infinite = false;       // target has mass where the draft has exactly none
};

// Scalar divergences. kl_forward/kl_reverse return +inf (the caller-visible
// flag) on a support violation.
double kl_forward(const Categorical& p, const Categorical& q);
double kl_reverse(const Categorical& p, const Categorical& q);
double tv(const Categorical& p, const Categorical& q);

// sum min(p_i, q_i), clamped to [0, 1]; equals 1 - tv(p, q).
double acceptance_rate(const Categorical& p, const Categorical& q);

// Analytic gradients with respect to draft logits.
std::vector<double> grad_kl(const Categorical& p, const Categorical& q);
std::vector<double> grad_kl_reverse(const Categorical& p, const Categorical& q);
std::vector<double> grad_tv(const Categorical& p, const Categorical& q);

// lambda = exp(-eta * alpha); a constant under differentiation.
double lambda_schedule(double alpha, double eta);

// -log(acceptance_rate); throws std::domain_error when alpha underflows the
// log floor (disjoint supports: "zero acceptance").
LossOutput loss_lk_alpha(const Categorical& p, const Categorical& q);

// Hybrid objective. For the adaptive kind a schedule alpha (typically the
// batch mean for this head position) must be supplied. When a mask is
// active the KL term is taken against the masked, renormalized target while
// the TV term and alpha keep the original p.
LossOutput loss_lk_hybrid(const Categorical& p, const Categorical& q, const LossKind& kind,
                          std::optional<double> schedule_alpha = std::nullopt,
                          const VocabMask* mask = nullptr);

// Arithmetic mean of per-example acceptance rates for one head position.
double per_position_alpha(std::span<const double> batch_alphas);

struct HeadAggregation {
    double gamma = 0.8;         // in (0, 1]
    std::size_t num_heads = 1;  // K >= 1
};

// sum over heads of gamma^(n-1) * loss_n.
double aggregate_heads(std::span<const double> per_head, const HeadAggregation& agg);

// Uniform entry point used by the gradient checker and the trainer.
LossOutput evaluate(const LossKind& kind, const Categorical& p, const Categorical& q,
                    std::optional<double> schedule_alpha = std::nullopt,
                    const VocabMask* mask = nullptr);

}  // namespace speclab::losses
