#include "speclab/losses.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "speclab/numeric.hpp"

namespace speclab::losses {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_pair(const Categorical& p, const Categorical& q) {
    if (p.size() != q.size()) {
        throw std::invalid_argument("losses: target/draft size mismatch");
    }
}

// sign(q_i - p_i) with exact ties mapped to 0, which zeroes the gradient at
// the loss minimum.
inline double tie_sign(double q_i, double p_i) {
    if (q_i > p_i) return 1.0;
    if (q_i < p_i) return -1.0;
    return 0.0;
}

}  // namespace

LossKind LossKind::lk_hybrid_fixed(double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw std::invalid_argument("LossKind: fixed lambda must lie in [0, 1]");
    }
    LossKind kind(LossFamily::LKHybridFixed);
    kind.lambda_ = lambda;
    return kind;
}

LossKind LossKind::lk_hybrid_adaptive(double eta) {
    if (!(eta > 0.0)) {
        throw std::invalid_argument("LossKind: eta must be positive");
    }
    LossKind kind(LossFamily::LKHybridAdaptive);
    kind.eta_ = eta;
    return kind;
}

std::string LossKind::name() const {
    switch (family_) {
        case LossFamily::ForwardKL: return "forward_kl";
        case LossFamily::ReverseKL: return "reverse_kl";
        case LossFamily::TV: return "tv";
        case LossFamily::LKAlpha: return "lk_alpha";
        case LossFamily::LKHybridFixed: return "lk_hybrid_fixed";
        case LossFamily::LKHybridAdaptive: return "lk_hybrid_adaptive";
    }
    return "unknown";
}

LossKind LossKind::parse(std::string_view text) {
    if (text == "forward_kl" || text == "kl") return forward_kl();
    if (text == "reverse_kl") return reverse_kl();
    if (text == "tv") return tv();
    if (text == "lk_alpha") return lk_alpha();
    if (text == "lk_hybrid_fixed") return lk_hybrid_fixed(0.5);
    if (text == "lk_hybrid_adaptive" || text == "lk_hybrid") return lk_hybrid_adaptive(3.0);
    throw std::invalid_argument("LossKind: unknown loss name '" + std::string(text) + "'");
}

double kl_forward(const Categorical& p, const Categorical& q) {
    check_pair(p, q);
    KahanAccumulator acc;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) {
            continue;  // 0 log 0 := 0
        }
        if (q[i] == 0.0) {
            return kInf;  // support violation
        }
        acc.add(p[i] * (safe_log(p[i]) - safe_log(q[i])));
    }
    return acc.value();
}

double kl_reverse(const Categorical& p, const Categorical& q) {
    return kl_forward(q, p);
}

double tv(const Categorical& p, const Categorical& q) {
    check_pair(p, q);
    KahanAccumulator acc;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc.add(std::abs(p[i] - q[i]));
    }
    return 0.5 * acc.value();
}

double acceptance_rate(const Categorical& p, const Categorical& q) {
    check_pair(p, q);
    KahanAccumulator acc;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc.add(p[i] < q[i] ? p[i] : q[i]);
    }
    const double alpha = acc.value();
    return alpha < 0.0 ? 0.0 : (alpha > 1.0 ? 1.0 : alpha);
}

std::vector<double> grad_kl(const Categorical& p, const Categorical& q) {
    check_pair(p, q);
    std::vector<double> grad(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        grad[i] = q[i] - p[i];
    }
    return grad;
}

std::vector<double> grad_kl_reverse(const Categorical& p, const Categorical& q) {
    check_pair(p, q);
    // d/dz_j KL(q||p) = q_j (log(q_j/p_j) - KL(q||p)); entries with q_j = 0
    // contribute nothing and get gradient 0. On a support violation the
    // divergence is +inf throughout a neighborhood, so no direction of
    // descent exists; return a zero gradient and let the caller read the
    // infinite value.
    std::vector<double> log_ratio(p.size(), 0.0);
    KahanAccumulator kl_acc;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (q[i] == 0.0) {
            continue;
        }
        if (p[i] == 0.0) {
            return std::vector<double>(p.size(), 0.0);
        }
        log_ratio[i] = safe_log(q[i]) - safe_log(p[i]);
        kl_acc.add(q[i] * log_ratio[i]);
    }
    const double kl = kl_acc.value();
    std::vector<double> grad(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        grad[i] = q[i] == 0.0 ? 0.0 : q[i] * (log_ratio[i] - kl);
    }
    return grad;
}

std::vector<double> grad_tv(const Categorical& p, const Categorical& q) {
    check_pair(p, q);
    KahanAccumulator expectation;
    std::vector<double> sign(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        sign[i] = tie_sign(q[i], p[i]);
        expectation.add(q[i] * sign[i]);
    }
    const double mean_sign = expectation.value();
    std::vector<double> grad(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        grad[i] = 0.5 * q[i] * (sign[i] - mean_sign);
    }
    return grad;
}

double lambda_schedule(double alpha, double eta) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw std::invalid_argument("lambda_schedule: alpha must lie in [0, 1]");
    }
    if (!(eta > 0.0)) {
        throw std::invalid_argument("lambda_schedule: eta must be positive");
    }
    return std::exp(-eta * alpha);
}

LossOutput loss_lk_alpha(const Categorical& p, const Categorical& q) {
    check_pair(p, q);
    const double alpha = acceptance_rate(p, q);
    if (alpha < kLogFloor) {
        throw std::domain_error("loss_lk_alpha: zero acceptance (disjoint supports)");
    }
    LossOutput out;
    out.alpha = alpha;
    out.value = -std::log(alpha);
    // Differentiating -log sum_i min(p_i, q_i) directly: a coordinate
    // contributes q_i's softmax tangent only while q_i < p_i, giving
    // q .* (w - E_q[w]) / alpha with w_i = 1[q_i < p_i] (ties -> 1/2).
    // This is grad_tv / alpha written through the indicator route; the two
    // routes agreeing entrywise is asserted by the identity test suite.
    KahanAccumulator expectation;
    std::vector<double> under(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        under[i] = 0.5 * (1.0 - tie_sign(q[i], p[i]));
        expectation.add(q[i] * under[i]);
    }
    const double mean_under = expectation.value();
    out.grad.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        out.grad[i] = -(q[i] * (under[i] - mean_under)) / alpha;
    }
    return out;
}

LossOutput loss_lk_hybrid(const Categorical& p, const Categorical& q, const LossKind& kind,
                          std::optional<double> schedule_alpha, const VocabMask* mask) {
    check_pair(p, q);
    if (!kind.is_hybrid()) {
        throw std::invalid_argument("loss_lk_hybrid: kind is not a hybrid loss");
    }
    double lambda = 0.0;
    if (kind.family() == LossFamily::LKHybridFixed) {
        lambda = kind.fixed_lambda();
    } else {
        if (!schedule_alpha.has_value()) {
            throw std::invalid_argument(
                "loss_lk_hybrid: adaptive kind requires a per-position schedule alpha");
        }
        lambda = lambda_schedule(*schedule_alpha, kind.eta());
    }

    // KL sees the masked, renormalized target when truncation is active; the
    // TV side and alpha always keep the original target.
    const Categorical* kl_target = &p;
    std::optional<Categorical> restricted;
    if (mask != nullptr) {
        restricted = masked_target(p, *mask);
        kl_target = &*restricted;
    }

    const double kl = kl_forward(*kl_target, q);
    const double tv_value = tv(p, q);
    const std::vector<double> g_kl = grad_kl(*kl_target, q);
    const std::vector<double> g_tv = grad_tv(p, q);

    LossOutput out;
    out.alpha = acceptance_rate(p, q);
    out.lambda = lambda;
    out.kl_infinite = std::isinf(kl);
    out.value = lambda * kl + (1.0 - lambda) * tv_value;
    out.grad.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        out.grad[i] = lambda * g_kl[i] + (1.0 - lambda) * g_tv[i];
    }
    return out;
}

double per_position_alpha(std::span<const double> batch_alphas) {
    if (batch_alphas.empty()) {
        throw std::invalid_argument("per_position_alpha: batch must be non-empty");
    }
    return kahan_sum(batch_alphas) / static_cast<double>(batch_alphas.size());
}

double aggregate_heads(std::span<const double> per_head, const HeadAggregation& agg) {
    if (!(agg.gamma > 0.0 && agg.gamma <= 1.0)) {
        throw std::invalid_argument("aggregate_heads: gamma must lie in (0, 1]");
    }
    if (per_head.size() != agg.num_heads) {
        throw std::invalid_argument("aggregate_heads: head count mismatch");
    }
    KahanAccumulator acc;
    double weight = 1.0;
    for (double loss : per_head) {
        acc.add(weight * loss);
        weight *= agg.gamma;
    }
    return acc.value();
}

LossOutput evaluate(const LossKind& kind, const Categorical& p, const Categorical& q,
                    std::optional<double> schedule_alpha, const VocabMask* mask) {
    switch (kind.family()) {
        case LossFamily::ForwardKL: {
            const Categorical* target = &p;
            std::optional<Categorical> restricted;
            if (mask != nullptr) {
                restricted = masked_target(p, *mask);
                target = &*restricted;
            }
            LossOutput out;
            out.value = kl_forward(*target, q);
            out.grad = grad_kl(*target, q);
            out.alpha = acceptance_rate(p, q);
            out.kl_infinite = std::isinf(out.value);
            return out;
        }
        case LossFamily::ReverseKL: {
            LossOutput out;
            out.value = kl_reverse(p, q);
            out.grad = grad_kl_reverse(p, q);
            out.alpha = acceptance_rate(p, q);
            out.kl_infinite = std::isinf(out.value);
            return out;
        }
        case LossFamily::TV: {
            LossOutput out;
            out.value = tv(p, q);
            out.grad = grad_tv(p, q);
            out.alpha = acceptance_rate(p, q);
            return out;
        }
        case LossFamily::LKAlpha:
            return loss_lk_alpha(p, q);
        case LossFamily::LKHybridFixed:
        case LossFamily::LKHybridAdaptive:
            return loss_lk_hybrid(p, q, kind, schedule_alpha, mask);
    }
    throw std::logic_error("evaluate: unreachable loss family");
}

}  // namespace speclab::losses
