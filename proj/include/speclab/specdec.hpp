#pragma once

/**
 * Lossless chain speculative sampling over abstract target/draft oracles.
 *
 * One round drafts up to K tokens autoregressively from the draft model,
 * accepts each with probability min(1, p(x)/q(x)) (or p(argmax q) in greedy
 * draft mode), resamples from the residual distribution at the first
 * rejection, and always emits one bonus token. Exact enumeration over the
 * full probability tree verifies that the stochastic protocol preserves the
 * target marginal, and that the greedy draft shortcut does not.
 *
 * Single generation streams are strictly sequential; independent streams
 * with their own RandomStream instances can run concurrently and their
 * metrics merge by addition.
 */

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "speclab/dist.hpp"

namespace speclab::specdec {

// Deterministic oracle: context -> next-token distribution. Stands in for
// both the target and the draft model.
class SequenceModel {
public:
    virtual ~SequenceModel() = default;
    virtual Categorical distribution(std::span<const Token> context) const = 0;
    virtual std::size_t vocab_size() const = 0;
};

// Same distribution regardless of context.
class ConstantModel final : public SequenceModel {
public:
    explicit ConstantModel(Categorical dist) : dist_(std::move(dist)) {}
    Categorical distribution(std::span<const Token>) const override { return dist_; }
    std::size_t vocab_size() const override { return dist_.size(); }

private:
    Categorical dist_;
};

// Distribution keyed by context length past a fixed prompt; repeated
// run_round calls on the prompt see stationary per-position distributions.
class PositionalModel final : public SequenceModel {
public:
    PositionalModel(std::size_t prompt_len, std::vector<Categorical> per_position);
    Categorical distribution(std::span<const Token> context) const override;
    std::size_t vocab_size() const override { return per_position_.front().size(); }

private:
    std::size_t prompt_len_;
    std::vector<Categorical> per_position_;
};

// Seeded Dirichlet draw per distinct context (hash-keyed); a deterministic
// stand-in for an autoregressive model with genuine context dependence.
class HashedDirichletModel final : public SequenceModel {
public:
    HashedDirichletModel(std::size_t vocab_size, double concentration, std::uint64_t seed);
    Categorical distribution(std::span<const Token> context) const override;
    std::size_t vocab_size() const override { return vocab_size_; }

private:
    std::size_t vocab_size_;
    double concentration_;
    std::uint64_t seed_;
};

// Capacity-limited draft proxy: (1 - rho) * base + rho * uniform.
class SmoothedModel final : public SequenceModel {
public:
    SmoothedModel(std::shared_ptr<const SequenceModel> base, double rho);
    Categorical distribution(std::span<const Token> context) const override;
    std::size_t vocab_size() const override { return base_->vocab_size(); }

private:
    std::shared_ptr<const SequenceModel> base_;
    double rho_;
};

enum class DraftMode { Stochastic, Greedy };

struct SpecConfig {
    std::size_t max_draft_len = 4;  // K >= 1
    Temperature temperature{};
    DraftMode draft_mode = DraftMode::Stochastic;
    std::size_t max_new_tokens = 0;
    std::optional<Token> stop_token;
};

struct DraftStep {
    Token token;
    Categorical draft_dist;   // q at this position (temperature applied)
    Categorical target_dist;  // p at this position (temperature applied)
    double beta;              // acceptance probability in [0, 1]
    bool accepted;
};

// One speculation round. Steps stop at the first rejection, so the accepted
// flags always form a prefix.
struct RoundTrace {
    std::vector<DraftStep> steps;
    Token bonus_token = 0;
    std::size_t accepted_count = 0;
    bool bonus_from_residual = false;
};

struct PositionCount {
    std::size_t accepted = 0;
    std::size_t drafted = 0;  // rounds in which this position was reached
};

struct AcceptanceMetrics {
    std::vector<PositionCount> per_position;  // length K once sized
    std::size_t total_accepted = 0;
    std::size_t total_drafted = 0;
    std::size_t rounds = 0;
    std::size_t emitted = 0;  // accepted + bonus tokens

    AcceptanceMetrics() = default;
    // Pre-sizes per_position so unreached deep positions still report
    // zero counts.
    explicit AcceptanceMetrics(std::size_t max_draft_len) : per_position(max_draft_len) {}

    void absorb(const RoundTrace& trace);
    void merge(const AcceptanceMetrics& other);
};

// min(1, p(x)/q(x)). Throws on q(x) == 0: a token the draft cannot have
// drawn is a protocol violation.
double accept_prob(const Categorical& p, const Categorical& q, Token x);

// p evaluated at argmax of q: the acceptance probability when the draft
// proposes greedily but is scored as a point mass.
double greedy_accept_prob(const Categorical& p, const Categorical& q);

RoundTrace run_round(const SequenceModel& target, const SequenceModel& draft,
                     std::span<const Token> context, const SpecConfig& cfg, RandomStream& rng);

struct GenerationResult {
    std::vector<Token> tokens;
    AcceptanceMetrics metrics;
};

GenerationResult generate(const SequenceModel& target, const SequenceModel& draft,
                          std::span<const Token> prompt, const SpecConfig& cfg, RandomStream& rng,
                          std::vector<RoundTrace>* trace_sink = nullptr);

// K * (total accepted / total drafted) + 1; drafted counts reached
// positions only. Throws when nothing was drafted.
double tau(const AcceptanceMetrics& metrics, std::size_t max_draft_len);

// Exact per-round statistics for i.i.d. rounds with the given per-position
// acceptance rates, by enumeration over the accept/reject outcome tree.
struct RoundMoments {
    double expected_accepted = 0.0;
    double expected_drafted = 0.0;
    double expected_tau = 0.0;
    // Standard error of the simulated tau estimate over n rounds.
    double tau_standard_error(std::size_t rounds) const;

    double second_moment_residual = 0.0;  // E[(a - r*d)^2] with r = E[a]/E[d]
    std::size_t max_draft_len = 0;
};

RoundMoments enumerate_round_outcomes(std::span<const double> alphas);

double expected_tau_analytic(std::span<const double> alphas);

// Exact marginal of the first emitted token, summing over every draft path
// and acceptance outcome. Tractability bounds: V <= 8, K <= 3.
Categorical exactness_enumerate(const SequenceModel& target, const SequenceModel& draft,
                                std::span<const Token> prompt, std::size_t max_draft_len,
                                DraftMode mode = DraftMode::Stochastic,
                                Temperature temperature = Temperature{});

}  // namespace speclab::specdec
