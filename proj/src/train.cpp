#include "speclab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "speclab/numeric.hpp"

namespace speclab::train {

namespace {

using losses::LossFamily;
using losses::LossKind;
using toyfit::DraftFamily;
using toyfit::ToyTask;

void require(bool ok, const char* message) {
    if (!ok) {
        throw std::invalid_argument(message);
    }
}

std::size_t rows_for(const ToyTask& task) {
    return task.family == DraftFamily::LinearLogits ? task.feature_dim() : 1;
}

Categorical draft_distribution(const ToyDraftParams& params, const ToyTask& task,
                               std::size_t context) {
    const Logits z = params.logits_for(task, context);
    if (task.draft_mask.has_value()) {
        return masked_softmax(z, *task.draft_mask);
    }
    return softmax(z);
}

double full_task_alpha(const ToyDraftParams& params, const ToyTask& task,
                       const std::vector<Categorical>& targets) {
    KahanAccumulator acc;
    for (std::size_t c = 0; c < targets.size(); ++c) {
        acc.add(losses::acceptance_rate(targets[c], draft_distribution(params, task, c)));
    }
    return acc.value() / static_cast<double>(targets.size());
}

}  // namespace

Logits ToyDraftParams::logits_for(const ToyTask& task, std::size_t context_index) const {
    if (family == DraftFamily::LinearLogits) {
        const auto& feat = task.features.at(context_index);
        std::vector<double> z(vocab_size, 0.0);
        for (std::size_t f = 0; f < feat.size(); ++f) {
            const double x = feat[f];
            for (std::size_t j = 0; j < vocab_size; ++j) {
                z[j] += x * at(f, j);
            }
        }
        return Logits(std::move(z));
    }
    // Shared categorical: one row serves every context.
    return Logits(std::vector<double>(weights.begin(),
                                      weights.begin() + static_cast<std::ptrdiff_t>(vocab_size)));
}

ToyDraftParams init_params(const ToyTask& task, double init_sigma, RandomStream& rng) {
    ToyDraftParams params;
    params.family = task.family;
    params.vocab_size = task.vocab_size;
    params.rows = rows_for(task);
    params.weights.resize(params.rows * params.vocab_size);
    for (auto& w : params.weights) {
        w = init_sigma * rng.next_gaussian();
    }
    return params;
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    require(cfg.total_steps > 0, "lr_at: total_steps must be set");
    require(step <= cfg.total_steps, "lr_at: step beyond total_steps");
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
        return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    if (cfg.total_steps <= cfg.warmup_steps) {
        return cfg.learning_rate;
    }
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                    const TrainConfig& cfg, double lr) {
    require(params.size() == grads.size(), "optimizer_step: shape mismatch");
    if (state.first_moment.empty()) {
        state.first_moment.assign(params.size(), 0.0);
        state.second_moment.assign(params.size(), 0.0);
    }
    require(state.first_moment.size() == params.size(), "optimizer_step: state shape mismatch");

    double clip_factor = 1.0;
    const double norm = l2_norm(grads);
    if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
        clip_factor = cfg.clip_norm / norm;
    }

    state.step += 1;
    const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] * clip_factor;
        state.first_moment[i] = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        state.second_moment[i] = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.first_moment[i] / bias1;
        const double v_hat = state.second_moment[i] / bias2;
        params[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_epsilon) +
                           cfg.weight_decay * params[i]);
    }
}

void backprop_draft(const ToyDraftParams& params, const ToyTask& task, std::size_t context_index,
                    std::span<const double> dloss_dlogits, std::span<double> grad_out) {
    require(dloss_dlogits.size() == params.vocab_size,
            "backprop_draft: logit gradient size mismatch");
    require(grad_out.size() == params.weights.size(),
            "backprop_draft: gradient buffer size mismatch");
    if (params.family == DraftFamily::LinearLogits) {
        const auto& feat = task.features.at(context_index);
        for (std::size_t f = 0; f < feat.size(); ++f) {
            const double x = feat[f];
            for (std::size_t j = 0; j < params.vocab_size; ++j) {
                grad_out[f * params.vocab_size + j] += x * dloss_dlogits[j];
            }
        }
    } else {
        for (std::size_t j = 0; j < params.vocab_size; ++j) {
            grad_out[j] += dloss_dlogits[j];
        }
    }
}

MultiheadToyTask make_multihead_task(std::size_t vocab_size, std::size_t num_contexts,
                                     std::size_t num_heads, double concentration,
                                     std::uint64_t seed) {
    require(num_heads >= 1, "make_multihead_task: need at least one head");
    MultiheadToyTask task;
    task.base = toyfit::make_capacity_task(vocab_size, num_contexts, concentration, seed);
    RandomStream rng(derive_seed(seed, 0x6b1d));
    for (std::size_t h = 1; h < num_heads; ++h) {
        std::vector<Categorical> targets;
        for (std::size_t c = 0; c < num_contexts; ++c) {
            targets.emplace_back(rng.next_dirichlet(vocab_size, concentration));
        }
        task.extra_heads.push_back(std::move(targets));
    }
    return task;
}

TrainResult multihead_train(const MultiheadToyTask& task, const LossKind& loss,
                            const TrainConfig& cfg) {
    if (loss.family() == LossFamily::ReverseKL) {
        throw std::invalid_argument(
            "multihead_train: reverse KL is a continuous-demo objective, not a discrete training "
            "objective");
    }
    const std::size_t num_contexts = task.base.num_contexts();
    const std::size_t num_heads = task.num_heads();
    const std::size_t batch =
        cfg.batch_size == 0 ? num_contexts : std::min(cfg.batch_size, num_contexts);
    const std::size_t steps_per_epoch = (num_contexts + batch - 1) / batch;

    TrainConfig schedule_cfg = cfg;
    if (schedule_cfg.total_steps == 0) {
        schedule_cfg.total_steps = cfg.epochs * steps_per_epoch;
    }
    require(schedule_cfg.total_steps > 0, "multihead_train: zero training steps");

    const VocabMask* kl_mask = nullptr;
    if (task.base.draft_mask.has_value() && cfg.mask_target_for_kl) {
        kl_mask = &*task.base.draft_mask;
    }

    RandomStream init_rng(derive_seed(cfg.seed, 0));
    std::vector<ToyDraftParams> heads;
    for (std::size_t h = 0; h < num_heads; ++h) {
        heads.push_back(init_params(task.base, cfg.init_sigma, init_rng));
    }
    const std::size_t params_per_head = heads.front().weights.size();
    RandomStream shuffle_rng(derive_seed(cfg.seed, 1));

    OptimizerState opt_state;
    std::vector<double> flat_params(num_heads * params_per_head);
    std::vector<double> flat_grads(num_heads * params_per_head);
    std::vector<double> smoothed_alpha(num_heads, 0.0);
    std::vector<std::size_t> order(num_contexts);
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    std::size_t global_step = 0;
    bool have_previous_alpha = false;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (batch < num_contexts) {
            for (std::size_t i = num_contexts - 1; i > 0; --i) {
                std::swap(order[i], order[static_cast<std::size_t>(shuffle_rng.next_below(i + 1))]);
            }
        }

        EpochRecord record;
        record.epoch = epoch;
        record.heads.assign(num_heads, {});
        std::vector<double> loss_sums(num_heads, 0.0);

        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            const std::size_t begin = step * batch;
            const std::size_t end = std::min(begin + batch, num_contexts);
            const double batch_scale = 1.0 / static_cast<double>(end - begin);
            std::fill(flat_grads.begin(), flat_grads.end(), 0.0);

            double head_weight = 1.0;
            for (std::size_t h = 0; h < num_heads; ++h) {
                const auto& targets = task.head_targets(h);

                std::vector<Categorical> drafts;
                std::vector<double> alphas;
                drafts.reserve(end - begin);
                for (std::size_t b = begin; b < end; ++b) {
                    drafts.push_back(draft_distribution(heads[h], task.base, order[b]));
                    alphas.push_back(losses::acceptance_rate(targets[order[b]], drafts.back()));
                }
                double schedule_alpha = losses::per_position_alpha(alphas);
                if (cfg.lambda_smoothing > 0.0 && have_previous_alpha) {
                    schedule_alpha = cfg.lambda_smoothing * smoothed_alpha[h] +
                                     (1.0 - cfg.lambda_smoothing) * schedule_alpha;
                }
                smoothed_alpha[h] = schedule_alpha;

                KahanAccumulator loss_acc;
                std::optional<double> lambda_used;
                std::span<double> head_grad(flat_grads.data() + h * params_per_head,
                                            params_per_head);
                std::vector<double> dlogits(task.base.vocab_size);
                for (std::size_t b = begin; b < end; ++b) {
                    const std::size_t c = order[b];
                    losses::LossOutput out = losses::evaluate(loss, targets[c], drafts[b - begin],
                                                              schedule_alpha, kl_mask);
                    if (out.kl_infinite) {
                        throw std::runtime_error(
                            "training aborted: forward KL diverged because the target has mass on "
                            "tokens the draft vocabulary mask excludes; enable mask_target_for_kl "
                            "so KL trains against the mask-renormalized target, or switch to an "
                            "acceptance-targeting loss, which draft masking leaves unchanged");
                    }
                    loss_acc.add(out.value);
                    lambda_used = out.lambda;
                    // Head h enters the aggregate objective with weight
                    // gamma^h over the batch-mean loss.
                    for (std::size_t j = 0; j < dlogits.size(); ++j) {
                        dlogits[j] = out.grad[j] * batch_scale * head_weight;
                    }
                    backprop_draft(heads[h], task.base, c, dlogits, head_grad);
                }

                loss_sums[h] += loss_acc.value() * batch_scale;
                record.heads[h].alpha = schedule_alpha;
                record.heads[h].lambda = lambda_used;
                record.heads[h].weight = head_weight;
                head_weight *= cfg.head_gamma;
            }
            have_previous_alpha = true;

            // One optimizer step over the concatenated heads: the norm clip
            // is global across the whole model.
            for (std::size_t h = 0; h < num_heads; ++h) {
                std::copy(heads[h].weights.begin(), heads[h].weights.end(),
                          flat_params.begin() + static_cast<std::ptrdiff_t>(h * params_per_head));
            }
            const double lr = lr_at(std::min(global_step, schedule_cfg.total_steps), schedule_cfg);
            optimizer_step(flat_params, flat_grads, opt_state, cfg, lr);
            for (std::size_t h = 0; h < num_heads; ++h) {
                const auto first = flat_params.begin() + static_cast<std::ptrdiff_t>(h * params_per_head);
                std::copy(first, first + static_cast<std::ptrdiff_t>(params_per_head),
                          heads[h].weights.begin());
            }
            ++global_step;
        }

        KahanAccumulator weighted;
        for (std::size_t h = 0; h < num_heads; ++h) {
            record.heads[h].loss = loss_sums[h] / static_cast<double>(steps_per_epoch);
            weighted.add(record.heads[h].weight * record.heads[h].loss);
        }
        record.weighted_loss = weighted.value();
        result.history.epochs.push_back(std::move(record));

        // Plateau stop on recorded alpha, active only after warmup.
        if (global_step > cfg.warmup_steps && result.history.epochs.size() > cfg.plateau_window) {
            const auto& now = result.history.epochs.back();
            const auto& then =
                result.history.epochs[result.history.epochs.size() - 1 - cfg.plateau_window];
            double delta = 0.0;
            for (std::size_t h = 0; h < num_heads; ++h) {
                delta += std::abs(now.heads[h].alpha - then.heads[h].alpha);
            }
            if (delta / static_cast<double>(num_heads) < cfg.plateau_alpha_tol) {
                break;
            }
        }
    }

    result.steps_run = global_step;
    KahanAccumulator alpha_acc;
    for (std::size_t h = 0; h < num_heads; ++h) {
        alpha_acc.add(full_task_alpha(heads[h], task.base, task.head_targets(h)));
    }
    result.final_mean_alpha = alpha_acc.value() / static_cast<double>(num_heads);
    result.heads = std::move(heads);
    return result;
}

TrainResult train_draft(const ToyTask& task, const LossKind& loss, const TrainConfig& cfg) {
    MultiheadToyTask wrapper;
    wrapper.base = task;
    return multihead_train(wrapper, loss, cfg);
}

}  // namespace speclab::train
