#pragma once

/**
 * Gradient training of toy draft models (shared logit rows, per-context
 * tables, linear feature maps) under any loss kind, with the reference
 * optimizer recipe: adaptive moments (0.9, 0.95) with decoupled weight
 * decay, global-norm gradient clipping at 0.5, linear warmup into cosine
 * decay, and exponential head weighting for multi-head tasks.
 *
 * A single run is strictly sequential and bitwise deterministic in
 * (task, loss, config); independent runs may execute concurrently.
 */

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "speclab/losses.hpp"
#include "speclab/toyfit.hpp"

namespace speclab::train {

struct ToyDraftParams {
    toyfit::DraftFamily family = toyfit::DraftFamily::SharedCategorical;
    std::size_t vocab_size = 0;
    std::size_t rows = 1;          // 1 (shared), C (table) or F (linear)
    std::vector<double> weights;   // rows x vocab_size, row-major

    double& at(std::size_t row, std::size_t col) { return weights[row * vocab_size + col]; }
    double at(std::size_t row, std::size_t col) const { return weights[row * vocab_size + col]; }

    // Logits for one context: the shared/table row, or features * weights.
    Logits logits_for(const toyfit::ToyTask& task, std::size_t context_index) const;
};

ToyDraftParams init_params(const toyfit::ToyTask& task, double init_sigma, RandomStream& rng);

struct OptimizerState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::size_t step = 0;
};

struct TrainConfig {
    double learning_rate = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_epsilon = 1e-8;
    double clip_norm = 0.5;
    double weight_decay = 0.0;
    std::size_t warmup_steps = 100;
    std::size_t epochs = 4000;
    std::size_t total_steps = 0;   // 0: derived as epochs * steps_per_epoch
    std::size_t batch_size = 0;    // 0: full batch
    std::uint64_t seed = 1;
    double head_gamma = 0.8;
    double eta = 3.0;
    double init_sigma = 0.01;
    // Early stop once the change in mean alpha over plateau_window epochs
    // falls below plateau_alpha_tol (checked only after warmup).
    double plateau_alpha_tol = 1e-5;
    std::size_t plateau_window = 20;
    // Train KL-family losses against the masked, renormalized target when
    // the task carries a draft vocabulary mask. Turning this off with a
    // masked task makes forward KL infinite and aborts the run.
    bool mask_target_for_kl = true;
    // Optional exponential smoothing of the schedule alpha (0 = use the
    // current batch mean, the default).
    double lambda_smoothing = 0.0;
};

// Linear warmup to learning_rate over warmup_steps, then cosine decay to
// zero at total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

// Global-norm clip, bias-corrected moment update, decoupled weight decay.
void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                    const TrainConfig& cfg, double lr);

// Chain rule from d loss / d logits to parameter gradients, accumulated
// into grad_out (same layout as params.weights).
void backprop_draft(const ToyDraftParams& params, const toyfit::ToyTask& task,
                    std::size_t context_index, std::span<const double> dloss_dlogits,
                    std::span<double> grad_out);

struct HeadEpochRecord {
    double loss = 0.0;   // mean per-example loss for this head, unweighted
    double alpha = 0.0;  // batch-mean acceptance at the epoch's last step
    std::optional<double> lambda;
    double weight = 1.0;  // gamma^(head-1)
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::vector<HeadEpochRecord> heads;
    double weighted_loss = 0.0;  // sum of weight * loss across heads
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
};

// Multi-head task: independent target distributions per (position, context).
struct MultiheadToyTask {
    toyfit::ToyTask base;                             // head 0 targets + family/features/mask
    std::vector<std::vector<Categorical>> extra_heads;  // heads 1..H-1

    std::size_t num_heads() const { return 1 + extra_heads.size(); }
    const std::vector<Categorical>& head_targets(std::size_t head) const {
        return head == 0 ? base.contexts : extra_heads[head - 1];
    }
};

MultiheadToyTask make_multihead_task(std::size_t vocab_size, std::size_t num_contexts,
                                     std::size_t num_heads, double concentration,
                                     std::uint64_t seed);

struct TrainResult {
    std::vector<ToyDraftParams> heads;
    TrainHistory history;
    std::size_t steps_run = 0;
    double final_mean_alpha = 0.0;  // mean over heads and contexts, full task
};

TrainResult train_draft(const toyfit::ToyTask& task, const losses::LossKind& loss,
                        const TrainConfig& cfg);

TrainResult multihead_train(const MultiheadToyTask& task, const losses::LossKind& loss,
                            const TrainConfig& cfg);

}  // namespace speclab::train
