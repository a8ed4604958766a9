#pragma once

#include <functional>
#include <optional>

#include "engage/corpus.hpp"
#include "engage/model.hpp"
#include "engage/pairs.hpp"
#include "engage/uniqueness.hpp"

namespace engage {

struct MleConfig {
    int epochs = 100;
    int batch_size = 32;
    double learning_rate = 3e-4;  // paper-scale runs use 5e-6
    int warmup_epochs = 10;
    SamplingSchedule schedule;
    std::uint64_t seed = 0;

    void validate() const;
};

struct RewardTrainConfig {
    int epochs = 10;
    int pairs_per_batch = 128;
    double learning_rate = 3e-4;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PpoConfig {
    int epochs = 5;
    int batch_size = 128;  // rollout sequences per update batch
    double learning_rate = 1.4e-5;
    double kl_coeff = 1.0;  // beta
    double clip_eps = 0.2;
    double gae_lambda = 0.95;
    double discount = 1.0;
    int n_samples = 4;  // rollouts per video
    int opt_epochs = 4;
    double kl_ceiling = 100.0;  // mean per-token KL abort guard
    std::uint64_t seed = 0;

    void validate() const;
};

struct MetricRecord {
    std::string stage;
    int epoch = 0;
    double loss = 0.0;
    std::optional<double> val_accuracy;
    std::optional<double> mean_reward;
    std::optional<double> mean_kl;
};

using MetricsSink = std::function<void(const MetricRecord&)>;

// Pairwise ranking loss -log(sigmoid(pos - neg)), softplus-stabilized.
double ranking_loss(double pos_score, double neg_score);

// Maximum-likelihood generator training; each video contributes one
// comment per epoch drawn by the uniqueness curriculum.
CommentModel train_generator(const Corpus& corpus,
                             const std::vector<UniquenessRecord>& uniqueness,
                             ModelConfig model_config, const MleConfig& config,
                             const MetricsSink& sink = nullptr);

struct RewardTrainResult {
    CommentModel model;
    double best_val_accuracy = 0.0;
};

// Ranking-loss training over comparison pairs; backbone initialized from
// the trained generator when provided. Emits the best-val-accuracy params.
RewardTrainResult train_reward(const Corpus& corpus, const PairSet& train_pairs,
                               const PairSet& val_pairs, ModelConfig model_config,
                               const RewardTrainConfig& config,
                               const CommentModel* init_generator,
                               const MetricsSink& sink = nullptr);

// Mean reward over n_probe sampled (video, generated comment) pairs; RL
// subtracts this offset from every score.
double normalize_rewards(const CommentModel& reward_model, const Corpus& corpus,
                         const CommentModel& generator, int n_probe, std::uint64_t seed);

// PPO with terminal engagement reward and per-token KL shaping against
// the frozen initial generator.
CommentModel train_rl(const Corpus& corpus, const CommentModel& generator,
                      const CommentModel& reward_model, double reward_offset,
                      const PpoConfig& config, const MetricsSink& sink = nullptr);

}  // namespace engage
