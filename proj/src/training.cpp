#include "engage/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "engage/util.hpp"

namespace engage {

using nn::MatrixXd;
using nn::VectorXd;

void MleConfig::validate() const {
    if (epochs < 1 || batch_size < 1 || learning_rate <= 0.0 || warmup_epochs < 1) {
        throw std::runtime_error("mle config: epochs, batch_size, learning_rate and "
                                 "warmup_epochs must be positive");
    }
    schedule.validate();
}

void RewardTrainConfig::validate() const {
    if (epochs < 1 || pairs_per_batch < 1 || learning_rate <= 0.0) {
        throw std::runtime_error("reward config: epochs, pairs_per_batch and learning_rate "
                                 "must be positive");
    }
}

void PpoConfig::validate() const {
    if (epochs < 1 || batch_size < 1 || learning_rate <= 0.0 || n_samples < 1 ||
        opt_epochs < 1) {
        throw std::runtime_error("ppo config: counts and learning_rate must be positive");
    }
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) {
        throw std::runtime_error("ppo config: clip_eps must lie in (0,1)");
    }
    if (kl_coeff < 0.0) throw std::runtime_error("ppo config: kl_coeff must be >= 0");
    if (gae_lambda < 0.0 || gae_lambda > 1.0 || discount < 0.0 || discount > 1.0) {
        throw std::runtime_error("ppo config: gae_lambda and discount must lie in [0,1]");
    }
    if (kl_ceiling <= 0.0) throw std::runtime_error("ppo config: kl_ceiling must be positive");
}

double ranking_loss(double pos_score, double neg_score) {
    if (!std::isfinite(pos_score) || !std::isfinite(neg_score)) {
        throw std::runtime_error("ranking_loss: non-finite score");
    }
    double x = -(pos_score - neg_score);
    // softplus(x) = max(x,0) + log1p(exp(-|x|))
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

namespace {

std::vector<int> encode_comment(const Vocab& vocab, const ModelConfig& cfg,
                                const std::string& text) {
    std::vector<int> toks = vocab.encode(text);
    if (static_cast<int>(toks.size()) > cfg.max_comment_len) {
        toks.resize(static_cast<std::size_t>(cfg.max_comment_len));
    }
    return toks;
}

std::vector<int> mle_input(const std::vector<int>& tokens) {
    std::vector<int> input;
    input.reserve(tokens.size() + 1);
    input.push_back(Vocab::kBos);
    input.insert(input.end(), tokens.begin(), tokens.end());
    return input;
}

// Targets for teacher forcing: content tokens then <eos>.
std::vector<int> mle_targets(const std::vector<int>& tokens) {
    std::vector<int> t = tokens;
    t.push_back(Vocab::kEos);
    return t;
}

struct VideoSamples {
    const Video* video = nullptr;
    std::vector<ScoredComment> comments;
};

}  // namespace

CommentModel train_generator(const Corpus& corpus,
                             const std::vector<UniquenessRecord>& uniqueness,
                             ModelConfig model_config, const MleConfig& config,
                             const MetricsSink& sink) {
    config.validate();
    Vocab vocab = Vocab::build(corpus);
    model_config.vocab_size = vocab.size();
    CommentModel model(model_config, ModelMode::generator, std::move(vocab),
                       derive_seed(config.seed, "generator_init"));

    std::unordered_map<std::string, double> score_of;
    for (const auto& r : uniqueness) score_of[r.comment_id] = r.uniqueness;

    std::vector<VideoSamples> train_set;
    for (const Video& v : corpus.videos()) {
        const auto& idx = corpus.comments_of(v.id);
        if (idx.empty()) continue;
        VideoSamples vs;
        vs.video = &v;
        for (std::size_t i : idx) {
            const Comment& c = corpus.comments()[i];
            auto it = score_of.find(c.id);
            if (it == score_of.end()) {
                throw std::runtime_error("train_generator: missing uniqueness score for comment " +
                                         c.id);
            }
            vs.comments.push_back({&c, it->second});
        }
        train_set.push_back(std::move(vs));
    }
    if (train_set.empty()) {
        throw std::runtime_error("train_generator: corpus has no videos with comments");
    }

    nn::AdamW opt({config.learning_rate});
    CommentModel last_good = model;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(config.seed, "mle_epoch_" + std::to_string(epoch)));
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);

        double lr_scale = std::min(1.0, static_cast<double>(epoch + 1) /
                                            static_cast<double>(config.warmup_epochs));
        double epoch_nll = 0.0;
        long epoch_tokens = 0;

        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));

            struct Sample {
                CommentModel::ForwardHandle fwd;
                std::vector<int> targets;
            };
            std::vector<Sample> batch;
            long batch_tokens = 0;
            for (std::size_t bi = start; bi < end; ++bi) {
                const VideoSamples& vs = train_set[order[bi]];
                const Comment& chosen =
                    sample_training_comment(vs.comments, epoch, config.schedule, rng);
                std::vector<int> tokens =
                    encode_comment(model.vocab(), model.config(), chosen.text);
                Sample s;
                s.targets = mle_targets(tokens);
                s.fwd = model.forward_train(*vs.video, mle_input(tokens), true, false);
                batch.push_back(std::move(s));
                batch_tokens += static_cast<long>(tokens.size()) + 1;
            }

            model.params().zero_grad();
            double batch_nll = 0.0;
            for (auto& s : batch) {
                const MatrixXd& logits = model.logits(*s.fwd);
                MatrixXd dlogits(logits.rows(), logits.cols());
                for (Eigen::Index i = 0; i < logits.rows(); ++i) {
                    VectorXd logp = nn::log_softmax_row(logits.row(i).transpose());
                    int target = s.targets[static_cast<std::size_t>(i)];
                    batch_nll -= logp[target];
                    VectorXd p = logp.array().exp();
                    p[target] -= 1.0;
                    dlogits.row(i) = p.transpose() / static_cast<double>(batch_tokens);
                }
                model.backward(*s.fwd, dlogits, VectorXd());
            }
            if (!std::isfinite(batch_nll)) {
                return last_good;  // divergence guard: keep the last good params
            }
            opt.step(model.params(), lr_scale);
            epoch_nll += batch_nll;
            epoch_tokens += batch_tokens;
        }

        double loss = epoch_nll / static_cast<double>(epoch_tokens);
        if (!std::isfinite(loss)) return last_good;
        last_good = model;
        if (sink) sink({"train-gen", epoch, loss, {}, {}, {}});
    }
    return model;
}

RewardTrainResult train_reward(const Corpus& corpus, const PairSet& train_pairs,
                               const PairSet& val_pairs, ModelConfig model_config,
                               const RewardTrainConfig& config,
                               const CommentModel* init_generator, const MetricsSink& sink) {
    config.validate();
    if (train_pairs.pairs.empty()) {
        throw std::runtime_error("train_reward: empty training pair set");
    }
    Vocab vocab = init_generator ? init_generator->vocab() : Vocab::build(corpus);
    if (init_generator) {
        model_config = init_generator->config();
    } else {
        model_config.vocab_size = vocab.size();
    }
    CommentModel model(model_config, ModelMode::reward, std::move(vocab),
                       derive_seed(config.seed, "reward_init"));
    if (init_generator) model.init_from(*init_generator);

    auto tokens_of = [&](const std::string& comment_id) {
        const Comment& c = corpus.comment(comment_id);
        std::vector<int> toks = encode_comment(model.vocab(), model.config(), c.text);
        if (toks.empty()) {
            throw std::runtime_error("train_reward: comment " + comment_id +
                                     " tokenizes to nothing");
        }
        toks.push_back(Vocab::kEos);
        return toks;  // scalar head reads the <eos> position
    };

    auto pair_scores = [&](const ComparisonPair& p) {
        const Video& video = corpus.video(p.video_id);
        double pos = model.scalar_scores(video, tokens_of(p.pos_id)).reverse()[0];
        double neg = model.scalar_scores(video, tokens_of(p.neg_id)).reverse()[0];
        return std::make_pair(pos, neg);
    };

    auto val_accuracy = [&]() {
        if (val_pairs.pairs.empty()) return 0.5;
        double agree = 0.0;
        for (const auto& p : val_pairs.pairs) {
            auto [pos, neg] = pair_scores(p);
            if (pos > neg) {
                agree += 1.0;
            } else if (pos == neg) {
                agree += 0.5;
            }
        }
        return agree / static_cast<double>(val_pairs.pairs.size());
    };

    nn::AdamW opt({config.learning_rate});
    RewardTrainResult best{model, -1.0};

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(config.seed, "reward_epoch_" + std::to_string(epoch)));
        std::vector<std::size_t> order(train_pairs.pairs.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);

        double epoch_loss = 0.0;
        std::size_t epoch_pairs = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.pairs_per_batch)) {
            std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(config.pairs_per_batch));
            double batch_n = static_cast<double>(end - start);
            model.params().zero_grad();
            double batch_loss = 0.0;
            for (std::size_t bi = start; bi < end; ++bi) {
                const ComparisonPair& p = train_pairs.pairs[order[bi]];
                const Video& video = corpus.video(p.video_id);
                std::vector<int> pos_toks = tokens_of(p.pos_id);
                std::vector<int> neg_toks = tokens_of(p.neg_id);
                auto pos_fwd = model.forward_train(video, mle_input(pos_toks), false, true);
                auto neg_fwd = model.forward_train(video, mle_input(neg_toks), false, true);
                double pos = model.scalars(*pos_fwd).reverse()[0];
                double neg = model.scalars(*neg_fwd).reverse()[0];
                batch_loss += ranking_loss(pos, neg);
                // d/dpos of softplus(neg-pos) = -sigmoid(neg-pos)
                double sig = 1.0 / (1.0 + std::exp(pos - neg));
                VectorXd dpos = VectorXd::Zero(model.scalars(*pos_fwd).size());
                dpos[dpos.size() - 1] = -sig / batch_n;
                VectorXd dneg = VectorXd::Zero(model.scalars(*neg_fwd).size());
                dneg[dneg.size() - 1] = sig / batch_n;
                model.backward(*pos_fwd, MatrixXd(), dpos);
                model.backward(*neg_fwd, MatrixXd(), dneg);
            }
            if (!std::isfinite(batch_loss)) {
                throw std::runtime_error("train_reward: non-finite loss");
            }
            opt.step(model.params());
            epoch_loss += batch_loss;
            epoch_pairs += end - start;
        }

        double acc = val_accuracy();
        if (acc > best.best_val_accuracy) {
            best.model = model;
            best.best_val_accuracy = acc;
        }
        if (sink) {
            sink({"train-reward", epoch, epoch_loss / static_cast<double>(epoch_pairs), acc,
                  {}, {}});
        }
    }
    return best;
}

double normalize_rewards(const CommentModel& reward_model, const Corpus& corpus,
                         const CommentModel& generator, int n_probe, std::uint64_t seed) {
    if (n_probe < 1) throw std::runtime_error("normalize_rewards: n_probe must be >= 1");
    if (corpus.n_videos() == 0) {
        throw std::runtime_error("normalize_rewards: empty corpus");
    }
    std::mt19937_64 rng(derive_seed(seed, "normalize"));
    DecodeParams decode;
    decode.strategy = DecodeStrategy::temperature;
    decode.temperature = 1.0;
    decode.max_len = generator.config().max_comment_len;
    decode.n_samples = 1;

    double sum = 0.0;
    long counted = 0;
    for (int i = 0; i < n_probe; ++i) {
        const Video& v =
            corpus.videos()[rng() % static_cast<std::uint64_t>(corpus.n_videos())];
        auto samples = generator.generate(v, decode, rng);
        if (samples[0].tokens.empty()) continue;  // no scoreable content
        sum += reward_model.reward_score(v, samples[0].tokens);
        counted += 1;
    }
    return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

namespace {

struct Rollout {
    const Video* video = nullptr;
    std::vector<int> tokens;  // content tokens
    bool terminated = false;
    VectorXd old_logps;  // per action (content tokens, then <eos> when terminated)
    VectorXd ref_logps;
    VectorXd rewards;
    VectorXd advantages;
    VectorXd returns;
    double terminal_reward = 0.0;
    double mean_kl = 0.0;

    std::size_t n_actions() const {
        return tokens.size() + (terminated ? 1u : 0u);
    }
    std::vector<int> input() const { return mle_input(tokens); }
    int action(std::size_t i) const {
        return i < tokens.size() ? tokens[i] : Vocab::kEos;
    }
};

// Log-probabilities under `model` for each action of the rollout,
// teacher forced. Returns the forward pass when `fwd_out` is given so
// the caller can run backward on it.
VectorXd action_log_probs(CommentModel& model, const Rollout& r,
                          CommentModel::ForwardHandle* fwd_out) {
    auto fwd = model.forward_train(*r.video, r.input(), true, false);
    const MatrixXd& logits = model.logits(*fwd);
    VectorXd out(static_cast<Eigen::Index>(r.n_actions()));
    for (std::size_t i = 0; i < r.n_actions(); ++i) {
        VectorXd logp = nn::log_softmax_row(logits.row(static_cast<Eigen::Index>(i)).transpose());
        out[static_cast<Eigen::Index>(i)] = logp[r.action(i)];
    }
    if (fwd_out) *fwd_out = std::move(fwd);
    return out;
}

}  // namespace

CommentModel train_rl(const Corpus& corpus, const CommentModel& generator,
                      const CommentModel& reward_model, double reward_offset,
                      const PpoConfig& config, const MetricsSink& sink) {
    config.validate();
    if (corpus.n_videos() == 0) throw std::runtime_error("train_rl: empty corpus");

    CommentModel policy = generator;
    policy.set_mode(ModelMode::policy);
    CommentModel reference = generator;  // frozen KL anchor

    CommentModel value(reward_model.config(), ModelMode::value, reward_model.vocab(),
                       derive_seed(config.seed, "value_init"));
    value.init_from(reward_model);

    nn::AdamW policy_opt({config.learning_rate});
    nn::AdamW value_opt({config.learning_rate});

    DecodeParams decode;
    decode.strategy = DecodeStrategy::temperature;
    decode.temperature = 1.0;
    decode.max_len = policy.config().max_comment_len;
    decode.n_samples = config.n_samples;

    std::vector<const Video*> train_videos;
    for (const Video& v : corpus.videos()) train_videos.push_back(&v);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(config.seed, "ppo_epoch_" + std::to_string(epoch)));
        std::vector<std::size_t> order(train_videos.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);

        double epoch_reward = 0.0;
        long epoch_sequences = 0;
        double epoch_kl = 0.0;
        long epoch_actions = 0;
        double epoch_policy_loss = 0.0;
        long epoch_updates = 0;

        std::size_t vi = 0;
        while (vi < order.size()) {
            // ---- collect one rollout batch ----
            std::vector<Rollout> batch;
            while (vi < order.size() &&
                   batch.size() < static_cast<std::size_t>(config.batch_size)) {
                const Video& video = *train_videos[order[vi]];
                ++vi;
                auto samples = policy.generate(video, decode, rng);
                for (auto& s : samples) {
                    Rollout r;
                    r.video = &video;
                    r.tokens = std::move(s.tokens);
                    r.terminated = s.terminated;
                    if (r.n_actions() == 0) continue;
                    batch.push_back(std::move(r));
                }
            }
            if (batch.empty()) break;

            // ---- score, shape rewards, estimate advantages ----
            std::vector<double> all_adv;
            for (Rollout& r : batch) {
                // Old log-probs are recomputed teacher-forced so they share
                // the reference pass's numerics exactly; at the first batch
                // policy == reference and the KL shaping is identically zero.
                r.old_logps = action_log_probs(policy, r, nullptr);
                r.ref_logps = action_log_probs(reference, r, nullptr);
                double term = 0.0;
                if (!r.tokens.empty()) {
                    term = reward_model.reward_score(*r.video, r.tokens) - reward_offset;
                }
                r.terminal_reward = term;
                std::size_t n_act = r.n_actions();
                r.rewards = VectorXd::Zero(static_cast<Eigen::Index>(n_act));
                for (std::size_t i = 0; i < n_act; ++i) {
                    double kl_i = r.old_logps[static_cast<Eigen::Index>(i)] -
                                  r.ref_logps[static_cast<Eigen::Index>(i)];
                    r.rewards[static_cast<Eigen::Index>(i)] = -config.kl_coeff * kl_i;
                    r.mean_kl += kl_i;
                }
                r.rewards[static_cast<Eigen::Index>(n_act - 1)] += term;
                r.mean_kl /= static_cast<double>(n_act);

                VectorXd values = value.value_estimates(*r.video, r.tokens);
                r.advantages.resize(static_cast<Eigen::Index>(n_act));
                r.returns.resize(static_cast<Eigen::Index>(n_act));
                double next_adv = 0.0;
                for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(n_act) - 1; i >= 0; --i) {
                    double v_next =
                        i + 1 < static_cast<std::ptrdiff_t>(n_act) ? values[i + 1] : 0.0;
                    double delta = r.rewards[i] + config.discount * v_next - values[i];
                    next_adv = delta + config.discount * config.gae_lambda * next_adv;
                    r.advantages[i] = next_adv;
                    r.returns[i] = next_adv + values[i];
                }
                for (std::size_t i = 0; i < n_act; ++i) all_adv.push_back(r.advantages[i]);

                epoch_reward += term;
                epoch_sequences += 1;
                epoch_kl += r.mean_kl * static_cast<double>(n_act);
                epoch_actions += static_cast<long>(n_act);
            }

            // whiten advantages over the batch
            double mean = std::accumulate(all_adv.begin(), all_adv.end(), 0.0) /
                          static_cast<double>(all_adv.size());
            double var = 0.0;
            for (double a : all_adv) var += (a - mean) * (a - mean);
            double stddev = std::sqrt(var / static_cast<double>(all_adv.size()));
            for (Rollout& r : batch) {
                r.advantages = ((r.advantages.array() - mean) / (stddev + 1e-8)).matrix();
            }

            long total_actions = 0;
            for (const Rollout& r : batch) total_actions += static_cast<long>(r.n_actions());

            // ---- clipped-surrogate updates ----
            for (int pass = 0; pass < config.opt_epochs; ++pass) {
                policy.params().zero_grad();
                value.params().zero_grad();
                double policy_loss = 0.0;
                double value_loss = 0.0;
                for (Rollout& r : batch) {
                    CommentModel::ForwardHandle fwd;
                    VectorXd new_logps = action_log_probs(policy, r, &fwd);
                    const MatrixXd& logits = policy.logits(*fwd);
                    MatrixXd dlogits = MatrixXd::Zero(logits.rows(), logits.cols());
                    std::size_t n_act = r.n_actions();
                    for (std::size_t i = 0; i < n_act; ++i) {
                        auto ei = static_cast<Eigen::Index>(i);
                        double adv = r.advantages[ei];
                        double ratio = std::exp(new_logps[ei] - r.old_logps[ei]);
                        double clipped =
                            std::clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps);
                        policy_loss -= std::min(ratio * adv, clipped * adv);
                        bool clipped_out = (adv > 0.0 && ratio > 1.0 + config.clip_eps) ||
                                           (adv < 0.0 && ratio < 1.0 - config.clip_eps);
                        if (!clipped_out) {
                            double g = -ratio * adv / static_cast<double>(total_actions);
                            VectorXd p =
                                nn::log_softmax_row(logits.row(ei).transpose()).array().exp();
                            p = -p * g;
                            p[r.action(i)] += g;
                            // dlogp/dlogits = onehot - softmax, times upstream g
                            dlogits.row(ei) += p.transpose();
                        }
                    }
                    policy.backward(*fwd, dlogits, VectorXd());

                    auto vfwd = value.forward_train(*r.video, r.input(), false, true);
                    const VectorXd& v_all = value.scalars(*vfwd);
                    VectorXd dscalars = VectorXd::Zero(v_all.size());
                    for (std::size_t i = 0; i < n_act; ++i) {
                        auto ei = static_cast<Eigen::Index>(i);
                        double err = v_all[ei] - r.returns[ei];
                        value_loss += 0.5 * err * err;
                        dscalars[ei] = err / static_cast<double>(total_actions);
                    }
                    value.backward(*vfwd, MatrixXd(), dscalars);
                }
                policy_loss /= static_cast<double>(total_actions);
                value_loss /= static_cast<double>(total_actions);
                if (!std::isfinite(policy_loss) || !std::isfinite(value_loss)) {
                    throw std::runtime_error("train_rl: non-finite loss");
                }
                policy_opt.step(policy.params());
                value_opt.step(value.params());
                epoch_policy_loss += policy_loss;
                epoch_updates += 1;
            }
        }

        double mean_kl = epoch_actions > 0 ? epoch_kl / static_cast<double>(epoch_actions) : 0.0;
        double mean_reward =
            epoch_sequences > 0 ? epoch_reward / static_cast<double>(epoch_sequences) : 0.0;
        if (std::abs(mean_kl) > config.kl_ceiling) {
            throw std::runtime_error("train_rl: mean KL " + std::to_string(mean_kl) +
                                     " exceeded the ceiling (policy collapse guard)");
        }
        if (sink) {
            sink({"train-rl", epoch,
                  epoch_updates > 0 ? epoch_policy_loss / static_cast<double>(epoch_updates) : 0.0,
                  {}, mean_reward, mean_kl});
        }
    }
    return policy;
}

}  // namespace engage
