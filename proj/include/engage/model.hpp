#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "engage/corpus.hpp"
#include "engage/nn.hpp"

namespace engage {

enum class ModelMode { generator, reward, policy, value };

std::string mode_name(ModelMode mode);
ModelMode mode_from_name(const std::string& name);

struct ModelConfig {
    int n_queries = 40;
    int perceiver_layers = 8;
    int d_model = 128;
    int decoder_layers = 4;
    int n_heads = 8;
    int vocab_size = 0;  // filled in from the vocabulary
    int max_comment_len = 16;
    int max_frames = 12;   // T
    int max_patches = 16;  // L
    int feature_dim = 24;  // input feature dim d

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class DecodeStrategy { greedy, temperature, top_k };

struct DecodeParams {
    DecodeStrategy strategy = DecodeStrategy::temperature;
    double temperature = 1.0;
    int top_k = 10;
    int max_len = 16;
    int n_samples = 1;

    void validate() const;
};

struct Vocab {
    std::vector<std::string> tokens;  // index == id; [0]=<bos>, [1]=<eos>, [2]=<unk>
    std::unordered_map<std::string, int> ids;

    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;

    static Vocab build(const Corpus& corpus);
    static Vocab from_tokens(std::vector<std::string> tokens);

    int id_of(const std::string& word) const;
    std::vector<int> encode(std::string_view text) const;  // no bos/eos
    std::string decode(const std::vector<int>& ids) const;
    int size() const { return static_cast<int>(tokens.size()); }
};

struct GenSample {
    std::vector<int> tokens;           // content tokens, no bos/eos
    Eigen::VectorXd token_log_probs;   // one per content token
    bool terminated = false;           // true when <eos> was produced
    double eos_log_prob = 0.0;         // valid when terminated
};

struct LoadedModel;

// Shared backbone (video perceiver + causal token decoder) with a token
// head in generator/policy mode or a scalar head in reward/value mode.
class CommentModel {
public:
    CommentModel(ModelConfig config, ModelMode mode, Vocab vocab, std::uint64_t init_seed);

    const ModelConfig& config() const { return config_; }
    ModelMode mode() const { return mode_; }
    void set_mode(ModelMode mode);
    const Vocab& vocab() const { return vocab_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    // Copies every identically-shaped tensor from `other` (backbone plus
    // any head both modes share).
    void init_from(const CommentModel& other);

    std::string params_fingerprint() const;

    // ---- inference ----
    Eigen::MatrixXd perceive(const Video& video) const;

    std::vector<GenSample> generate(const Video& video, const DecodeParams& decode,
                                    std::mt19937_64& rng) const;

    // Teacher-forced log P(token_i | video, tokens_<i) for content tokens.
    Eigen::VectorXd log_probs(const Video& video, const std::vector<int>& tokens) const;

    // Full next-token distribution after <bos> + prefix (diagnostics/tests).
    Eigen::VectorXd next_token_log_probs(const Video& video,
                                         const std::vector<int>& prefix) const;

    // Scalar head value at every token position of [<bos>, tokens...].
    Eigen::VectorXd scalar_scores(const Video& video, const std::vector<int>& input_tokens) const;

    double reward_score(const Video& video, const std::vector<int>& tokens) const;

    // V(s) per action state for [<bos>, t_1..t_n]: n+1 entries.
    Eigen::VectorXd value_estimates(const Video& video, const std::vector<int>& tokens) const;

    // ---- training ----
    struct TrainForward;
    struct TrainForwardDeleter {
        void operator()(TrainForward* p) const;
    };
    using ForwardHandle = std::unique_ptr<TrainForward, TrainForwardDeleter>;
    ForwardHandle forward_train(const Video& video, const std::vector<int>& input_tokens,
                                bool need_logits, bool need_scalars);
    const Eigen::MatrixXd& logits(const TrainForward& fwd) const;
    const Eigen::VectorXd& scalars(const TrainForward& fwd) const;
    // dlogits: (n_token_positions x vocab); dscalars: (n_token_positions).
    // Either may be empty. Gradients accumulate into params().
    void backward(TrainForward& fwd, const Eigen::MatrixXd& dlogits,
                  const Eigen::VectorXd& dscalars);

    // ---- checkpointing ----
    void save(const std::filesystem::path& path, const std::string& rng_state = "") const;
    static LoadedModel load_with_state(const std::filesystem::path& path);
    static CommentModel load(const std::filesystem::path& path);

    ~CommentModel();
    CommentModel(CommentModel&&) noexcept;
    CommentModel& operator=(CommentModel&&) noexcept;
    CommentModel(const CommentModel&);
    CommentModel& operator=(const CommentModel&);

private:
    void register_params();
    void init_values(std::uint64_t seed);
    std::vector<int> reward_input(const std::vector<int>& tokens) const;

    ModelConfig config_;
    ModelMode mode_;
    Vocab vocab_;
    nn::ParamStore params_;
};

struct LoadedModel {
    CommentModel model;
    std::string rng_state;
};

}  // namespace engage
