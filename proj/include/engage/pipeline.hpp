#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "engage/corpus.hpp"
#include "engage/model.hpp"
#include "engage/training.hpp"

namespace engage {

struct PairsStageConfig {
    std::size_t max_pairs_per_video = 200;
    double val_fraction = 0.2;
    bool biased = false;
};

struct UniquenessStageConfig {
    int k = 10;
    int m = 20;
    int text_dim = 256;
};

struct EvalConfig {
    int n_videos = 100;
    int samples_per_video = 5;
    double temperature = 1.0;
    int max_len = 16;
    int agreement_pairs = 500;
    double agreement_margin = 0.2;
    double reference_threshold = 0.5;  // true_engagement cut for reference comments
};

struct IngestConfig {
    std::filesystem::path videos;
    std::filesystem::path comments;
};

struct RunConfig {
    SyntheticConfig synth;
    std::optional<IngestConfig> ingest;  // replaces the synth stage when set
    PairsStageConfig pairs;
    UniquenessStageConfig uniqueness;
    ModelConfig model;
    MleConfig mle;
    RewardTrainConfig reward;
    PpoConfig ppo;
    EvalConfig eval;
    int n_probe = 256;  // reward-normalization probe samples
    std::uint64_t seed = 1234;
    std::filesystem::path out = "run";

    static RunConfig defaults();
    static RunConfig smoke_preset();
    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_json_file(const std::filesystem::path& path);
    std::string to_json_text() const;

    // Fans the global seed out into every stage seed and cross-checks
    // the synth and model feature shapes.
    void finalize();
};

// Exclusive ownership of an output directory for the duration of a run.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& out_dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

// Individual stages; each reads its inputs from and writes its outputs
// under cfg.out. Loggers get one line per stage event.
using StageLogger = std::function<void(const std::string&)>;

void run_synth_stage(const RunConfig& cfg);
void run_ingest_stage(const RunConfig& cfg);
void run_pairs_stage(const RunConfig& cfg);
void run_uniqueness_stage(const RunConfig& cfg);
void run_train_gen_stage(const RunConfig& cfg);
void run_train_reward_stage(const RunConfig& cfg);
void run_normalize_stage(const RunConfig& cfg);
void run_train_rl_stage(const RunConfig& cfg);
void run_eval_stage(const RunConfig& cfg);
void run_agreement_stage(const RunConfig& cfg);

void run_bias_report(const std::filesystem::path& corpus_dir,
                     const std::filesystem::path& out_dir);

void run_generate(const std::filesystem::path& corpus_dir,
                  const std::filesystem::path& checkpoint, const DecodeParams& decode,
                  std::uint64_t seed, const std::filesystem::path& out_path);

// Full pipeline with fingerprint-based stage caching; rerunning a stage
// invalidates everything downstream of it.
void run_pipeline(const RunConfig& cfg, const StageLogger& log = nullptr);

struct CorpusSummary {
    std::size_t n_videos = 0;
    std::size_t n_comments = 0;
    double mean_likes = 0.0;
};
CorpusSummary summarize_corpus(const Corpus& corpus);

}  // namespace engage
