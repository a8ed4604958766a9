#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "engage/corpus.hpp"

namespace engage {

// Pluggable text/video embedders; outputs are L2-normalized (or zero
// for empty input) and deterministic per input.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual Eigen::VectorXd embed_text(std::string_view text) const = 0;
    virtual Eigen::VectorXd embed_video(const Video& video) const = 0;
};

// Desk-scale default: signed feature hashing of word unigrams+bigrams
// for text; mean patch feature for video.
class HashedBowEmbedder final : public EmbeddingProvider {
public:
    explicit HashedBowEmbedder(int text_dim = 256) : text_dim_(text_dim) {}
    Eigen::VectorXd embed_text(std::string_view text) const override;
    Eigen::VectorXd embed_video(const Video& video) const override;

private:
    int text_dim_;
};

struct UniquenessRecord {
    std::string comment_id;
    double mean_similarity = 0.0;
    double uniqueness = 1.0;  // always 1 - mean_similarity
};

struct SamplingSchedule {
    double a0 = 0.6;
    double step = 0.2;
    int epochs_per_level = 20;
    int n_levels = 5;

    void validate() const;
};

// Top-k most similar videos by cosine of embed_video, query excluded,
// ties broken by ascending video id.
std::vector<std::string> video_neighbors(const Corpus& corpus, const std::string& video_id,
                                         int k, const EmbeddingProvider& provider);

// Uniqueness of each comment of one video: 1 minus the mean cosine
// similarity of its top-m most similar comments among the k neighbor
// videos' comments plus the video's own others (self excluded).
std::vector<UniquenessRecord> uniqueness_scores(const Corpus& corpus,
                                                const std::string& video_id, int k, int m,
                                                const EmbeddingProvider& provider);

// All videos, records ordered by comment id.
std::vector<UniquenessRecord> uniqueness_all(const Corpus& corpus, int k, int m,
                                             const EmbeddingProvider& provider);

// Inverse-CDF draw from the curriculum density P(x) = a + 2(1-a)x on
// [0,1]; u is a uniform variate in [0,1). Returns an index in [0, J-1]
// of the uniqueness-descending order.
std::size_t sample_index(std::size_t J, double a, double u);

// Continuous position draw backing sample_index (exposed for tests).
double sample_position(double a, double u);

double schedule_a(int epoch, const SamplingSchedule& schedule);

struct ScoredComment {
    const Comment* comment = nullptr;
    double uniqueness = 0.0;
};

const Comment& sample_training_comment(std::vector<ScoredComment> comments, int epoch,
                                       const SamplingSchedule& schedule, std::mt19937_64& rng);

void write_uniqueness(const std::vector<UniquenessRecord>& records,
                      const std::filesystem::path& path);
std::vector<UniquenessRecord> load_uniqueness(const std::filesystem::path& path);

}  // namespace engage
