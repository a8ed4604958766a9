#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace engage {

struct Video {
    std::string id;
    std::string category;
    std::int64_t publish_time = 0;  // epoch seconds
    std::uint32_t frames = 0;       // T
    std::uint32_t patches = 0;      // L
    std::uint32_t feature_dim = 0;  // d
    // T*L*d float32 values, frame-major, patch-minor:
    // features[(t*L + l)*d + k]
    std::vector<float> features;

    float feature_at(std::uint32_t t, std::uint32_t l, std::uint32_t k) const {
        return features[(static_cast<std::size_t>(t) * patches + l) * feature_dim + k];
    }
    bool operator==(const Video& other) const = default;
};

struct Comment {
    std::string id;
    std::string video_id;
    std::string text;
    std::uint64_t likes = 0;
    std::int64_t publish_time = 0;
    // Planted ground truth, synthetic corpora only. Training code never
    // reads this; evaluation oracles do.
    std::optional<double> true_engagement;

    bool operator==(const Comment& other) const = default;
};

// Immutable after construction; all invariants checked in build().
class Corpus {
public:
    Corpus() = default;
    static Corpus build(std::vector<Video> videos, std::vector<Comment> comments);

    const std::vector<Video>& videos() const { return videos_; }
    const std::vector<Comment>& comments() const { return comments_; }

    bool has_video(const std::string& id) const { return video_index_.count(id) > 0; }
    const Video& video(const std::string& id) const;
    const Comment& comment(const std::string& id) const;

    // Comment indices for one video, ascending by comment id.
    const std::vector<std::size_t>& comments_of(const std::string& video_id) const;

    std::size_t n_videos() const { return videos_.size(); }
    std::size_t n_comments() const { return comments_.size(); }
    bool empty() const { return videos_.empty() && comments_.empty(); }

    // Hash over the canonical serialized form (record text + feature bytes).
    std::string fingerprint() const;

    bool operator==(const Corpus& other) const {
        return videos_ == other.videos_ && comments_ == other.comments_;
    }

private:
    std::vector<Video> videos_;      // sorted by id
    std::vector<Comment> comments_;  // sorted by id
    std::unordered_map<std::string, std::size_t> video_index_;
    std::unordered_map<std::string, std::size_t> comment_index_;
    std::unordered_map<std::string, std::vector<std::size_t>> by_video_;
    std::vector<std::size_t> no_comments_;
};

struct SyntheticConfig {
    int n_videos = 1000;
    int n_categories = 10;
    int comments_per_video_min = 8;
    int comments_per_video_max = 16;
    int vocab_size = 400;       // size of the generated lexicon
    int frames = 4;             // T
    int patches = 4;            // L
    int feature_dim = 24;       // d
    int generic_pool_size = 40;
    double specific_fraction = 0.45;
    double like_rate = 800.0;          // lambda0
    double decay_timescale = 1296000;  // tau0, seconds (15 days)
    double engagement_noise = 0.05;
    double horizon_days = 90.0;  // comment delay drawn uniform over this span
    std::uint64_t seed = 1234;

    void validate() const;
};

// Deterministic function of the config (seed included). Plants a
// temporal like decay: likes ~ Poisson(lambda0 * e * exp(-tau/tau0)).
Corpus generate_synthetic(const SyntheticConfig& config);

Corpus load_corpus(const std::filesystem::path& videos_path,
                   const std::filesystem::path& comments_path);

struct CorpusPaths {
    std::filesystem::path videos;
    std::filesystem::path comments;
    std::vector<std::filesystem::path> feature_files;
};

CorpusPaths write_corpus(const Corpus& corpus, const std::filesystem::path& out_dir);

}  // namespace engage
