#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "engage/corpus.hpp"

namespace engage {

struct ComparisonPair {
    std::string video_id;
    std::string pos_id;
    std::string neg_id;

    bool operator==(const ComparisonPair&) const = default;
    bool operator<(const ComparisonPair& o) const {
        return std::tie(video_id, pos_id, neg_id) < std::tie(o.video_id, o.pos_id, o.neg_id);
    }
};

struct PairSet {
    std::vector<ComparisonPair> pairs;
    std::string corpus_fingerprint;
};

struct BiasBucket {
    std::int64_t day_offset = 0;
    double mean_likes = 0.0;
    std::int64_t count = 0;
};

struct BiasCurve {
    std::vector<BiasBucket> buckets;  // ascending day_offset, empty buckets omitted
};

// Mean likes per whole day of comment delay. Day bucket is
// floor((comment.publish_time - video.publish_time) / 86400).
BiasCurve bias_curve(const Corpus& corpus);

constexpr std::size_t kUnlimitedPairs = static_cast<std::size_t>(-1);

// Debiased pairs: pos has strictly more likes AND strictly later publish
// time than neg, both on the same video. Videos whose full enumeration
// exceeds the cap contribute a seeded uniform subset.
PairSet build_pairs(const Corpus& corpus, std::size_t max_pairs_per_video,
                    std::uint64_t rng_seed);

// Likes-only pairs (no temporal predicate); the ablation arm.
PairSet build_biased_pairs(const Corpus& corpus, std::size_t max_pairs_per_video,
                           std::uint64_t rng_seed);

// Video-level split: all pairs of one video land on the same side.
std::pair<PairSet, PairSet> split_pairs(const PairSet& pair_set, double val_fraction,
                                        std::uint64_t rng_seed);

struct PairsManifest {
    std::string corpus_fingerprint;
    std::size_t max_pairs_per_video = 0;
    std::uint64_t seed = 0;
    bool biased = false;
    std::size_t n_pairs = 0;
};

void write_pairs(const PairSet& pairs, const std::filesystem::path& jsonl_path);
void write_pairs_manifest(const PairsManifest& manifest, const std::filesystem::path& path);
PairSet load_pairs(const std::filesystem::path& jsonl_path,
                   const std::string& corpus_fingerprint);

void write_bias_curve_csv(const BiasCurve& curve, const std::filesystem::path& path);
void write_bias_curve_svg(const BiasCurve& curve, const std::filesystem::path& path);

}  // namespace engage
