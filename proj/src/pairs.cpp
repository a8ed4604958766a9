#include "engage/pairs.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "engage/util.hpp"
#include "json.hpp"

namespace engage {

using json = nlohmann::json;

BiasCurve bias_curve(const Corpus& corpus) {
    if (corpus.n_comments() == 0) {
        throw std::runtime_error("bias_curve: corpus has no comments");
    }
    std::map<std::int64_t, std::pair<double, std::int64_t>> acc;  // day -> (sum, count)
    for (const Comment& c : corpus.comments()) {
        const Video& v = corpus.video(c.video_id);
        std::int64_t day = (c.publish_time - v.publish_time) / 86400;
        auto& slot = acc[day];
        slot.first += static_cast<double>(c.likes);
        slot.second += 1;
    }
    BiasCurve curve;
    for (const auto& [day, slot] : acc) {
        curve.buckets.push_back({day, slot.first / static_cast<double>(slot.second), slot.second});
    }
    return curve;
}

namespace {

PairSet build_pairs_impl(const Corpus& corpus, std::size_t max_pairs_per_video,
                         std::uint64_t rng_seed, bool temporal) {
    if (max_pairs_per_video < 1) {
        throw std::runtime_error("build_pairs: max_pairs_per_video must be >= 1");
    }
    PairSet out;
    out.corpus_fingerprint = corpus.fingerprint();
    for (const Video& v : corpus.videos()) {
        const auto& idx = corpus.comments_of(v.id);
        std::vector<ComparisonPair> video_pairs;
        for (std::size_t a : idx) {
            for (std::size_t b : idx) {
                if (a == b) continue;
                const Comment& pos = corpus.comments()[a];
                const Comment& neg = corpus.comments()[b];
                if (pos.likes <= neg.likes) continue;
                if (temporal && pos.publish_time <= neg.publish_time) continue;
                video_pairs.push_back({v.id, pos.id, neg.id});
            }
        }
        if (video_pairs.size() > max_pairs_per_video) {
            std::mt19937_64 rng(derive_seed(rng_seed, "pairs_" + v.id));
            std::vector<ComparisonPair> sampled;
            std::sample(video_pairs.begin(), video_pairs.end(), std::back_inserter(sampled),
                        max_pairs_per_video, rng);
            video_pairs = std::move(sampled);
        }
        out.pairs.insert(out.pairs.end(), video_pairs.begin(), video_pairs.end());
    }
    return out;
}

}  // namespace

PairSet build_pairs(const Corpus& corpus, std::size_t max_pairs_per_video,
                    std::uint64_t rng_seed) {
    return build_pairs_impl(corpus, max_pairs_per_video, rng_seed, true);
}

PairSet build_biased_pairs(const Corpus& corpus, std::size_t max_pairs_per_video,
                           std::uint64_t rng_seed) {
    return build_pairs_impl(corpus, max_pairs_per_video, rng_seed, false);
}

std::pair<PairSet, PairSet> split_pairs(const PairSet& pair_set, double val_fraction,
                                        std::uint64_t rng_seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
        throw std::runtime_error("split_pairs: val_fraction must lie in (0,1)");
    }
    std::vector<std::string> video_ids;
    for (const auto& p : pair_set.pairs) {
        if (video_ids.empty() || video_ids.back() != p.video_id) video_ids.push_back(p.video_id);
    }
    std::sort(video_ids.begin(), video_ids.end());
    video_ids.erase(std::unique(video_ids.begin(), video_ids.end()), video_ids.end());

    std::mt19937_64 rng(derive_seed(rng_seed, "split"));
    std::vector<std::string> shuffled = video_ids;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(
        std::llround(val_fraction * static_cast<double>(video_ids.size())));
    std::set<std::string> val_videos(shuffled.begin(), shuffled.begin() + std::min(n_val, shuffled.size()));

    PairSet train, val;
    train.corpus_fingerprint = pair_set.corpus_fingerprint;
    val.corpus_fingerprint = pair_set.corpus_fingerprint;
    for (const auto& p : pair_set.pairs) {
        (val_videos.count(p.video_id) ? val : train).pairs.push_back(p);
    }
    if (train.pairs.empty() || val.pairs.empty()) {
        throw std::runtime_error("split_pairs: degenerate split left one side empty");
    }
    return {std::move(train), std::move(val)};
}

void write_pairs(const PairSet& pairs, const std::filesystem::path& jsonl_path) {
    std::string buf;
    for (const auto& p : pairs.pairs) {
        json j;
        j["video_id"] = p.video_id;
        j["pos_id"] = p.pos_id;
        j["neg_id"] = p.neg_id;
        buf += j.dump();
        buf += '\n';
    }
    write_file(jsonl_path, buf);
}

void write_pairs_manifest(const PairsManifest& manifest, const std::filesystem::path& path) {
    json j;
    j["corpus_fingerprint"] = manifest.corpus_fingerprint;
    j["max_pairs_per_video"] = manifest.max_pairs_per_video;
    j["seed"] = manifest.seed;
    j["biased"] = manifest.biased;
    j["n_pairs"] = manifest.n_pairs;
    write_file(path, j.dump(2) + "\n");
}

PairSet load_pairs(const std::filesystem::path& jsonl_path,
                   const std::string& corpus_fingerprint) {
    PairSet out;
    out.corpus_fingerprint = corpus_fingerprint;
    std::vector<std::string> lines = read_lines(jsonl_path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        json j = json::parse(lines[i], nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw std::runtime_error(jsonl_path.string() + ":" + std::to_string(i + 1) +
                                     ": malformed pair record");
        }
        out.pairs.push_back({j.at("video_id").get<std::string>(),
                             j.at("pos_id").get<std::string>(),
                             j.at("neg_id").get<std::string>()});
    }
    return out;
}

void write_bias_curve_csv(const BiasCurve& curve, const std::filesystem::path& path) {
    std::string buf = "day_offset,mean_likes,count\n";
    for (const auto& b : curve.buckets) {
        buf += std::to_string(b.day_offset);
        buf += ',';
        buf += format_double(b.mean_likes);
        buf += ',';
        buf += std::to_string(b.count);
        buf += '\n';
    }
    write_file(path, buf);
}

void write_bias_curve_svg(const BiasCurve& curve, const std::filesystem::path& path) {
    const double w = 640, h = 400, ml = 60, mr = 20, mt = 20, mb = 40;
    double max_day = 1, max_likes = 1;
    for (const auto& b : curve.buckets) {
        max_day = std::max(max_day, static_cast<double>(b.day_offset));
        max_likes = std::max(max_likes, b.mean_likes);
    }
    auto px = [&](double day) { return ml + (w - ml - mr) * day / max_day; };
    auto py = [&](double likes) { return h - mb - (h - mt - mb) * likes / max_likes; };

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\">\n";
    svg += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
    svg += "<line x1=\"60\" y1=\"360\" x2=\"620\" y2=\"360\" stroke=\"black\"/>\n";
    svg += "<line x1=\"60\" y1=\"20\" x2=\"60\" y2=\"360\" stroke=\"black\"/>\n";
    svg += "<text x=\"300\" y=\"392\" font-size=\"13\">days since video publish</text>\n";
    svg += "<text x=\"14\" y=\"200\" font-size=\"13\" transform=\"rotate(-90 14 200)\">mean likes</text>\n";
    if (!curve.buckets.empty()) {
        svg += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
        for (const auto& b : curve.buckets) {
            svg += format_double(px(static_cast<double>(b.day_offset)));
            svg += ',';
            svg += format_double(py(b.mean_likes));
            svg += ' ';
        }
        svg += "\"/>\n";
    }
    svg += "</svg>\n";
    write_file(path, svg);
}

}  // namespace engage
