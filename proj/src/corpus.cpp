#include "engage/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "engage/util.hpp"
#include "json.hpp"

namespace engage {

using json = nlohmann::json;

namespace {

constexpr std::uint32_t kFeatureMagic = 0x56494330u;

void append_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string feature_file_name(const std::string& video_id) {
    return "features_" + video_id + ".bin";
}

std::string encode_features(const Video& v) {
    std::string out;
    out.reserve(16 + v.features.size() * 4);
    append_u32_le(out, kFeatureMagic);
    append_u32_le(out, v.frames);
    append_u32_le(out, v.patches);
    append_u32_le(out, v.feature_dim);
    for (float f : v.features) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        append_u32_le(out, bits);
    }
    return out;
}

void decode_features(const std::string& bytes, Video& v) {
    if (bytes.size() < 16) {
        throw std::runtime_error("feature file too short for video " + v.id);
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (read_u32_le(p) != kFeatureMagic) {
        throw std::runtime_error("bad feature file magic for video " + v.id);
    }
    v.frames = read_u32_le(p + 4);
    v.patches = read_u32_le(p + 8);
    v.feature_dim = read_u32_le(p + 12);
    std::size_t n = static_cast<std::size_t>(v.frames) * v.patches * v.feature_dim;
    if (bytes.size() != 16 + n * 4) {
        throw std::runtime_error("feature file size mismatch for video " + v.id);
    }
    v.features.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = read_u32_le(p + 16 + i * 4);
        float f;
        std::memcpy(&f, &bits, 4);
        v.features[i] = f;
    }
}

json video_record(const Video& v) {
    json j;
    j["id"] = v.id;
    j["category"] = v.category;
    j["publish_time"] = v.publish_time;
    j["features_ref"] = feature_file_name(v.id);
    return j;
}

json comment_record(const Comment& c) {
    json j;
    j["id"] = c.id;
    j["video_id"] = c.video_id;
    j["text"] = c.text;
    j["likes"] = c.likes;
    j["publish_time"] = c.publish_time;
    if (c.true_engagement) j["true_engagement"] = *c.true_engagement;
    return j;
}

json parse_line(const std::string& line, const std::string& file, std::size_t line_no) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw std::runtime_error(file + ":" + std::to_string(line_no) + ": malformed record");
    }
    return j;
}

[[noreturn]] void record_error(const std::string& file, std::size_t line_no,
                               const std::string& what) {
    throw std::runtime_error(file + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace

Corpus Corpus::build(std::vector<Video> videos, std::vector<Comment> comments) {
    Corpus c;
    std::sort(videos.begin(), videos.end(),
              [](const Video& a, const Video& b) { return a.id < b.id; });
    std::sort(comments.begin(), comments.end(),
              [](const Comment& a, const Comment& b) { return a.id < b.id; });
    c.videos_ = std::move(videos);
    c.comments_ = std::move(comments);

    for (std::size_t i = 0; i < c.videos_.size(); ++i) {
        const Video& v = c.videos_[i];
        if (v.id.empty()) throw std::runtime_error("corpus: video with empty id");
        if (v.frames < 1 || v.patches < 1 || v.feature_dim < 1) {
            throw std::runtime_error("corpus: video " + v.id + " has empty feature shape");
        }
        std::size_t expect = static_cast<std::size_t>(v.frames) * v.patches * v.feature_dim;
        if (v.features.size() != expect) {
            throw std::runtime_error("corpus: video " + v.id + " feature size mismatch");
        }
        for (float f : v.features) {
            if (!std::isfinite(f)) {
                throw std::runtime_error("corpus: video " + v.id + " has non-finite feature");
            }
        }
        if (!c.video_index_.emplace(v.id, i).second) {
            throw std::runtime_error("corpus: duplicate video id " + v.id);
        }
    }
    for (std::size_t i = 0; i < c.comments_.size(); ++i) {
        const Comment& cm = c.comments_[i];
        if (cm.id.empty()) throw std::runtime_error("corpus: comment with empty id");
        auto it = c.video_index_.find(cm.video_id);
        if (it == c.video_index_.end()) {
            throw std::runtime_error("corpus: comment " + cm.id + " references unknown video " +
                                     cm.video_id);
        }
        if (cm.publish_time < c.videos_[it->second].publish_time) {
            throw std::runtime_error("corpus: comment " + cm.id + " is older than its video");
        }
        if (cm.true_engagement && (!std::isfinite(*cm.true_engagement) ||
                                   *cm.true_engagement < 0.0 || *cm.true_engagement > 1.0)) {
            throw std::runtime_error("corpus: comment " + cm.id +
                                     " has true_engagement outside [0,1]");
        }
        if (!c.comment_index_.emplace(cm.id, i).second) {
            throw std::runtime_error("corpus: duplicate comment id " + cm.id);
        }
        c.by_video_[cm.video_id].push_back(i);
    }
    return c;
}

const Video& Corpus::video(const std::string& id) const {
    auto it = video_index_.find(id);
    if (it == video_index_.end()) throw std::runtime_error("corpus: unknown video " + id);
    return videos_[it->second];
}

const Comment& Corpus::comment(const std::string& id) const {
    auto it = comment_index_.find(id);
    if (it == comment_index_.end()) throw std::runtime_error("corpus: unknown comment " + id);
    return comments_[it->second];
}

const std::vector<std::size_t>& Corpus::comments_of(const std::string& video_id) const {
    auto it = by_video_.find(video_id);
    if (it == by_video_.end()) return no_comments_;
    return it->second;
}

std::string Corpus::fingerprint() const {
    std::uint64_t h = kFnvOffset;
    for (const Video& v : videos_) {
        h = fnv1a64(video_record(v).dump(), h);
        h = fnv1a64(encode_features(v), h);
    }
    for (const Comment& c : comments_) {
        h = fnv1a64(comment_record(c).dump(), h);
    }
    return to_hex(h);
}

void SyntheticConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw std::runtime_error(std::string("synthetic config: ") + what);
    };
    require(n_videos >= 0, "n_videos must be >= 0");
    require(n_categories > 0, "n_categories must be positive");
    require(comments_per_video_min > 0, "comments_per_video range must be positive");
    require(comments_per_video_max >= comments_per_video_min,
            "comments_per_video range inverted");
    require(vocab_size > 60, "vocab_size too small for the lexicon split");
    require(frames > 0 && patches > 0 && feature_dim > 0, "feature shape must be positive");
    require(generic_pool_size > 0, "generic_pool_size must be positive");
    require(specific_fraction >= 0.0 && specific_fraction <= 1.0,
            "specific_fraction must lie in [0,1]");
    require(like_rate > 0.0, "like_rate must be positive");
    require(decay_timescale > 0.0, "decay_timescale must be positive");
    require(engagement_noise >= 0.0, "engagement_noise must be non-negative");
    require(horizon_days > 0.0, "horizon_days must be positive");
}

namespace {

// Deterministic pseudo-word lexicon: 2-3 consonant-vowel syllables.
std::vector<std::string> make_lexicon(int n, std::mt19937_64& rng) {
    static const char* consonants[] = {"b", "d", "f", "g", "k", "l", "m",
                                       "n", "p", "r", "s", "t", "v", "z"};
    static const char* vowels[] = {"a", "e", "i", "o", "u"};
    std::set<std::string> seen;
    std::vector<std::string> words;
    while (static_cast<int>(words.size()) < n) {
        int syllables = 2 + static_cast<int>(rng() % 2);
        std::string w;
        for (int s = 0; s < syllables; ++s) {
            w += consonants[rng() % 14];
            w += vowels[rng() % 5];
        }
        if (seen.insert(w).second) words.push_back(w);
    }
    return words;
}

std::string pad_number(std::uint64_t v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

// Fixed unit direction in feature space for one lexicon word.
std::vector<double> word_direction(std::uint64_t corpus_seed, int word_index, int dim) {
    std::mt19937_64 rng(derive_seed(corpus_seed, "word_dir_" + std::to_string(word_index)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> dir(dim);
    double norm2 = 0.0;
    for (double& x : dir) {
        x = gauss(rng);
        norm2 += x * x;
    }
    double inv = 1.0 / std::sqrt(std::max(norm2, 1e-12));
    for (double& x : dir) x *= inv;
    return dir;
}

}  // namespace

Corpus generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();

    std::mt19937_64 lex_rng(derive_seed(cfg.seed, "lexicon"));
    std::vector<std::string> lexicon = make_lexicon(cfg.vocab_size, lex_rng);
    // Lexicon regions: [0,40) generic phrase vocabulary, [40,60) filler
    // words for specific templates, [60,end) video-specific content words.
    const int generic_hi = 40;
    const int filler_lo = 40, filler_hi = 60;
    const int content_lo = 60;

    // Shared generic phrases with a per-phrase base engagement in [0.1, 0.3].
    std::mt19937_64 pool_rng(derive_seed(cfg.seed, "generic_pool"));
    std::vector<std::pair<std::string, double>> generic_pool;
    for (int i = 0; i < cfg.generic_pool_size; ++i) {
        int len = 2 + static_cast<int>(pool_rng() % 3);
        std::string phrase;
        for (int w = 0; w < len; ++w) {
            if (w) phrase += ' ';
            phrase += lexicon[pool_rng() % generic_hi];
        }
        double base = 0.1 + 0.2 * uniform01(pool_rng);
        generic_pool.emplace_back(phrase, base);
    }

    // Category prototype directions.
    std::mt19937_64 cat_rng(derive_seed(cfg.seed, "categories"));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::vector<double>> category_proto(cfg.n_categories);
    for (auto& proto : category_proto) {
        proto.resize(cfg.feature_dim);
        double norm2 = 0.0;
        for (double& x : proto) {
            x = gauss(cat_rng);
            norm2 += x * x;
        }
        double inv = 1.0 / std::sqrt(std::max(norm2, 1e-12));
        for (double& x : proto) x *= inv;
    }

    const double horizon_s = cfg.horizon_days * 86400.0;
    const double proto_scale = 1.0;
    const double salient_scale = 1.5;
    const double feature_noise = 0.3;
    const std::int64_t epoch0 = 1700000000;  // video publish times spread after this

    std::vector<Video> videos;
    std::vector<Comment> comments;
    videos.reserve(cfg.n_videos);

    for (int vi = 0; vi < cfg.n_videos; ++vi) {
        std::mt19937_64 rng(derive_seed(cfg.seed, "video_" + std::to_string(vi)));
        Video v;
        v.id = "v" + pad_number(vi, 6);
        int cat = static_cast<int>(rng() % cfg.n_categories);
        v.category = "cat" + pad_number(cat, 2);
        v.publish_time = epoch0 + static_cast<std::int64_t>(uniform01(rng) * 365.0 * 86400.0);
        v.frames = static_cast<std::uint32_t>(cfg.frames);
        v.patches = static_cast<std::uint32_t>(cfg.patches);
        v.feature_dim = static_cast<std::uint32_t>(cfg.feature_dim);

        // Three salient content words define the video's salient direction.
        std::vector<int> salient_words;
        while (salient_words.size() < 3) {
            int w = content_lo + static_cast<int>(rng() % (cfg.vocab_size - content_lo));
            if (std::find(salient_words.begin(), salient_words.end(), w) == salient_words.end()) {
                salient_words.push_back(w);
            }
        }
        std::vector<double> salient_dir(cfg.feature_dim, 0.0);
        for (int w : salient_words) {
            auto dir = word_direction(cfg.seed, w, cfg.feature_dim);
            for (int k = 0; k < cfg.feature_dim; ++k) salient_dir[k] += dir[k];
        }
        double norm2 = 0.0;
        for (double x : salient_dir) norm2 += x * x;
        double inv = 1.0 / std::sqrt(std::max(norm2, 1e-12));
        for (double& x : salient_dir) x *= inv;

        v.features.resize(static_cast<std::size_t>(cfg.frames) * cfg.patches * cfg.feature_dim);
        for (int t = 0; t < cfg.frames; ++t) {
            for (int l = 0; l < cfg.patches; ++l) {
                // Roughly a third of the patches carry the salient signal.
                double w_sal = (rng() % 3 == 0) ? 1.0 : 0.2;
                for (int k = 0; k < cfg.feature_dim; ++k) {
                    double val = proto_scale * category_proto[cat][k] +
                                 salient_scale * w_sal * salient_dir[k] +
                                 feature_noise * gauss(rng);
                    v.features[(static_cast<std::size_t>(t) * cfg.patches + l) * cfg.feature_dim +
                               k] = static_cast<float>(val);
                }
            }
        }

        int n_comments = cfg.comments_per_video_min +
                         static_cast<int>(rng() % (cfg.comments_per_video_max -
                                                   cfg.comments_per_video_min + 1));
        for (int ci = 0; ci < n_comments; ++ci) {
            Comment c;
            c.id = "c" + pad_number(static_cast<std::uint64_t>(vi) * 1000 + ci, 9);
            c.video_id = v.id;

            double base;
            bool specific = uniform01(rng) < cfg.specific_fraction;
            if (specific) {
                // Reference 1-3 of the video's salient words; more mentions
                // plant higher engagement, so engagement is text-predictable.
                int n_use = 1 + static_cast<int>(rng() % 3);
                std::string text;
                text += lexicon[filler_lo + rng() % (filler_hi - filler_lo)];
                for (int u = 0; u < n_use; ++u) {
                    text += ' ';
                    text += lexicon[salient_words[u]];
                }
                text += ' ';
                text += lexicon[filler_lo + rng() % (filler_hi - filler_lo)];
                c.text = text;
                base = 0.55 + 0.12 * n_use;
            } else {
                const auto& entry = generic_pool[rng() % generic_pool.size()];
                c.text = entry.first;
                base = entry.second;
            }
            double e = base + cfg.engagement_noise * gauss(rng);
            e = std::min(1.0, std::max(0.0, e));
            c.true_engagement = e;

            double tau = uniform01(rng) * horizon_s;
            c.publish_time = v.publish_time + static_cast<std::int64_t>(tau);
            double rate = cfg.like_rate * e * std::exp(-tau / cfg.decay_timescale);
            c.likes = std::poisson_distribution<std::uint64_t>(rate)(rng);
            comments.push_back(std::move(c));
        }
        videos.push_back(std::move(v));
    }
    return Corpus::build(std::move(videos), std::move(comments));
}

Corpus load_corpus(const std::filesystem::path& videos_path,
                   const std::filesystem::path& comments_path) {
    std::vector<Video> videos;
    std::vector<Comment> comments;
    const auto dir = videos_path.parent_path();

    std::vector<std::string> vlines = read_lines(videos_path);
    for (std::size_t i = 0; i < vlines.size(); ++i) {
        if (vlines[i].empty()) continue;
        json j = parse_line(vlines[i], videos_path.string(), i + 1);
        Video v;
        try {
            v.id = j.at("id").get<std::string>();
            v.category = j.at("category").get<std::string>();
            v.publish_time = j.at("publish_time").get<std::int64_t>();
            std::string ref = j.at("features_ref").get<std::string>();
            decode_features(read_file(dir / ref), v);
        } catch (const json::exception& e) {
            record_error(videos_path.string(), i + 1, e.what());
        }
        videos.push_back(std::move(v));
    }

    std::vector<std::string> clines = read_lines(comments_path);
    for (std::size_t i = 0; i < clines.size(); ++i) {
        if (clines[i].empty()) continue;
        json j = parse_line(clines[i], comments_path.string(), i + 1);
        Comment c;
        try {
            c.id = j.at("id").get<std::string>();
            c.video_id = j.at("video_id").get<std::string>();
            c.text = j.at("text").get<std::string>();
            if (j.at("likes").is_number_integer() && j.at("likes").get<std::int64_t>() < 0) {
                record_error(comments_path.string(), i + 1,
                             "negative likes for comment " + c.id);
            }
            c.likes = j.at("likes").get<std::uint64_t>();
            c.publish_time = j.at("publish_time").get<std::int64_t>();
            if (j.contains("true_engagement")) {
                c.true_engagement = j.at("true_engagement").get<double>();
            }
        } catch (const json::exception& e) {
            record_error(comments_path.string(), i + 1, e.what());
        }
        comments.push_back(std::move(c));
    }
    return Corpus::build(std::move(videos), std::move(comments));
}

CorpusPaths write_corpus(const Corpus& corpus, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw std::runtime_error("cannot create output directory " + out_dir.string() + ": " +
                                 ec.message());
    }
    CorpusPaths paths;
    paths.videos = out_dir / "videos.jsonl";
    paths.comments = out_dir / "comments.jsonl";

    std::string vbuf;
    for (const Video& v : corpus.videos()) {
        vbuf += video_record(v).dump();
        vbuf += '\n';
        auto fpath = out_dir / feature_file_name(v.id);
        write_file(fpath, encode_features(v));
        paths.feature_files.push_back(fpath);
    }
    write_file(paths.videos, vbuf);

    std::string cbuf;
    for (const Comment& c : corpus.comments()) {
        cbuf += comment_record(c).dump();
        cbuf += '\n';
    }
    write_file(paths.comments, cbuf);
    return paths;
}

}  // namespace engage
