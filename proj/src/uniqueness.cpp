#include "engage/uniqueness.hpp"

#include <algorithm>
#include <cmath>

#include "engage/util.hpp"
#include "json.hpp"

namespace engage {

using json = nlohmann::json;

namespace {

std::vector<std::string> whitespace_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur += ch;
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

}  // namespace

Eigen::VectorXd HashedBowEmbedder::embed_text(std::string_view text) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(text_dim_);
    auto add = [&](const std::string& gram) {
        std::uint64_t h = fnv1a64(gram);
        int bucket = static_cast<int>(h % static_cast<std::uint64_t>(text_dim_));
        double sign = (h >> 63) ? -1.0 : 1.0;
        v[bucket] += sign;
    };
    std::vector<std::string> toks = whitespace_tokens(text);
    for (std::size_t i = 0; i < toks.size(); ++i) {
        add(toks[i]);
        if (i + 1 < toks.size()) add(toks[i] + " " + toks[i + 1]);
    }
    double norm = v.norm();
    if (norm > 0.0) v /= norm;
    return v;
}

Eigen::VectorXd HashedBowEmbedder::embed_video(const Video& video) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(video.feature_dim);
    std::size_t n = static_cast<std::size_t>(video.frames) * video.patches;
    for (std::size_t p = 0; p < n; ++p) {
        for (std::uint32_t k = 0; k < video.feature_dim; ++k) {
            v[k] += static_cast<double>(video.features[p * video.feature_dim + k]);
        }
    }
    v /= static_cast<double>(n);
    double norm = v.norm();
    if (norm > 0.0) v /= norm;
    return v;
}

void SamplingSchedule::validate() const {
    if (epochs_per_level < 1 || n_levels < 1) {
        throw std::runtime_error("sampling schedule: epochs_per_level and n_levels must be >= 1");
    }
    for (int level = 0; level < n_levels; ++level) {
        double a = a0 + step * level;
        if (a < 0.0 || a > 2.0) {
            throw std::runtime_error("sampling schedule: realized a leaves [0,2] at level " +
                                     std::to_string(level));
        }
    }
}

std::vector<std::string> video_neighbors(const Corpus& corpus, const std::string& video_id,
                                         int k, const EmbeddingProvider& provider) {
    if (k < 0) throw std::runtime_error("video_neighbors: k must be >= 0");
    const Video& query = corpus.video(video_id);
    if (k == 0) return {};
    Eigen::VectorXd q = provider.embed_video(query);

    std::vector<std::pair<double, const std::string*>> scored;
    scored.reserve(corpus.n_videos());
    for (const Video& v : corpus.videos()) {
        if (v.id == video_id) continue;
        double sim = q.dot(provider.embed_video(v));
        scored.emplace_back(sim, &v.id);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return *a.second < *b.second;
    });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < scored.size() && i < static_cast<std::size_t>(k); ++i) {
        out.push_back(*scored[i].second);
    }
    return out;
}

std::vector<UniquenessRecord> uniqueness_scores(const Corpus& corpus,
                                                const std::string& video_id, int k, int m,
                                                const EmbeddingProvider& provider) {
    const auto& own = corpus.comments_of(video_id);
    if (own.empty()) {
        throw std::runtime_error("uniqueness_scores: video " + video_id + " has no comments");
    }
    if (m < 1) throw std::runtime_error("uniqueness_scores: m must be >= 1");

    std::vector<std::size_t> pool = own;
    for (const std::string& nb : video_neighbors(corpus, video_id, k, provider)) {
        const auto& idx = corpus.comments_of(nb);
        pool.insert(pool.end(), idx.begin(), idx.end());
    }

    std::vector<Eigen::VectorXd> pool_emb;
    pool_emb.reserve(pool.size());
    for (std::size_t i : pool) {
        pool_emb.push_back(provider.embed_text(corpus.comments()[i].text));
    }

    std::vector<UniquenessRecord> out;
    out.reserve(own.size());
    for (std::size_t qi : own) {
        const Comment& c = corpus.comments()[qi];
        Eigen::VectorXd q = provider.embed_text(c.text);
        std::vector<double> sims;
        sims.reserve(pool.size());
        for (std::size_t p = 0; p < pool.size(); ++p) {
            if (pool[p] == qi) continue;  // self excluded
            sims.push_back(q.dot(pool_emb[p]));
        }
        UniquenessRecord rec;
        rec.comment_id = c.id;
        if (sims.empty()) {
            rec.mean_similarity = 0.0;  // empty pool: maximally unique by convention
        } else {
            std::size_t take = std::min<std::size_t>(sims.size(), static_cast<std::size_t>(m));
            std::partial_sort(sims.begin(), sims.begin() + take, sims.end(),
                              std::greater<double>());
            double sum = 0.0;
            for (std::size_t i = 0; i < take; ++i) sum += sims[i];
            rec.mean_similarity = sum / static_cast<double>(take);
        }
        rec.uniqueness = 1.0 - rec.mean_similarity;
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<UniquenessRecord> uniqueness_all(const Corpus& corpus, int k, int m,
                                             const EmbeddingProvider& provider) {
    std::vector<UniquenessRecord> all;
    for (const Video& v : corpus.videos()) {
        if (corpus.comments_of(v.id).empty()) continue;
        auto recs = uniqueness_scores(corpus, v.id, k, m, provider);
        all.insert(all.end(), recs.begin(), recs.end());
    }
    std::sort(all.begin(), all.end(), [](const UniquenessRecord& a, const UniquenessRecord& b) {
        return a.comment_id < b.comment_id;
    });
    return all;
}

double sample_position(double a, double u) {
    if (a < 0.0 || a > 2.0) {
        throw std::runtime_error("sample_position: a must lie in [0,2]");
    }
    if (a == 1.0) return u;
    // Inverse of F(x) = a*x + (1-a)*x^2 on [0,1].
    double disc = a * a + 4.0 * (1.0 - a) * u;
    double x = (-a + std::sqrt(std::max(disc, 0.0))) / (2.0 * (1.0 - a));
    return std::min(std::max(x, 0.0), 1.0);
}

std::size_t sample_index(std::size_t J, double a, double u) {
    if (J < 1) throw std::runtime_error("sample_index: J must be >= 1");
    double x = sample_position(a, u);
    auto idx = static_cast<std::size_t>(x * static_cast<double>(J));
    return std::min(idx, J - 1);
}

double schedule_a(int epoch, const SamplingSchedule& schedule) {
    if (epoch < 0) throw std::runtime_error("schedule_a: epoch must be >= 0");
    schedule.validate();
    int level = std::min(epoch / schedule.epochs_per_level, schedule.n_levels - 1);
    return schedule.a0 + schedule.step * static_cast<double>(level);
}

const Comment& sample_training_comment(std::vector<ScoredComment> comments, int epoch,
                                       const SamplingSchedule& schedule, std::mt19937_64& rng) {
    if (comments.empty()) {
        throw std::runtime_error("sample_training_comment: no comments");
    }
    std::sort(comments.begin(), comments.end(), [](const ScoredComment& x, const ScoredComment& y) {
        if (x.uniqueness != y.uniqueness) return x.uniqueness > y.uniqueness;
        return x.comment->id < y.comment->id;
    });
    double a = schedule_a(epoch, schedule);
    std::size_t idx = sample_index(comments.size(), a, uniform01(rng));
    return *comments[idx].comment;
}

void write_uniqueness(const std::vector<UniquenessRecord>& records,
                      const std::filesystem::path& path) {
    std::string buf;
    for (const auto& r : records) {
        json j;
        j["comment_id"] = r.comment_id;
        j["mean_similarity"] = r.mean_similarity;
        j["uniqueness"] = r.uniqueness;
        buf += j.dump();
        buf += '\n';
    }
    write_file(path, buf);
}

std::vector<UniquenessRecord> load_uniqueness(const std::filesystem::path& path) {
    std::vector<UniquenessRecord> out;
    std::vector<std::string> lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        json j = json::parse(lines[i], nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw std::runtime_error(path.string() + ":" + std::to_string(i + 1) +
                                     ": malformed uniqueness record");
        }
        UniquenessRecord r;
        r.comment_id = j.at("comment_id").get<std::string>();
        r.mean_similarity = j.at("mean_similarity").get<double>();
        r.uniqueness = j.at("uniqueness").get<double>();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace engage
