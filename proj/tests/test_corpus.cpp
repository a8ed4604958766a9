#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "engage/corpus.hpp"
#include "engage/util.hpp"

using namespace engage;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("engage_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Video tiny_video(const std::string& id, std::int64_t t = 1000) {
    Video v;
    v.id = id;
    v.category = "cat";
    v.publish_time = t;
    v.frames = 1;
    v.patches = 1;
    v.feature_dim = 1;
    v.features = {0.5f};
    return v;
}

Comment tiny_comment(const std::string& id, const std::string& vid, std::uint64_t likes,
                     std::int64_t t, const std::string& text = "hello world") {
    Comment c;
    c.id = id;
    c.video_id = vid;
    c.text = text;
    c.likes = likes;
    c.publish_time = t;
    return c;
}

// Independent Spearman rank correlation with average ranks for ties.
std::vector<double> average_ranks(const std::vector<double>& xs) {
    std::vector<std::size_t> order(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ra = average_ranks(a), rb = average_ranks(b);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) ma += ra[i], mb += rb[i];
    ma /= static_cast<double>(ra.size());
    mb /= static_cast<double>(rb.size());
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    return cov / std::sqrt(va * vb);
}

}  // namespace

TEST_CASE("empty corpus round trip") {
    auto dir = temp_dir("corpus_empty");
    write_file(dir / "videos.jsonl", "");
    write_file(dir / "comments.jsonl", "");
    Corpus c = load_corpus(dir / "videos.jsonl", dir / "comments.jsonl");
    CHECK(c.empty());

    auto out = temp_dir("corpus_empty_out");
    CorpusPaths paths = write_corpus(c, out);
    CHECK(read_file(paths.videos).empty());
    CHECK(read_file(paths.comments).empty());
    CHECK(paths.feature_files.empty());
}

TEST_CASE("negative likes reports the offending line") {
    auto dir = temp_dir("corpus_neg");
    Corpus good = Corpus::build({tiny_video("v1")}, {});
    write_corpus(good, dir);
    write_file(dir / "comments.jsonl",
               R"({"id":"c1","video_id":"v1","text":"x","likes":3,"publish_time":2000})"
               "\n"
               R"({"id":"c2","video_id":"v1","text":"y","likes":-1,"publish_time":2000})"
               "\n");
    CHECK_THROWS_WITH_AS(load_corpus(dir / "videos.jsonl", dir / "comments.jsonl"),
                         doctest::Contains(":2:"), std::runtime_error);
}

TEST_CASE("malformed record reports the line") {
    auto dir = temp_dir("corpus_malformed");
    write_file(dir / "videos.jsonl", "{not json\n");
    write_file(dir / "comments.jsonl", "");
    CHECK_THROWS_WITH_AS(load_corpus(dir / "videos.jsonl", dir / "comments.jsonl"),
                         doctest::Contains(":1:"), std::runtime_error);
}

TEST_CASE("corpus invariant violations") {
    CHECK_THROWS(Corpus::build({tiny_video("v1")},
                               {tiny_comment("c1", "nope", 0, 2000)}));  // dangling video_id
    CHECK_THROWS(Corpus::build({tiny_video("v1", 1000)},
                               {tiny_comment("c1", "v1", 0, 500)}));  // older than video
    CHECK_THROWS(Corpus::build({tiny_video("v1"), tiny_video("v1")}, {}));
    CHECK_THROWS(Corpus::build({tiny_video("v1")}, {tiny_comment("c1", "v1", 0, 2000),
                                                    tiny_comment("c1", "v1", 0, 2000)}));
}

TEST_CASE("write/load round trip is byte-identical and structurally equal") {
    SyntheticConfig cfg;
    cfg.n_videos = 12;
    cfg.vocab_size = 80;
    cfg.seed = 7;
    Corpus c = generate_synthetic(cfg);

    auto dir1 = temp_dir("corpus_rt1");
    write_corpus(c, dir1);
    Corpus c2 = load_corpus(dir1 / "videos.jsonl", dir1 / "comments.jsonl");
    CHECK(c == c2);

    auto dir2 = temp_dir("corpus_rt2");
    write_corpus(c2, dir2);
    CHECK(read_file(dir1 / "videos.jsonl") == read_file(dir2 / "videos.jsonl"));
    CHECK(read_file(dir1 / "comments.jsonl") == read_file(dir2 / "comments.jsonl"));
    for (const Video& v : c.videos()) {
        CHECK(read_file(dir1 / ("features_" + v.id + ".bin")) ==
              read_file(dir2 / ("features_" + v.id + ".bin")));
    }
}

TEST_CASE("one video one comment writes exactly one record per file") {
    Corpus c = Corpus::build({tiny_video("v1")}, {tiny_comment("c1", "v1", 2, 2000)});
    auto dir = temp_dir("corpus_single");
    write_corpus(c, dir);
    CHECK(read_lines(dir / "videos.jsonl").size() == 1);
    CHECK(read_lines(dir / "comments.jsonl").size() == 1);
}

TEST_CASE("synthetic generation basics") {
    SyntheticConfig cfg;
    cfg.n_videos = 0;
    CHECK(generate_synthetic(cfg).empty());

    cfg.n_videos = 8;
    cfg.seed = 99;
    Corpus a = generate_synthetic(cfg);
    Corpus b = generate_synthetic(cfg);
    CHECK(a == b);  // bit-identical rerun
    CHECK(a.n_videos() == 8);

    for (const Comment& cm : a.comments()) {
        const Video& v = a.video(cm.video_id);
        CHECK(cm.publish_time >= v.publish_time);
        CHECK(cm.true_engagement.has_value());
        CHECK(*cm.true_engagement >= 0.0);
        CHECK(*cm.true_engagement <= 1.0);
    }

    cfg.seed = 100;
    Corpus c = generate_synthetic(cfg);
    CHECK_FALSE(a == c);
}

TEST_CASE("decay-corrected likes track planted engagement (Spearman oracle)") {
    SyntheticConfig cfg;
    cfg.n_videos = 600;
    cfg.seed = 11;
    cfg.decay_timescale = 30.0 * 86400.0;  // milder decay keeps late-comment counts informative
    cfg.like_rate = 1000.0;
    cfg.engagement_noise = 0.02;
    Corpus corpus = generate_synthetic(cfg);

    std::vector<double> engagement, corrected;
    for (const Comment& cm : corpus.comments()) {
        const Video& v = corpus.video(cm.video_id);
        double tau = static_cast<double>(cm.publish_time - v.publish_time);
        engagement.push_back(*cm.true_engagement);
        corrected.push_back(static_cast<double>(cm.likes) * std::exp(tau / cfg.decay_timescale));
    }
    double rho = spearman(engagement, corrected);
    CHECK(rho > 0.8);
}

TEST_CASE("planted decay: bucketed mean likes non-increasing within an engagement band") {
    SyntheticConfig cfg;
    cfg.n_videos = 800;
    cfg.seed = 21;
    Corpus corpus = generate_synthetic(cfg);

    const double band_lo = 0.6, band_hi = 0.8;
    const double bucket_s = 15.0 * 86400.0;
    std::map<int, std::pair<double, long>> buckets;
    for (const Comment& cm : corpus.comments()) {
        if (*cm.true_engagement < band_lo || *cm.true_engagement > band_hi) continue;
        const Video& v = corpus.video(cm.video_id);
        int b = static_cast<int>(static_cast<double>(cm.publish_time - v.publish_time) / bucket_s);
        auto& slot = buckets[b];
        slot.first += static_cast<double>(cm.likes);
        slot.second += 1;
    }
    REQUIRE(buckets.size() >= 5);
    double prev = 1e300;
    for (const auto& [b, slot] : buckets) {
        REQUIRE(slot.second > 100);  // enough mass for stable means
        double mean = slot.first / static_cast<double>(slot.second);
        CHECK(mean <= prev);
        prev = mean;
    }
}

TEST_CASE("feature binary layout is frame-major patch-minor") {
    SyntheticConfig cfg;
    cfg.n_videos = 1;
    cfg.frames = 2;
    cfg.patches = 3;
    cfg.feature_dim = 4;
    cfg.vocab_size = 80;
    Corpus c = generate_synthetic(cfg);
    auto dir = temp_dir("corpus_layout");
    write_corpus(c, dir);

    const Video& v = c.videos()[0];
    std::string bytes = read_file(dir / ("features_" + v.id + ".bin"));
    REQUIRE(bytes.size() == 16 + 2 * 3 * 4 * 4);
    auto u32 = [&](std::size_t off) {
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + off;
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    };
    CHECK(u32(0) == 0x56494330u);
    CHECK(u32(4) == 2);
    CHECK(u32(8) == 3);
    CHECK(u32(12) == 4);
    float f;
    std::uint32_t bits = u32(16 + ((1 * 3 + 2) * 4 + 3) * 4);  // t=1, l=2, k=3
    std::memcpy(&f, &bits, 4);
    CHECK(f == v.feature_at(1, 2, 3));
}
