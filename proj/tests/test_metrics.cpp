#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "engage/metrics.hpp"

using namespace engage;

namespace {

TokenSeq toks(const std::string& text) { return metric_tokenize(text); }

}  // namespace

TEST_CASE("metric tokenization: lowercase, punctuation stripped, whitespace split") {
    CHECK(toks("Hello, World!") == TokenSeq{"hello", "world"});
    CHECK(toks("  a\tb\nc ") == TokenSeq{"a", "b", "c"});
    CHECK(toks("...") == TokenSeq{});
    CHECK(toks("") == TokenSeq{});
    CHECK(toks("don't") == TokenSeq{"dont"});
}

TEST_CASE("bleu: exact match, disjoint, hand-counted example") {
    CHECK(bleu({toks("the cat sat")}, {{toks("the cat sat")}}) ==
          doctest::Approx(100.0).epsilon(1e-9));
    CHECK(bleu({toks("aa bb cc")}, {{toks("xx yy zz")}}) == 0.0);

    // p1 = 3/3, p2 = 2/2, p3 = 1/1, BP = exp(1 - 4/3)
    double got = bleu({toks("the cat sat")}, {{toks("the cat sat down")}}, 3);
    double want = 100.0 * std::exp(1.0 - 4.0 / 3.0);
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
    CHECK(got == doctest::Approx(71.653131).epsilon(1e-5));

    // clipping: "a a" against reference "a" gives p1 = 1/2
    CHECK(bleu({toks("a a")}, {{toks("a")}}, 1) == doctest::Approx(50.0).epsilon(1e-9));

    // corpus ordering invariance
    std::vector<TokenSeq> hyps = {toks("the cat"), toks("a dog ran"), toks("birds fly")};
    std::vector<std::vector<TokenSeq>> refs = {{toks("the cat sat")},
                                               {toks("a dog ran fast")},
                                               {toks("birds fly high")}};
    double base = bleu(hyps, refs);
    std::reverse(hyps.begin(), hyps.end());
    std::reverse(refs.begin(), refs.end());
    CHECK(bleu(hyps, refs) == doctest::Approx(base).epsilon(1e-12));

    CHECK_THROWS(bleu({}, {}));
}

TEST_CASE("rouge_l: exact match, disjoint, LCS oracle example") {
    CHECK(rouge_l({toks("same words here")}, {{toks("same words here")}}) ==
          doctest::Approx(100.0).epsilon(1e-9));
    CHECK(rouge_l({toks("aa bb")}, {{toks("cc dd")}}) == 0.0);

    // hyp "a b c d" vs ref "a c d": LCS 3, P = 3/4, R = 1, beta = 1.2
    double p = 0.75, r = 1.0, b2 = 1.44;
    double want = 100.0 * (1.0 + b2) * p * r / (r + b2 * p);
    double got = rouge_l({toks("a b c d")}, {{toks("a c d")}});
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
    CHECK(got == doctest::Approx(87.980769).epsilon(1e-5));
    CHECK(got >= 75.0);
    CHECK(got <= 100.0);

    // best-over-references
    CHECK(rouge_l({toks("a b c")}, {{toks("x y z"), toks("a b c")}}) ==
          doctest::Approx(100.0).epsilon(1e-9));
}

TEST_CASE("num_bigrams counts distinct bigrams over the whole set") {
    CHECK(num_bigrams({toks("a b c")}) == 2);
    CHECK(num_bigrams({toks("a b"), toks("a b"), toks("a b")}) == 1);
    CHECK(num_bigrams({}) == 0);
    CHECK(num_bigrams({toks("a")}) == 0);

    // monotone non-decreasing under adding comments
    std::vector<TokenSeq> acc;
    std::size_t prev = 0;
    for (const char* t : {"a b c", "c b a", "a b", "d e f g"}) {
        acc.push_back(toks(t));
        std::size_t cur = num_bigrams(acc);
        CHECK(cur >= prev);
        prev = cur;
    }
}

TEST_CASE("self_cider: rank-1 kernel gives 0, orthogonal comments give 100") {
    std::vector<TokenSeq> same = {toks("wow nice video"), toks("wow nice video"),
                                  toks("wow nice video")};
    CiderIdf idf_same(same);
    auto d0 = self_cider(same, idf_same);
    REQUIRE(d0.has_value());
    CHECK(*d0 == doctest::Approx(0.0).epsilon(1e-9));

    std::vector<TokenSeq> disjoint = {toks("aa bb cc dd"), toks("ee ff gg hh"),
                                      toks("ii jj kk ll")};
    CiderIdf idf_disj(disjoint);
    auto d1 = self_cider(disjoint, idf_disj);
    REQUIRE(d1.has_value());
    CHECK(*d1 == doctest::Approx(100.0).epsilon(1e-9));

    // intermediate mixtures land strictly between
    std::vector<TokenSeq> mixed = {toks("aa bb cc"), toks("aa bb dd"), toks("zz yy xx")};
    CiderIdf idf_mixed(mixed);
    auto dm = self_cider(mixed, idf_mixed);
    REQUIRE(dm.has_value());
    CHECK(*dm > 0.0);
    CHECK(*dm < 100.0);

    CHECK_FALSE(self_cider({toks("just one")}, idf_mixed).has_value());
}

TEST_CASE("cider similarity is symmetric and maximal on identity") {
    std::vector<TokenSeq> pool = {toks("aa bb cc dd"), toks("aa bb ee ff"), toks("gg hh ii jj")};
    CiderIdf idf(pool);
    double s01 = cider_similarity(pool[0], pool[1], idf);
    double s10 = cider_similarity(pool[1], pool[0], idf);
    CHECK(s01 == doctest::Approx(s10).epsilon(1e-12));
    CHECK(cider_similarity(pool[0], pool[0], idf) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s01 > cider_similarity(pool[0], pool[2], idf));
}

TEST_CASE("agreement: oracle, ties, chance level, negation symmetry") {
    std::vector<AgreementPair> pairs;
    std::mt19937_64 rng(5);
    for (int i = 0; i < 400; ++i) {
        // pos tokens have a higher checksum than neg by construction
        pairs.push_back({"v" + std::to_string(i), {10 + i, 7}, {i, 3}});
    }

    auto oracle = [](const std::string&, const std::vector<int>& t) {
        double s = 0;
        for (int x : t) s += x;
        return s;
    };
    CHECK(agreement(oracle, pairs).agree_fraction == doctest::Approx(1.0));

    auto constant = [](const std::string&, const std::vector<int>&) { return 3.14; };
    CHECK(agreement(constant, pairs).agree_fraction == doctest::Approx(0.5));

    std::mt19937_64 score_rng(11);
    std::map<std::string, double> memo;
    auto random_scorer = [&](const std::string& vid, const std::vector<int>& t) {
        std::string key = vid + ":" + std::to_string(t.size()) + ":" + std::to_string(t[0]);
        auto [it, fresh] = memo.try_emplace(key, 0.0);
        if (fresh) it->second = std::uniform_real_distribution<double>(0, 1)(score_rng);
        return it->second;
    };
    double frac = agreement(random_scorer, pairs).agree_fraction;
    double sigma = 0.5 / std::sqrt(static_cast<double>(pairs.size()));
    CHECK(std::abs(frac - 0.5) < 3.0 * sigma);

    // scorer negation flips every tie-free comparison
    auto neg_oracle = [&](const std::string& v, const std::vector<int>& t) {
        return -oracle(v, t);
    };
    double a = agreement(oracle, pairs).agree_fraction;
    double b = agreement(neg_oracle, pairs).agree_fraction;
    CHECK(a + b == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS(agreement(oracle, {}));
}
