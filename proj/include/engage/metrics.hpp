#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "engage/corpus.hpp"

namespace engage {

// Metric tokenization: lowercase, punctuation stripped, whitespace split.
std::vector<std::string> metric_tokenize(std::string_view text);

using TokenSeq = std::vector<std::string>;

// Corpus-level BLEU in [0,100]: geometric mean of clipped n-gram
// precisions times brevity penalty. Zero precisions for n >= 2 get
// add-one smoothing; n-gram orders with no hypothesis n-grams at all
// are dropped from the mean.
double bleu(const std::vector<TokenSeq>& hypotheses,
            const std::vector<std::vector<TokenSeq>>& references, int max_n = 4);

// ROUGE-L F-measure (beta = 1.2, recall-weighted), best reference per
// hypothesis, corpus mean, in [0,100].
double rouge_l_single(const TokenSeq& hypothesis, const std::vector<TokenSeq>& references);
double rouge_l(const std::vector<TokenSeq>& hypotheses,
               const std::vector<std::vector<TokenSeq>>& references);

// Count of distinct token bigrams over all comments.
std::size_t num_bigrams(const std::vector<TokenSeq>& comments);

// Inverse document frequencies over the evaluation comment pool for the
// CIDEr kernel inside self-CIDEr. idf = log((N+1)/df).
class CiderIdf {
public:
    explicit CiderIdf(const std::vector<TokenSeq>& pool, int max_n = 4);
    double idf(const std::string& gram) const;
    int max_n() const { return max_n_; }

private:
    std::unordered_map<std::string, double> idf_;
    double missing_ = 0.0;
    int max_n_;
};

// CIDEr similarity between two token sequences: mean over n of the
// cosine between tf-idf n-gram vectors.
double cider_similarity(const TokenSeq& a, const TokenSeq& b, const CiderIdf& idf);

// Diversity of one video's generated comments from the eigenvalue
// spectrum of the pairwise CIDEr kernel: -log(lambda_max/trace)/log(n),
// scaled to [0,100]. Needs >= 2 comments, otherwise nullopt.
std::optional<double> self_cider(const std::vector<TokenSeq>& comments, const CiderIdf& idf);

struct AgreementPair {
    std::string video_id;
    std::vector<int> pos_tokens;  // ground-truth preferred side
    std::vector<int> neg_tokens;
};

struct AgreementReport {
    std::size_t n_pairs = 0;
    double agree_fraction = 0.0;
};

// scorer(video_id, tokens) -> scalar; exact ties count 0.5.
AgreementReport agreement(
    const std::function<double(const std::string&, const std::vector<int>&)>& scorer,
    const std::vector<AgreementPair>& pairs);

}  // namespace engage
