#include "engage/metrics.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <unordered_map>

namespace engage {

std::vector<std::string> metric_tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    };
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            continue;
        } else {
            cur += static_cast<char>(std::tolower(c));
        }
    }
    flush();
    return out;
}

namespace {

std::map<std::vector<std::string>, int> ngram_counts(const TokenSeq& tokens, int n) {
    std::map<std::vector<std::string>, int> counts;
    if (static_cast<int>(tokens.size()) < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)] += 1;
    }
    return counts;
}

}  // namespace

double bleu(const std::vector<TokenSeq>& hypotheses,
            const std::vector<std::vector<TokenSeq>>& references, int max_n) {
    if (hypotheses.empty() || hypotheses.size() != references.size()) {
        throw std::runtime_error("bleu: hypotheses and references must be non-empty and aligned");
    }
    std::vector<long> matches(static_cast<std::size_t>(max_n), 0);
    std::vector<long> totals(static_cast<std::size_t>(max_n), 0);
    long hyp_len = 0, ref_len = 0;

    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        const TokenSeq& hyp = hypotheses[i];
        const auto& refs = references[i];
        if (refs.empty()) throw std::runtime_error("bleu: hypothesis without references");
        hyp_len += static_cast<long>(hyp.size());
        // closest reference length, ties to the shorter
        long best_ref = static_cast<long>(refs[0].size());
        for (const auto& r : refs) {
            long rl = static_cast<long>(r.size());
            long cur = std::labs(rl - static_cast<long>(hyp.size()));
            long best = std::labs(best_ref - static_cast<long>(hyp.size()));
            if (cur < best || (cur == best && rl < best_ref)) best_ref = rl;
        }
        ref_len += best_ref;

        for (int n = 1; n <= max_n; ++n) {
            auto hyp_counts = ngram_counts(hyp, n);
            std::map<std::vector<std::string>, int> max_ref;
            for (const auto& r : refs) {
                for (const auto& [gram, cnt] : ngram_counts(r, n)) {
                    auto& slot = max_ref[gram];
                    slot = std::max(slot, cnt);
                }
            }
            for (const auto& [gram, cnt] : hyp_counts) {
                totals[static_cast<std::size_t>(n - 1)] += cnt;
                auto it = max_ref.find(gram);
                if (it != max_ref.end()) {
                    matches[static_cast<std::size_t>(n - 1)] += std::min(cnt, it->second);
                }
            }
        }
    }

    double log_sum = 0.0;
    int used = 0;
    for (int n = 1; n <= max_n; ++n) {
        long m = matches[static_cast<std::size_t>(n - 1)];
        long t = totals[static_cast<std::size_t>(n - 1)];
        if (t == 0) continue;  // no n-grams of this order exist at all
        double p;
        if (m == 0) {
            if (n == 1) return 0.0;  // unigram precision is never smoothed
            p = 1.0 / (static_cast<double>(t) + 1.0);
        } else {
            p = static_cast<double>(m) / static_cast<double>(t);
        }
        log_sum += std::log(p);
        ++used;
    }
    if (used == 0 || hyp_len == 0) return 0.0;
    double geo = std::exp(log_sum / static_cast<double>(used));
    double bp = hyp_len >= ref_len
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return 100.0 * bp * geo;
}

namespace {

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

constexpr double kRougeBeta = 1.2;

}  // namespace

double rouge_l_single(const TokenSeq& hypothesis, const std::vector<TokenSeq>& references) {
    if (references.empty()) throw std::runtime_error("rouge_l: no references");
    double best = 0.0;
    for (const auto& ref : references) {
        if (hypothesis.empty() || ref.empty()) continue;
        double lcs = static_cast<double>(lcs_length(hypothesis, ref));
        if (lcs == 0.0) continue;
        double prec = lcs / static_cast<double>(hypothesis.size());
        double rec = lcs / static_cast<double>(ref.size());
        double b2 = kRougeBeta * kRougeBeta;
        double f = (1.0 + b2) * prec * rec / (rec + b2 * prec);
        best = std::max(best, f);
    }
    return 100.0 * best;
}

double rouge_l(const std::vector<TokenSeq>& hypotheses,
               const std::vector<std::vector<TokenSeq>>& references) {
    if (hypotheses.empty() || hypotheses.size() != references.size()) {
        throw std::runtime_error("rouge_l: hypotheses and references must be non-empty and aligned");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        sum += rouge_l_single(hypotheses[i], references[i]);
    }
    return sum / static_cast<double>(hypotheses.size());
}

std::size_t num_bigrams(const std::vector<TokenSeq>& comments) {
    std::set<std::pair<std::string, std::string>> grams;
    for (const auto& c : comments) {
        for (std::size_t i = 0; i + 1 < c.size(); ++i) {
            grams.emplace(c[i], c[i + 1]);
        }
    }
    return grams.size();
}

namespace {

std::string join_gram(const TokenSeq& tokens, std::size_t begin, int n) {
    std::string g = tokens[begin];
    for (int i = 1; i < n; ++i) {
        g += '\x1f';
        g += tokens[begin + static_cast<std::size_t>(i)];
    }
    return g;
}

std::unordered_map<std::string, double> tfidf_vector(const TokenSeq& tokens, int n,
                                                     const CiderIdf& idf) {
    std::unordered_map<std::string, double> vec;
    if (static_cast<int>(tokens.size()) < n) return vec;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
        vec[join_gram(tokens, i, n)] += 1.0;
    }
    for (auto& [gram, tf] : vec) tf *= idf.idf(gram);
    return vec;
}

}  // namespace

CiderIdf::CiderIdf(const std::vector<TokenSeq>& pool, int max_n) : max_n_(max_n) {
    std::unordered_map<std::string, int> df;
    for (const auto& doc : pool) {
        std::set<std::string> seen;
        for (int n = 1; n <= max_n; ++n) {
            if (static_cast<int>(doc.size()) < n) break;
            for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= doc.size(); ++i) {
                seen.insert(join_gram(doc, i, n));
            }
        }
        for (const auto& g : seen) df[g] += 1;
    }
    double n_docs = static_cast<double>(pool.size());
    missing_ = std::log(n_docs + 1.0);  // df = 1 for unseen grams would be log((N+1)/1)
    for (const auto& [gram, d] : df) {
        idf_[gram] = std::log((n_docs + 1.0) / static_cast<double>(d));
    }
}

double CiderIdf::idf(const std::string& gram) const {
    auto it = idf_.find(gram);
    return it == idf_.end() ? missing_ : it->second;
}

double cider_similarity(const TokenSeq& a, const TokenSeq& b, const CiderIdf& idf) {
    double total = 0.0;
    for (int n = 1; n <= idf.max_n(); ++n) {
        auto va = tfidf_vector(a, n, idf);
        auto vb = tfidf_vector(b, n, idf);
        double na = 0.0, nb = 0.0, dot = 0.0;
        for (const auto& [g, x] : va) na += x * x;
        for (const auto& [g, x] : vb) nb += x * x;
        if (na > 0.0 && nb > 0.0) {
            const auto& small = va.size() <= vb.size() ? va : vb;
            const auto& large = va.size() <= vb.size() ? vb : va;
            for (const auto& [g, x] : small) {
                auto it = large.find(g);
                if (it != large.end()) dot += x * it->second;
            }
            total += dot / std::sqrt(na * nb);
        }
    }
    return total / static_cast<double>(idf.max_n());
}

std::optional<double> self_cider(const std::vector<TokenSeq>& comments, const CiderIdf& idf) {
    const std::size_t n = comments.size();
    if (n < 2) return std::nullopt;
    Eigen::MatrixXd kernel(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            double s = cider_similarity(comments[i], comments[j], idf);
            kernel(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s;
            kernel(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = s;
        }
    }
    double trace = kernel.trace();
    if (trace <= 1e-12) return 0.0;  // degenerate: all-empty comments
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(kernel);
    double lambda_max = std::max(solver.eigenvalues().maxCoeff(), 0.0);
    double ratio = std::min(std::max(lambda_max / trace, 1.0 / static_cast<double>(n)), 1.0);
    double diversity = -std::log(ratio) / std::log(static_cast<double>(n));
    return 100.0 * diversity;
}

AgreementReport agreement(
    const std::function<double(const std::string&, const std::vector<int>&)>& scorer,
    const std::vector<AgreementPair>& pairs) {
    if (pairs.empty()) throw std::runtime_error("agreement: empty pair set");
    double agree = 0.0;
    for (const auto& p : pairs) {
        double pos = scorer(p.video_id, p.pos_tokens);
        double neg = scorer(p.video_id, p.neg_tokens);
        if (pos > neg) {
            agree += 1.0;
        } else if (pos == neg) {
            agree += 0.5;
        }
    }
    return {pairs.size(), agree / static_cast<double>(pairs.size())};
}

}  // namespace engage
