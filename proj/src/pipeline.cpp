#include "engage/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include "engage/metrics.hpp"
#include "engage/pairs.hpp"
#include "engage/uniqueness.hpp"
#include "engage/util.hpp"
#include "json.hpp"

namespace engage {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> keys) {
    if (!j.is_object()) {
        throw std::runtime_error("config: section '" + section + "' must be an object");
    }
    for (const auto& [key, _] : j.items()) {
        bool known = false;
        for (const char* k : keys) {
            if (key == k) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw std::runtime_error("config: unknown key '" + key + "' in section '" + section +
                                     "'");
        }
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_synth(const json& j, SyntheticConfig& c) {
    check_keys(j, "synth",
               {"n_videos", "n_categories", "comments_per_video", "vocab_size", "frames",
                "patches", "feature_dim", "generic_pool_size", "specific_fraction", "like_rate",
                "decay_timescale", "engagement_noise", "horizon_days"});
    maybe(j, "n_videos", c.n_videos);
    maybe(j, "n_categories", c.n_categories);
    if (j.contains("comments_per_video")) {
        auto arr = j.at("comments_per_video");
        if (!arr.is_array() || arr.size() != 2) {
            throw std::runtime_error("config: synth.comments_per_video must be [min, max]");
        }
        c.comments_per_video_min = arr[0].get<int>();
        c.comments_per_video_max = arr[1].get<int>();
    }
    maybe(j, "vocab_size", c.vocab_size);
    maybe(j, "frames", c.frames);
    maybe(j, "patches", c.patches);
    maybe(j, "feature_dim", c.feature_dim);
    maybe(j, "generic_pool_size", c.generic_pool_size);
    maybe(j, "specific_fraction", c.specific_fraction);
    maybe(j, "like_rate", c.like_rate);
    maybe(j, "decay_timescale", c.decay_timescale);
    maybe(j, "engagement_noise", c.engagement_noise);
    maybe(j, "horizon_days", c.horizon_days);
}

void parse_model(const json& j, ModelConfig& c) {
    check_keys(j, "model",
               {"n_queries", "perceiver_layers", "d_model", "decoder_layers", "n_heads",
                "vocab_size", "max_comment_len", "max_frames", "max_patches", "feature_dim"});
    maybe(j, "n_queries", c.n_queries);
    maybe(j, "perceiver_layers", c.perceiver_layers);
    maybe(j, "d_model", c.d_model);
    maybe(j, "decoder_layers", c.decoder_layers);
    maybe(j, "n_heads", c.n_heads);
    maybe(j, "vocab_size", c.vocab_size);
    maybe(j, "max_comment_len", c.max_comment_len);
    maybe(j, "max_frames", c.max_frames);
    maybe(j, "max_patches", c.max_patches);
    maybe(j, "feature_dim", c.feature_dim);
}

void parse_schedule(const json& j, SamplingSchedule& s) {
    check_keys(j, "mle.schedule", {"a0", "step", "epochs_per_level", "n_levels"});
    maybe(j, "a0", s.a0);
    maybe(j, "step", s.step);
    maybe(j, "epochs_per_level", s.epochs_per_level);
    maybe(j, "n_levels", s.n_levels);
}

json schedule_to_json(const SamplingSchedule& s) {
    return json{{"a0", s.a0},
                {"step", s.step},
                {"epochs_per_level", s.epochs_per_level},
                {"n_levels", s.n_levels}};
}

}  // namespace

RunConfig RunConfig::defaults() { return RunConfig{}; }

RunConfig RunConfig::smoke_preset() {
    RunConfig c;
    c.synth.n_videos = 20;
    c.synth.n_categories = 4;
    c.synth.comments_per_video_min = 4;
    c.synth.comments_per_video_max = 8;
    c.synth.vocab_size = 120;
    c.synth.frames = 3;
    c.synth.patches = 4;
    c.synth.feature_dim = 16;
    c.synth.generic_pool_size = 12;

    c.pairs.max_pairs_per_video = 20;

    c.uniqueness.k = 5;
    c.uniqueness.m = 10;
    c.uniqueness.text_dim = 128;

    c.model.n_queries = 6;
    c.model.perceiver_layers = 2;
    c.model.d_model = 32;
    c.model.decoder_layers = 2;
    c.model.n_heads = 4;
    c.model.max_comment_len = 12;
    c.model.max_frames = 3;
    c.model.max_patches = 4;
    c.model.feature_dim = 16;

    c.mle.epochs = 6;
    c.mle.batch_size = 16;
    c.mle.learning_rate = 1e-3;
    c.mle.warmup_epochs = 2;
    c.mle.schedule.epochs_per_level = 2;

    c.reward.epochs = 2;
    c.reward.pairs_per_batch = 64;
    c.reward.learning_rate = 3e-4;

    c.ppo.epochs = 1;
    c.ppo.batch_size = 64;
    c.ppo.learning_rate = 1e-4;
    c.ppo.n_samples = 2;
    c.ppo.opt_epochs = 2;

    c.eval.n_videos = 10;
    c.eval.samples_per_video = 3;
    c.eval.max_len = 12;
    c.eval.agreement_pairs = 60;
    return c;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j = json::parse(text);
    check_keys(j, "<root>",
               {"seed", "out", "synth", "ingest", "pairs", "uniqueness", "model", "mle",
                "reward", "ppo", "eval", "smoke"});
    RunConfig c;
    if (j.contains("smoke") && j.at("smoke").get<bool>()) c = smoke_preset();
    maybe(j, "seed", c.seed);
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    if (j.contains("synth")) parse_synth(j.at("synth"), c.synth);
    if (j.contains("ingest")) {
        check_keys(j.at("ingest"), "ingest", {"videos", "comments"});
        IngestConfig ing;
        ing.videos = j.at("ingest").at("videos").get<std::string>();
        ing.comments = j.at("ingest").at("comments").get<std::string>();
        c.ingest = ing;
    }
    if (j.contains("pairs")) {
        const json& p = j.at("pairs");
        check_keys(p, "pairs", {"max_pairs_per_video", "val_fraction", "biased"});
        maybe(p, "max_pairs_per_video", c.pairs.max_pairs_per_video);
        maybe(p, "val_fraction", c.pairs.val_fraction);
        maybe(p, "biased", c.pairs.biased);
    }
    if (j.contains("uniqueness")) {
        const json& u = j.at("uniqueness");
        check_keys(u, "uniqueness", {"k", "m", "text_dim"});
        maybe(u, "k", c.uniqueness.k);
        maybe(u, "m", c.uniqueness.m);
        maybe(u, "text_dim", c.uniqueness.text_dim);
    }
    if (j.contains("model")) parse_model(j.at("model"), c.model);
    if (j.contains("mle")) {
        const json& m = j.at("mle");
        check_keys(m, "mle",
                   {"epochs", "batch_size", "learning_rate", "warmup_epochs", "schedule"});
        maybe(m, "epochs", c.mle.epochs);
        maybe(m, "batch_size", c.mle.batch_size);
        maybe(m, "learning_rate", c.mle.learning_rate);
        maybe(m, "warmup_epochs", c.mle.warmup_epochs);
        if (m.contains("schedule")) parse_schedule(m.at("schedule"), c.mle.schedule);
    }
    if (j.contains("reward")) {
        const json& r = j.at("reward");
        check_keys(r, "reward", {"epochs", "pairs_per_batch", "learning_rate"});
        maybe(r, "epochs", c.reward.epochs);
        maybe(r, "pairs_per_batch", c.reward.pairs_per_batch);
        maybe(r, "learning_rate", c.reward.learning_rate);
    }
    if (j.contains("ppo")) {
        const json& p = j.at("ppo");
        check_keys(p, "ppo",
                   {"epochs", "batch_size", "learning_rate", "kl_coeff", "clip_eps", "gae_lambda",
                    "discount", "n_samples", "opt_epochs", "kl_ceiling", "n_probe"});
        maybe(p, "epochs", c.ppo.epochs);
        maybe(p, "batch_size", c.ppo.batch_size);
        maybe(p, "learning_rate", c.ppo.learning_rate);
        maybe(p, "kl_coeff", c.ppo.kl_coeff);
        maybe(p, "clip_eps", c.ppo.clip_eps);
        maybe(p, "gae_lambda", c.ppo.gae_lambda);
        maybe(p, "discount", c.ppo.discount);
        maybe(p, "n_samples", c.ppo.n_samples);
        maybe(p, "opt_epochs", c.ppo.opt_epochs);
        maybe(p, "kl_ceiling", c.ppo.kl_ceiling);
        maybe(p, "n_probe", c.n_probe);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        check_keys(e, "eval",
                   {"n_videos", "samples_per_video", "temperature", "max_len", "agreement_pairs",
                    "agreement_margin", "reference_threshold"});
        maybe(e, "n_videos", c.eval.n_videos);
        maybe(e, "samples_per_video", c.eval.samples_per_video);
        maybe(e, "temperature", c.eval.temperature);
        maybe(e, "max_len", c.eval.max_len);
        maybe(e, "agreement_pairs", c.eval.agreement_pairs);
        maybe(e, "agreement_margin", c.eval.agreement_margin);
        maybe(e, "reference_threshold", c.eval.reference_threshold);
    }
    return c;
}

RunConfig RunConfig::from_json_file(const fs::path& path) {
    return from_json_text(read_file(path));
}

std::string RunConfig::to_json_text() const {
    json j;
    j["seed"] = seed;
    j["out"] = out.string();
    j["synth"] = {{"n_videos", synth.n_videos},
                  {"n_categories", synth.n_categories},
                  {"comments_per_video", {synth.comments_per_video_min, synth.comments_per_video_max}},
                  {"vocab_size", synth.vocab_size},
                  {"frames", synth.frames},
                  {"patches", synth.patches},
                  {"feature_dim", synth.feature_dim},
                  {"generic_pool_size", synth.generic_pool_size},
                  {"specific_fraction", synth.specific_fraction},
                  {"like_rate", synth.like_rate},
                  {"decay_timescale", synth.decay_timescale},
                  {"engagement_noise", synth.engagement_noise},
                  {"horizon_days", synth.horizon_days},
                  {"seed", synth.seed}};
    if (ingest) {
        j["ingest"] = {{"videos", ingest->videos.string()},
                       {"comments", ingest->comments.string()}};
    }
    j["pairs"] = {{"max_pairs_per_video", pairs.max_pairs_per_video},
                  {"val_fraction", pairs.val_fraction},
                  {"biased", pairs.biased}};
    j["uniqueness"] = {{"k", uniqueness.k}, {"m", uniqueness.m}, {"text_dim", uniqueness.text_dim}};
    j["model"] = {{"n_queries", model.n_queries},
                  {"perceiver_layers", model.perceiver_layers},
                  {"d_model", model.d_model},
                  {"decoder_layers", model.decoder_layers},
                  {"n_heads", model.n_heads},
                  {"vocab_size", model.vocab_size},
                  {"max_comment_len", model.max_comment_len},
                  {"max_frames", model.max_frames},
                  {"max_patches", model.max_patches},
                  {"feature_dim", model.feature_dim}};
    j["mle"] = {{"epochs", mle.epochs},
                {"batch_size", mle.batch_size},
                {"learning_rate", mle.learning_rate},
                {"warmup_epochs", mle.warmup_epochs},
                {"schedule", schedule_to_json(mle.schedule)},
                {"seed", mle.seed}};
    j["reward"] = {{"epochs", reward.epochs},
                   {"pairs_per_batch", reward.pairs_per_batch},
                   {"learning_rate", reward.learning_rate},
                   {"seed", reward.seed}};
    j["ppo"] = {{"epochs", ppo.epochs},
                {"batch_size", ppo.batch_size},
                {"learning_rate", ppo.learning_rate},
                {"kl_coeff", ppo.kl_coeff},
                {"clip_eps", ppo.clip_eps},
                {"gae_lambda", ppo.gae_lambda},
                {"discount", ppo.discount},
                {"n_samples", ppo.n_samples},
                {"opt_epochs", ppo.opt_epochs},
                {"kl_ceiling", ppo.kl_ceiling},
                {"n_probe", n_probe},
                {"seed", ppo.seed}};
    j["eval"] = {{"n_videos", eval.n_videos},
                 {"samples_per_video", eval.samples_per_video},
                 {"temperature", eval.temperature},
                 {"max_len", eval.max_len},
                 {"agreement_pairs", eval.agreement_pairs},
                 {"agreement_margin", eval.agreement_margin},
                 {"reference_threshold", eval.reference_threshold}};
    return j.dump(2) + "\n";
}

void RunConfig::finalize() {
    synth.seed = derive_seed(seed, "synth");
    mle.seed = derive_seed(seed, "train-gen");
    reward.seed = derive_seed(seed, "train-reward");
    ppo.seed = derive_seed(seed, "train-rl");
    if (!ingest) {
        if (model.feature_dim != synth.feature_dim) {
            throw std::runtime_error("config: model.feature_dim must equal synth.feature_dim");
        }
        if (model.max_frames < synth.frames || model.max_patches < synth.patches) {
            throw std::runtime_error("config: model T/L maxima are below the synth corpus shape");
        }
    }
    if (eval.max_len > model.max_comment_len) {
        throw std::runtime_error("config: eval.max_len exceeds model.max_comment_len");
    }
    synth.validate();
    model.validate();
    mle.validate();
    reward.validate();
    ppo.validate();
}

// ---------------------------------------------------------------------------

RunLock::RunLock(const fs::path& out_dir) : path_(out_dir / ".lock") {
    fs::create_directories(out_dir);
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST) {
            throw std::runtime_error("output directory " + out_dir.string() +
                                     " is locked by another run (remove " + path_.string() +
                                     " if stale)");
        }
        throw std::runtime_error("cannot create lock file " + path_.string() + ": " +
                                 std::strerror(errno));
    }
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// stage plumbing

namespace {

fs::path corpus_dir(const RunConfig& c) { return c.out / "corpus"; }
fs::path pairs_dir(const RunConfig& c) { return c.out / "pairs"; }
fs::path ckpt_dir(const RunConfig& c) { return c.out / "checkpoints"; }

std::string corpus_content_hash(const fs::path& dir) {
    std::uint64_t h = kFnvOffset;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        h = fnv1a64(f.filename().string(), h);
        h = fnv1a64(read_file(f), h);
    }
    return to_hex(h);
}

Corpus load_run_corpus(const RunConfig& c) {
    return load_corpus(corpus_dir(c) / "videos.jsonl", corpus_dir(c) / "comments.jsonl");
}

json synth_section_json(const RunConfig& c) {
    json j = json::parse(c.to_json_text());
    return c.ingest ? j.at("ingest") : j.at("synth");
}

class MetricsFile {
public:
    explicit MetricsFile(const fs::path& path) : path_(path) { write_file(path_, ""); }

    MetricsSink sink() {
        return [this](const MetricRecord& r) {
            json j;
            j["stage"] = r.stage;
            j["epoch"] = r.epoch;
            j["loss"] = r.loss;
            if (r.val_accuracy) j["val_accuracy"] = *r.val_accuracy;
            if (r.mean_reward) j["mean_reward"] = *r.mean_reward;
            if (r.mean_kl) j["mean_kl"] = *r.mean_kl;
            buf_ += j.dump();
            buf_ += '\n';
            write_file(path_, buf_);
        };
    }

private:
    fs::path path_;
    std::string buf_;
};

std::vector<std::size_t> eval_video_selection(const Corpus& corpus, const RunConfig& cfg) {
    std::vector<std::size_t> idx(corpus.n_videos());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, "eval"));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(cfg.eval.n_videos)));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

CorpusSummary summarize_corpus(const Corpus& corpus) {
    CorpusSummary s;
    s.n_videos = corpus.n_videos();
    s.n_comments = corpus.n_comments();
    double total = 0.0;
    for (const Comment& c : corpus.comments()) total += static_cast<double>(c.likes);
    s.mean_likes = s.n_comments ? total / static_cast<double>(s.n_comments) : 0.0;
    return s;
}

void run_synth_stage(const RunConfig& cfg) {
    Corpus corpus = generate_synthetic(cfg.synth);
    write_corpus(corpus, corpus_dir(cfg));
}

void run_ingest_stage(const RunConfig& cfg) {
    if (!cfg.ingest) throw std::runtime_error("ingest: no input paths configured");
    Corpus corpus = load_corpus(cfg.ingest->videos, cfg.ingest->comments);
    write_corpus(corpus, corpus_dir(cfg));
}

void run_pairs_stage(const RunConfig& cfg) {
    Corpus corpus = load_run_corpus(cfg);
    std::uint64_t seed = derive_seed(cfg.seed, "pairs");
    PairSet all = cfg.pairs.biased
                      ? build_biased_pairs(corpus, cfg.pairs.max_pairs_per_video, seed)
                      : build_pairs(corpus, cfg.pairs.max_pairs_per_video, seed);
    fs::create_directories(pairs_dir(cfg));
    write_pairs(all, pairs_dir(cfg) / "pairs.jsonl");
    PairsManifest manifest{all.corpus_fingerprint, cfg.pairs.max_pairs_per_video, seed,
                           cfg.pairs.biased, all.pairs.size()};
    write_pairs_manifest(manifest, pairs_dir(cfg) / "pairs_manifest.json");
    auto [train, val] = split_pairs(all, cfg.pairs.val_fraction, seed);
    write_pairs(train, pairs_dir(cfg) / "pairs_train.jsonl");
    write_pairs(val, pairs_dir(cfg) / "pairs_val.jsonl");
}

void run_uniqueness_stage(const RunConfig& cfg) {
    Corpus corpus = load_run_corpus(cfg);
    HashedBowEmbedder provider(cfg.uniqueness.text_dim);
    auto records = uniqueness_all(corpus, cfg.uniqueness.k, cfg.uniqueness.m, provider);
    write_uniqueness(records, cfg.out / "uniqueness.jsonl");
}

void run_train_gen_stage(const RunConfig& cfg) {
    Corpus corpus = load_run_corpus(cfg);
    auto records = load_uniqueness(cfg.out / "uniqueness.jsonl");
    MetricsFile metrics(cfg.out / "metrics_train_gen.jsonl");
    CommentModel model = train_generator(corpus, records, cfg.model, cfg.mle, metrics.sink());
    fs::create_directories(ckpt_dir(cfg));
    model.save(ckpt_dir(cfg) / "generator.ckpt", std::to_string(cfg.mle.seed));
}

void run_train_reward_stage(const RunConfig& cfg) {
    Corpus corpus = load_run_corpus(cfg);
    std::string fp = corpus.fingerprint();
    PairSet train = load_pairs(pairs_dir(cfg) / "pairs_train.jsonl", fp);
    PairSet val = load_pairs(pairs_dir(cfg) / "pairs_val.jsonl", fp);
    CommentModel generator = CommentModel::load(ckpt_dir(cfg) / "generator.ckpt");
    MetricsFile metrics(cfg.out / "metrics_train_reward.jsonl");
    RewardTrainResult result =
        train_reward(corpus, train, val, cfg.model, cfg.reward, &generator, metrics.sink());
    result.model.save(ckpt_dir(cfg) / "reward.ckpt", std::to_string(cfg.reward.seed));
}

void run_normalize_stage(const RunConfig& cfg) {
    Corpus corpus = load_run_corpus(cfg);
    CommentModel generator = CommentModel::load(ckpt_dir(cfg) / "generator.ckpt");
    CommentModel reward = CommentModel::load(ckpt_dir(cfg) / "reward.ckpt");
    std::uint64_t seed = derive_seed(cfg.seed, "normalize");
    double offset = normalize_rewards(reward, corpus, generator, cfg.n_probe, seed);
    json j;
    j["offset"] = offset;
    j["n_probe"] = cfg.n_probe;
    j["seed"] = seed;
    write_file(cfg.out / "normalization.json", j.dump(2) + "\n");
}

namespace {
double load_offset(const RunConfig& cfg) {
    json j = json::parse(read_file(cfg.out / "normalization.json"));
    return j.at("offset").get<double>();
}
}  // namespace

void run_train_rl_stage(const RunConfig& cfg) {
    Corpus corpus = load_run_corpus(cfg);
    CommentModel generator = CommentModel::load(ckpt_dir(cfg) / "generator.ckpt");
    CommentModel reward = CommentModel::load(ckpt_dir(cfg) / "reward.ckpt");
    double offset = load_offset(cfg);
    MetricsFile metrics(cfg.out / "metrics_train_rl.jsonl");
    CommentModel policy = train_rl(corpus, generator, reward, offset, cfg.ppo, metrics.sink());
    policy.save(ckpt_dir(cfg) / "policy.ckpt", std::to_string(cfg.ppo.seed));
}

void run_eval_stage(const RunConfig& cfg) {
    Corpus corpus = load_run_corpus(cfg);
    fs::path ckpt = ckpt_dir(cfg) / "policy.ckpt";
    if (!fs::exists(ckpt)) ckpt = ckpt_dir(cfg) / "generator.ckpt";
    CommentModel model = CommentModel::load(ckpt);
    CommentModel reward = CommentModel::load(ckpt_dir(cfg) / "reward.ckpt");
    double offset = load_offset(cfg);

    DecodeParams decode;
    decode.strategy = DecodeStrategy::temperature;
    decode.temperature = cfg.eval.temperature;
    decode.max_len = cfg.eval.max_len;
    decode.n_samples = cfg.eval.samples_per_video;

    auto selection = eval_video_selection(corpus, cfg);

    struct VideoEval {
        const Video* video;
        std::vector<std::string> texts;
        std::vector<TokenSeq> hyp_tokens;
        std::vector<TokenSeq> ref_tokens;
        std::vector<double> rewards;
    };
    std::vector<VideoEval> evals;
    std::string generations;

    for (std::size_t idx : selection) {
        const Video& v = corpus.videos()[idx];
        VideoEval ve;
        ve.video = &v;
        std::mt19937_64 rng(derive_seed(cfg.seed, "eval_gen_" + v.id));
        for (const GenSample& s : model.generate(v, decode, rng)) {
            std::string text = model.vocab().decode(s.tokens);
            ve.texts.push_back(text);
            ve.hyp_tokens.push_back(metric_tokenize(text));
            if (!s.tokens.empty()) {
                ve.rewards.push_back(reward.reward_score(v, s.tokens) - offset);
            }
            json g;
            g["video_id"] = v.id;
            g["text"] = text;
            generations += g.dump();
            generations += '\n';
        }
        // References: planted high-engagement comments, falling back to
        // the three most-liked when the corpus carries no ground truth.
        std::vector<std::pair<std::uint64_t, const Comment*>> by_likes;
        for (std::size_t ci : corpus.comments_of(v.id)) {
            const Comment& c = corpus.comments()[ci];
            if (c.true_engagement && *c.true_engagement >= cfg.eval.reference_threshold) {
                ve.ref_tokens.push_back(metric_tokenize(c.text));
            }
            by_likes.emplace_back(c.likes, &c);
        }
        if (ve.ref_tokens.empty()) {
            std::sort(by_likes.begin(), by_likes.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second->id < b.second->id;
            });
            for (std::size_t i = 0; i < by_likes.size() && i < 3; ++i) {
                ve.ref_tokens.push_back(metric_tokenize(by_likes[i].second->text));
            }
        }
        evals.push_back(std::move(ve));
    }

    // corpus-level metrics
    std::vector<TokenSeq> all_hyps;
    std::vector<std::vector<TokenSeq>> all_refs;
    std::vector<TokenSeq> pool;
    for (const auto& ve : evals) {
        for (const auto& h : ve.hyp_tokens) {
            pool.push_back(h);
            if (!ve.ref_tokens.empty()) {
                all_hyps.push_back(h);
                all_refs.push_back(ve.ref_tokens);
            }
        }
    }
    double bleu_score = all_hyps.empty() ? 0.0 : bleu(all_hyps, all_refs);
    double rouge_score = all_hyps.empty() ? 0.0 : rouge_l(all_hyps, all_refs);
    std::size_t bigrams = num_bigrams(pool);

    CiderIdf idf(pool);
    double cider_sum = 0.0;
    int cider_n = 0;
    double reward_sum = 0.0;
    long reward_n = 0;

    json per_video = json::array();
    for (const auto& ve : evals) {
        json pv;
        pv["video_id"] = ve.video->id;
        pv["n_samples"] = ve.texts.size();
        if (!ve.ref_tokens.empty()) {
            std::vector<std::vector<TokenSeq>> refs(ve.hyp_tokens.size(), ve.ref_tokens);
            pv["rouge_l"] = rouge_l(ve.hyp_tokens, refs);
        } else {
            pv["rouge_l"] = nullptr;
        }
        auto sc = self_cider(ve.hyp_tokens, idf);
        if (sc) {
            pv["self_cider"] = *sc;
            cider_sum += *sc;
            cider_n += 1;
        } else {
            pv["self_cider"] = nullptr;
        }
        if (!ve.rewards.empty()) {
            double m = std::accumulate(ve.rewards.begin(), ve.rewards.end(), 0.0) /
                       static_cast<double>(ve.rewards.size());
            pv["avg_reward"] = m;
            reward_sum += std::accumulate(ve.rewards.begin(), ve.rewards.end(), 0.0);
            reward_n += static_cast<long>(ve.rewards.size());
        } else {
            pv["avg_reward"] = nullptr;
        }
        per_video.push_back(std::move(pv));
    }

    json report;
    report["bleu"] = bleu_score;
    report["rouge_l"] = rouge_score;
    report["num_bigrams"] = bigrams;
    report["self_cider"] = cider_n > 0 ? json(cider_sum / cider_n) : json(nullptr);
    report["avg_reward"] = reward_n > 0 ? json(reward_sum / static_cast<double>(reward_n))
                                        : json(nullptr);
    report["n_videos"] = evals.size();
    report["samples_per_video"] = cfg.eval.samples_per_video;
    report["checkpoint"] = ckpt.filename().string();
    report["per_video"] = std::move(per_video);
    write_file(cfg.out / "eval_report.json", report.dump(2) + "\n");
    write_file(cfg.out / "generations.jsonl", generations);
}

void run_agreement_stage(const RunConfig& cfg) {
    Corpus corpus = load_run_corpus(cfg);
    CommentModel reward = CommentModel::load(ckpt_dir(cfg) / "reward.ckpt");

    auto selection = eval_video_selection(corpus, cfg);
    std::mt19937_64 rng(derive_seed(cfg.seed, "agreement"));
    std::vector<AgreementPair> pairs;
    std::size_t want = static_cast<std::size_t>(cfg.eval.agreement_pairs);
    std::size_t max_tries = want * 50 + 1000;
    for (std::size_t t = 0; t < max_tries && pairs.size() < want; ++t) {
        const Video& v =
            corpus.videos()[selection[rng() % static_cast<std::uint64_t>(selection.size())]];
        const auto& idx = corpus.comments_of(v.id);
        if (idx.size() < 2) continue;
        std::size_t a = idx[rng() % idx.size()];
        std::size_t b = idx[rng() % idx.size()];
        if (a == b) continue;
        const Comment& ca = corpus.comments()[a];
        const Comment& cb = corpus.comments()[b];
        if (!ca.true_engagement || !cb.true_engagement) {
            throw std::runtime_error(
                "agreement: corpus lacks true_engagement ground truth for comment " + ca.id);
        }
        if (std::abs(*ca.true_engagement - *cb.true_engagement) < cfg.eval.agreement_margin) {
            continue;
        }
        const Comment& pos = *ca.true_engagement > *cb.true_engagement ? ca : cb;
        const Comment& neg = *ca.true_engagement > *cb.true_engagement ? cb : ca;
        std::vector<int> pos_toks = reward.vocab().encode(pos.text);
        std::vector<int> neg_toks = reward.vocab().encode(neg.text);
        if (pos_toks.empty() || neg_toks.empty()) continue;
        pairs.push_back({v.id, std::move(pos_toks), std::move(neg_toks)});
    }
    auto scorer = [&](const std::string& video_id, const std::vector<int>& tokens) {
        return reward.reward_score(corpus.video(video_id), tokens);
    };
    AgreementReport report = agreement(scorer, pairs);
    json j;
    j["n_pairs"] = report.n_pairs;
    j["agree_fraction"] = report.agree_fraction;
    write_file(cfg.out / "agreement_report.json", j.dump(2) + "\n");
}

void run_bias_report(const fs::path& corpus_dir_in, const fs::path& out_dir) {
    Corpus corpus = load_corpus(corpus_dir_in / "videos.jsonl", corpus_dir_in / "comments.jsonl");
    BiasCurve curve = bias_curve(corpus);
    fs::create_directories(out_dir);
    write_bias_curve_csv(curve, out_dir / "bias_curve.csv");
    write_bias_curve_svg(curve, out_dir / "bias_curve.svg");
}

void run_generate(const fs::path& corpus_dir_in, const fs::path& checkpoint,
                  const DecodeParams& decode, std::uint64_t seed, const fs::path& out_path) {
    Corpus corpus = load_corpus(corpus_dir_in / "videos.jsonl", corpus_dir_in / "comments.jsonl");
    CommentModel model = CommentModel::load(checkpoint);
    std::string buf;
    for (const Video& v : corpus.videos()) {
        std::mt19937_64 rng(derive_seed(seed, "generate_" + v.id));
        for (const GenSample& s : model.generate(v, decode, rng)) {
            json j;
            j["video_id"] = v.id;
            j["text"] = model.vocab().decode(s.tokens);
            buf += j.dump();
            buf += '\n';
        }
    }
    write_file(out_path, buf);
}

// ---------------------------------------------------------------------------
// pipeline orchestration

namespace {

class StageRunner {
public:
    StageRunner(const RunConfig& cfg, StageLogger log) : cfg_(cfg), log_(std::move(log)) {
        fs::create_directories(cfg_.out);
        manifest_path_ = cfg_.out / "run_manifest.json";
        if (fs::exists(manifest_path_)) {
            json j = json::parse(read_file(manifest_path_), nullptr, false);
            if (!j.is_discarded() && j.contains("stages")) old_stages_ = j.at("stages");
        }
        new_manifest_["config"] = json::parse(cfg_.to_json_text());
        new_manifest_["stages"] = json::object();
    }

    void stage(const std::string& name, const json& fingerprint_inputs,
               const std::vector<fs::path>& outputs, const std::function<void()>& fn) {
        json fp_src = fingerprint_inputs;
        fp_src["stage"] = name;
        std::string fp = to_hex(fnv1a64(fp_src.dump()));

        bool cached = !upstream_reran_ && old_stages_.contains(name) &&
                      old_stages_.at(name).value("fingerprint", "") == fp;
        if (cached) {
            for (const auto& p : outputs) {
                if (!fs::exists(p)) {
                    cached = false;
                    break;
                }
            }
        }
        if (cached) {
            if (log_) log_("stage " + name + ": cached");
        } else {
            if (log_) log_("stage " + name + ": running");
            try {
                fn();
            } catch (const std::exception& e) {
                throw std::runtime_error("stage " + name + " failed: " + e.what());
            }
            upstream_reran_ = true;
        }
        json rec;
        rec["fingerprint"] = fp;
        json outs = json::array();
        for (const auto& p : outputs) outs.push_back(fs::relative(p, cfg_.out).string());
        rec["outputs"] = outs;
        new_manifest_["stages"][name] = rec;
        write_file(manifest_path_, new_manifest_.dump(2) + "\n");
    }

private:
    const RunConfig& cfg_;
    StageLogger log_;
    fs::path manifest_path_;
    json old_stages_ = json::object();
    json new_manifest_;
    bool upstream_reran_ = false;
};

json file_hash_json(const fs::path& p) { return json(to_hex(hash_file(p))); }

}  // namespace

void run_pipeline(const RunConfig& cfg_in, const StageLogger& log) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    RunLock lock(cfg.out);
    StageRunner runner(cfg, log);
    json config_json = json::parse(cfg.to_json_text());

    const fs::path videos = corpus_dir(cfg) / "videos.jsonl";
    const fs::path comments = corpus_dir(cfg) / "comments.jsonl";

    runner.stage(cfg.ingest ? "ingest" : "synth", {{"config", synth_section_json(cfg)}},
                 {videos, comments}, [&] { cfg.ingest ? run_ingest_stage(cfg) : run_synth_stage(cfg); });

    json corpus_hash(corpus_content_hash(corpus_dir(cfg)));

    runner.stage("pairs",
                 {{"config", config_json.at("pairs")},
                  {"seed", derive_seed(cfg.seed, "pairs")},
                  {"corpus", corpus_hash}},
                 {pairs_dir(cfg) / "pairs.jsonl", pairs_dir(cfg) / "pairs_train.jsonl",
                  pairs_dir(cfg) / "pairs_val.jsonl"},
                 [&] { run_pairs_stage(cfg); });

    runner.stage("uniqueness",
                 {{"config", config_json.at("uniqueness")}, {"corpus", corpus_hash}},
                 {cfg.out / "uniqueness.jsonl"}, [&] { run_uniqueness_stage(cfg); });

    runner.stage("train-gen",
                 {{"config", {config_json.at("mle"), config_json.at("model")}},
                  {"corpus", corpus_hash},
                  {"uniqueness", file_hash_json(cfg.out / "uniqueness.jsonl")}},
                 {ckpt_dir(cfg) / "generator.ckpt", cfg.out / "metrics_train_gen.jsonl"},
                 [&] { run_train_gen_stage(cfg); });

    runner.stage("train-reward",
                 {{"config", {config_json.at("reward"), config_json.at("model")}},
                  {"corpus", corpus_hash},
                  {"pairs", file_hash_json(pairs_dir(cfg) / "pairs_train.jsonl")},
                  {"generator", file_hash_json(ckpt_dir(cfg) / "generator.ckpt")}},
                 {ckpt_dir(cfg) / "reward.ckpt", cfg.out / "metrics_train_reward.jsonl"},
                 [&] { run_train_reward_stage(cfg); });

    runner.stage("normalize",
                 {{"n_probe", cfg.n_probe},
                  {"seed", derive_seed(cfg.seed, "normalize")},
                  {"reward", file_hash_json(ckpt_dir(cfg) / "reward.ckpt")},
                  {"generator", file_hash_json(ckpt_dir(cfg) / "generator.ckpt")}},
                 {cfg.out / "normalization.json"}, [&] { run_normalize_stage(cfg); });

    runner.stage("train-rl",
                 {{"config", config_json.at("ppo")},
                  {"corpus", corpus_hash},
                  {"generator", file_hash_json(ckpt_dir(cfg) / "generator.ckpt")},
                  {"reward", file_hash_json(ckpt_dir(cfg) / "reward.ckpt")},
                  {"normalization", file_hash_json(cfg.out / "normalization.json")}},
                 {ckpt_dir(cfg) / "policy.ckpt", cfg.out / "metrics_train_rl.jsonl"},
                 [&] { run_train_rl_stage(cfg); });

    runner.stage("eval",
                 {{"config", config_json.at("eval")},
                  {"seed", derive_seed(cfg.seed, "eval")},
                  {"corpus", corpus_hash},
                  {"policy", file_hash_json(ckpt_dir(cfg) / "policy.ckpt")},
                  {"reward", file_hash_json(ckpt_dir(cfg) / "reward.ckpt")},
                  {"normalization", file_hash_json(cfg.out / "normalization.json")}},
                 {cfg.out / "eval_report.json", cfg.out / "generations.jsonl"},
                 [&] { run_eval_stage(cfg); });

    runner.stage("agreement",
                 {{"config", config_json.at("eval")},
                  {"seed", derive_seed(cfg.seed, "agreement")},
                  {"corpus", corpus_hash},
                  {"reward", file_hash_json(ckpt_dir(cfg) / "reward.ckpt")}},
                 {cfg.out / "agreement_report.json"}, [&] { run_agreement_stage(cfg); });

    // assemble the combined metrics log
    std::string combined;
    for (const char* name :
         {"metrics_train_gen.jsonl", "metrics_train_reward.jsonl", "metrics_train_rl.jsonl"}) {
        fs::path p = cfg.out / name;
        if (fs::exists(p)) combined += read_file(p);
    }
    write_file(cfg.out / "metrics.jsonl", combined);
    if (log) log("pipeline complete: " + cfg.out.string());
}

}  // namespace engage
