#include <iostream>

#include "CLI11.hpp"
#include "engage/pipeline.hpp"
#include "engage/util.hpp"

using namespace engage;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool smoke = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON run-config file");
    cmd->add_option("--out", opts.out, "output directory");
    cmd->add_option("--seed", opts.seed, "global seed")->each([&](const std::string&) {
        opts.seed_set = true;
    });
    cmd->add_flag("--smoke", opts.smoke, "tiny fast preset");
}

RunConfig build_config(const CommonOpts& opts) {
    RunConfig cfg;
    if (!opts.config_path.empty()) {
        cfg = RunConfig::from_json_file(opts.config_path);
        if (opts.smoke) {
            throw std::runtime_error("--smoke and --config are mutually exclusive");
        }
    } else if (opts.smoke) {
        cfg = RunConfig::smoke_preset();
    }
    if (opts.seed_set) cfg.seed = opts.seed;
    if (!opts.out.empty()) cfg.out = opts.out;
    cfg.finalize();
    return cfg;
}

void print_summary(const RunConfig& cfg) {
    Corpus corpus = load_corpus(cfg.out / "corpus" / "videos.jsonl",
                                cfg.out / "corpus" / "comments.jsonl");
    CorpusSummary s = summarize_corpus(corpus);
    std::cout << "corpus: " << s.n_videos << " videos, " << s.n_comments
              << " comments, mean likes " << s.mean_likes << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"engagement-driven video comment generation pipeline"};
    app.require_subcommand(1);

    CommonOpts opts;

    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    add_common(synth, opts);

    auto* ingest = app.add_subcommand("ingest", "validate and canonicalize an existing corpus");
    add_common(ingest, opts);
    std::string ingest_videos, ingest_comments;
    ingest->add_option("--videos", ingest_videos, "videos.jsonl path")->required();
    ingest->add_option("--comments", ingest_comments, "comments.jsonl path")->required();

    auto* bias = app.add_subcommand("bias-report", "temporal like-decay curve (CSV + SVG)");
    add_common(bias, opts);
    std::string bias_corpus;
    bias->add_option("--corpus", bias_corpus, "corpus directory")->required();

    auto* pairs = app.add_subcommand("pairs", "build debiased comparison pairs");
    add_common(pairs, opts);

    auto* uniq = app.add_subcommand("uniqueness", "score comment uniqueness");
    add_common(uniq, opts);

    auto* tgen = app.add_subcommand("train-gen", "train the initial generator (MLE)");
    add_common(tgen, opts);

    auto* trew = app.add_subcommand("train-reward", "train the engagement reward model");
    add_common(trew, opts);

    auto* trl = app.add_subcommand("train-rl", "PPO stage");
    add_common(trl, opts);

    auto* gen = app.add_subcommand("generate", "generate comments with a checkpoint");
    add_common(gen, opts);
    std::string gen_ckpt, gen_corpus, gen_out = "generations.jsonl";
    int gen_n = 1;
    double gen_temp = 1.0;
    bool gen_greedy = false;
    gen->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
    gen->add_option("--corpus", gen_corpus, "corpus directory")->required();
    gen->add_option("--n", gen_n, "samples per video");
    gen->add_option("--temperature", gen_temp, "sampling temperature");
    gen->add_flag("--greedy", gen_greedy, "greedy decoding");
    gen->add_option("--output", gen_out, "output jsonl");

    auto* eval = app.add_subcommand("eval", "objective evaluation of the trained policy");
    add_common(eval, opts);

    auto* agree = app.add_subcommand("agreement", "reward-vs-ground-truth agreement");
    add_common(agree, opts);

    auto* pipe = app.add_subcommand("pipeline", "run every stage end to end");
    add_common(pipe, opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (bias->parsed()) {
            RunConfig cfg = build_config(opts);
            run_bias_report(bias_corpus, cfg.out);
            std::cout << "wrote " << (cfg.out / "bias_curve.csv").string() << " and "
                      << (cfg.out / "bias_curve.svg").string() << "\n";
            return 0;
        }
        if (gen->parsed()) {
            RunConfig cfg = build_config(opts);
            DecodeParams decode;
            decode.strategy = gen_greedy ? DecodeStrategy::greedy : DecodeStrategy::temperature;
            decode.temperature = gen_temp;
            decode.n_samples = gen_n;
            decode.max_len = cfg.eval.max_len;
            run_generate(gen_corpus, gen_ckpt, decode, cfg.seed, cfg.out / gen_out);
            std::cout << "wrote " << (cfg.out / gen_out).string() << "\n";
            return 0;
        }

        RunConfig cfg = build_config(opts);
        if (ingest->parsed()) {
            cfg.ingest = IngestConfig{ingest_videos, ingest_comments};
        }
        auto log = [](const std::string& line) { std::cout << line << "\n"; };

        if (synth->parsed()) {
            run_synth_stage(cfg);
            print_summary(cfg);
        } else if (ingest->parsed()) {
            run_ingest_stage(cfg);
            print_summary(cfg);
        } else if (pairs->parsed()) {
            run_pairs_stage(cfg);
            std::cout << "wrote " << (cfg.out / "pairs").string() << "\n";
        } else if (uniq->parsed()) {
            run_uniqueness_stage(cfg);
            std::cout << "wrote " << (cfg.out / "uniqueness.jsonl").string() << "\n";
        } else if (tgen->parsed()) {
            run_train_gen_stage(cfg);
            std::cout << "wrote " << (cfg.out / "checkpoints" / "generator.ckpt").string() << "\n";
        } else if (trew->parsed()) {
            run_train_reward_stage(cfg);
            std::cout << "wrote " << (cfg.out / "checkpoints" / "reward.ckpt").string() << "\n";
        } else if (trl->parsed()) {
            run_normalize_stage(cfg);
            run_train_rl_stage(cfg);
            std::cout << "wrote " << (cfg.out / "checkpoints" / "policy.ckpt").string() << "\n";
        } else if (eval->parsed()) {
            run_eval_stage(cfg);
            std::cout << "wrote " << (cfg.out / "eval_report.json").string() << "\n";
        } else if (agree->parsed()) {
            run_agreement_stage(cfg);
            std::cout << "wrote " << (cfg.out / "agreement_report.json").string() << "\n";
        } else if (pipe->parsed()) {
            run_pipeline(cfg, log);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
