// Command-line pipeline: gen -> analyze -> group -> run / experiment.
// Stage boundaries are files, so any stage can consume externally produced
// artifacts that follow the same formats.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pod/experiments.hpp"
#include "pod/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GenArgs {
    std::string out;
    std::uint64_t seed = 0;
    std::size_t layers = 8;
    std::size_t heads = 4;
    std::size_t head_dim = 16;
    std::size_t vocab = 256;
    double rope_base = 10000.0;
    std::size_t samples = 8;
    std::size_t length = 192;
    double rep_prob = 0.35;
    std::size_t lookback = 64;
};

int cmd_gen(const GenArgs& args) {
    pod::ModelConfig config;
    config.num_layers = args.layers;
    config.num_heads = args.heads;
    config.head_dim = args.head_dim;
    config.model_dim = args.heads * args.head_dim;
    config.vocab_size = args.vocab;
    config.rope_base = args.rope_base;
    config.seed = args.seed;
    config.validate();

    pod::CorpusSpec corpus_spec;
    corpus_spec.seed = args.seed;
    corpus_spec.num_samples = args.samples;
    corpus_spec.sample_length = args.length;
    corpus_spec.vocab_size = args.vocab;
    corpus_spec.repeat_prob = args.rep_prob;
    corpus_spec.lookback = args.lookback;

    const pod::ModelWeights weights = pod::init_model(config);
    const auto corpus = pod::generate_corpus(corpus_spec);

    const fs::path out(args.out);
    pod::io::save_model(out, weights);
    pod::io::write_token_records(out / "corpus.tokens", corpus);

    pod::io::RunManifest manifest;
    manifest.model_config = config;
    manifest.corpus = corpus_spec;
    manifest.output_dir = args.out;
    pod::io::save_manifest(out / "manifest.json", manifest);

    std::cout << "model + corpus written to " << out.string() << " (manifest "
              << manifest.identity_hash() << ")\n";
    return 0;
}

struct AnalyzeArgs {
    std::string model;
    std::string corpus;
    std::string traces; // offline mode: recompute similarity from trace dumps
    std::string out;
    std::size_t q = 16;
    bool dump_traces = false;
};

int cmd_analyze(const AnalyzeArgs& args) {
    const fs::path out(args.out);
    std::string hash;
    std::optional<pod::io::RunManifest> manifest;

    std::vector<pod::AttentionTrace> traces;
    if (!args.traces.empty()) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(args.traces)) {
            if (entry.path().extension() == ".podt") {
                files.push_back(entry.path());
            }
        }
        if (files.empty()) {
            throw pod::InvalidInput("analyze: no .podt trace files in " + args.traces);
        }
        std::sort(files.begin(), files.end());
        for (const fs::path& f : files) {
            traces.push_back(pod::io::read_trace(f));
        }
    } else {
        manifest = pod::io::load_manifest(fs::path(args.model) / "manifest.json");
        if (manifest) {
            hash = manifest->identity_hash();
        }
        const pod::ModelWeights weights = pod::io::load_model(args.model);
        const auto corpus = pod::io::read_token_records(args.corpus);
        if (corpus.empty()) {
            throw pod::InvalidInput("analyze: corpus has no records");
        }
        for (const pod::TokenSequence& s : corpus) {
            if (args.q > s.size()) {
                throw pod::FormatError("analyze: --q " + std::to_string(args.q) +
                                       " exceeds a sample of length " + std::to_string(s.size()));
            }
        }
        traces = pod::collect_traces(weights, corpus, args.q);
        if (args.dump_traces) {
            for (std::size_t i = 0; i < traces.size(); ++i) {
                char name[32];
                std::snprintf(name, sizeof(name), "trace_%05zu.podt", i);
                pod::io::write_trace(out / "traces" / name, traces[i]);
            }
        }
    }

    const pod::SimilarityTensor sim = pod::layer_similarity(traces);
    pod::io::save_similarity(out / "similarity.json", sim, hash);
    if (manifest) {
        manifest->q = args.q;
        manifest->output_dir = args.out;
        pod::io::save_manifest(out / "manifest.json", *manifest);
    }
    std::cout << "similarity tensor (" << sim.num_heads << " heads x " << sim.num_layers
              << " layers) written to " << (out / "similarity.json").string() << "\n";
    return 0;
}

struct GroupArgs {
    std::string similarity;
    std::string out;
    double delta = 0.5;
    std::size_t n = 8192;
    std::size_t n_s = 16;
    std::size_t n_r = 128;
};

int cmd_group(const GroupArgs& args) {
    std::string hash;
    const pod::SimilarityTensor sim = pod::io::load_similarity(args.similarity, &hash);
    const pod::HeadBlocks blocks = pod::greedy_group(sim, args.delta);

    const fs::path out(args.out);
    pod::io::save_blocks(out / "blocks.json", blocks, hash);

    const pod::SavingsRate at_n = pod::savings_rate(blocks, args.n, args.n_s, args.n_r);
    const std::size_t L = blocks.num_layers();
    const std::size_t H = blocks.num_heads();
    double saved_layers = 0.0;
    json blocks_per_head = json::array();
    for (std::size_t h = 0; h < H; ++h) {
        saved_layers += static_cast<double>(L - blocks.blocks_in_head(h));
        blocks_per_head.push_back(blocks.blocks_in_head(h));
    }
    const double asymptotic_key = saved_layers / (static_cast<double>(H) * static_cast<double>(L));

    json report{{"delta", args.delta},
                {"n", args.n},
                {"n_s", args.n_s},
                {"n_r", args.n_r},
                {"blocks_per_head", blocks_per_head},
                {"key_fraction_saved", at_n.key_fraction_saved},
                {"total_kv_fraction_saved", at_n.total_kv_fraction_saved},
                {"asymptotic_key_fraction_saved", asymptotic_key},
                {"asymptotic_total_kv_fraction_saved", asymptotic_key / 2.0},
                {"note", "keys and values assumed equal byte size per token per layer"}};
    if (!hash.empty()) {
        report["manifest_hash"] = hash;
    }
    pod::io::save_json_file(out / "savings.json", report);
    std::cout << "blocks + savings written to " << out.string() << " (asymptotic total "
              << pod::io::format_double(asymptotic_key / 2.0) << ")\n";
    return 0;
}

struct RunArgs {
    std::string model;
    std::string blocks;
    std::string prompt;
    std::string out;
    std::size_t prompt_index = 0;
    std::size_t n_s = 4;
    std::size_t n_r = 32;
    double tau = -1.0; // negative = disabled
    std::size_t steps = 32;
    std::string mode = "pod";
    std::size_t window = 32;
};

json head_report_lines(const pod::DecodeStepReport& report, std::size_t step);

int cmd_run(const RunArgs& args) {
    const pod::ModelWeights weights = pod::io::load_model(args.model);
    const auto records = pod::io::read_token_records(args.prompt);
    if (args.prompt_index >= records.size()) {
        throw pod::InvalidInput("run: prompt index out of range");
    }
    const pod::TokenSequence& prompt = records[args.prompt_index];
    prompt.validate(weights.config.vocab_size);

    std::string model_hash;
    if (const auto manifest = pod::io::load_manifest(fs::path(args.model) / "manifest.json")) {
        model_hash = manifest->identity_hash();
    }

    const fs::path out(args.out);
    std::error_code ec;
    fs::create_directories(out, ec);

    json run_report{{"mode", args.mode},
                    {"prompt_length", prompt.size()},
                    {"steps", args.steps},
                    {"n_s", args.n_s},
                    {"n_r", args.n_r}};
    if (!model_hash.empty()) {
        run_report["manifest_hash"] = model_hash;
    }

    std::vector<std::uint32_t> generated;
    if (args.mode == "pod") {
        std::string blocks_hash;
        pod::HeadBlocks blocks = pod::io::load_blocks(args.blocks, &blocks_hash);
        pod::io::require_matching_hashes(model_hash, blocks_hash, "run: model vs blocks");
        if (blocks.num_layers() != weights.config.num_layers ||
            blocks.num_heads() != weights.config.num_heads) {
            throw pod::ConfigMismatch(
                "run: blocks cover " + std::to_string(blocks.num_layers()) + " layers x " +
                std::to_string(blocks.num_heads()) + " heads, model has " +
                std::to_string(weights.config.num_layers) + " layers x " +
                std::to_string(weights.config.num_heads) + " heads");
        }
        pod::PoDConfig config;
        config.n_s = args.n_s;
        config.n_r = args.n_r;
        if (args.tau >= 0.0) {
            config.tau = args.tau;
        }
        config.blocks = std::move(blocks);

        pod::io::save_pod_config(out / "pod_config.json", config, model_hash);
        pod::PrefillResult pre = pod::prefill(weights, config, prompt);
        std::ofstream steps_file(out / "steps.jsonl", std::ios::trunc);
        if (!steps_file) {
            throw pod::IoError("cannot open " + (out / "steps.jsonl").string());
        }
        std::uint32_t next = static_cast<std::uint32_t>(
            pod::next_token_argmax(pre.logits.row(prompt.size() - 1)));
        for (std::size_t s = 1; s <= args.steps; ++s) {
            generated.push_back(next);
            pod::DecodeStepResult step = pod::decode_step(weights, config, pre.cache, next);
            for (const json& line :
                 head_report_lines(step.report, s)) {
                steps_file << line.dump() << '\n';
            }
            next = static_cast<std::uint32_t>(pod::next_token_argmax(step.logits));
        }
        run_report["tau"] = args.tau >= 0.0 ? json(args.tau) : json(nullptr);
        run_report["final_key_entries"] = pre.cache.key_entries();
        run_report["final_value_entries"] = pre.cache.value_entries();
        run_report["final_length"] = pre.cache.sequence_length();
    } else {
        pod::EvictionPolicy policy;
        if (args.mode == "dense") {
            policy = pod::EvictionPolicy{0, std::nullopt};
        } else if (args.mode == "window") {
            policy = pod::EvictionPolicy{0, args.window};
        } else if (args.mode == "streaming") {
            policy = pod::EvictionPolicy{args.n_s, args.n_r};
        } else {
            throw pod::InvalidInput("run: unknown mode " + args.mode);
        }
        pod::ReferenceDecoder decoder(weights, policy);
        std::vector<double> logits = decoder.prefill(prompt);
        for (std::size_t s = 1; s <= args.steps; ++s) {
            const auto next = static_cast<std::uint32_t>(pod::next_token_argmax(logits));
            generated.push_back(next);
            logits = decoder.step(next);
        }
        run_report["final_key_entries"] = decoder.cached_keys();
        run_report["final_value_entries"] = decoder.cached_values();
        run_report["final_length"] = decoder.sequence_length();
    }

    run_report["generated"] = generated;
    pod::io::save_json_file(out / "run.json", run_report);
    std::cout << "run complete: " << generated.size() << " tokens -> "
              << (out / "run.json").string() << "\n";
    return 0;
}

json head_report_lines(const pod::DecodeStepReport& report, std::size_t step) {
    json lines = json::array();
    const std::size_t num_layers = report.per_layer_head.size() / report.num_heads;
    for (std::size_t l = 0; l < num_layers; ++l) {
        for (std::size_t h = 0; h < report.num_heads; ++h) {
            const pod::HeadStepReport& entry = report.at(l, h);
            lines.push_back(json{{"step", step},
                                 {"layer", l + 1},
                                 {"head", h + 1},
                                 {"gate", entry.gate},
                                 {"skipped", entry.skipped},
                                 {"key_entries", report.key_entries},
                                 {"value_entries", report.value_entries}});
        }
    }
    return lines;
}

void write_csv(const fs::path& path, const std::string& hash, const std::string& header,
               const std::vector<std::vector<std::string>>& rows) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw pod::IoError("cannot open " + path.string() + " for writing");
    }
    out << "# manifest=" << (hash.empty() ? "none" : hash) << '\n';
    out << header << '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            out << row[i] << (i + 1 < row.size() ? "," : "");
        }
        out << '\n';
    }
    if (!out) {
        throw pod::IoError("write failure on " + path.string());
    }
}

struct MatchArgs {
    std::string model;
    std::string corpus;
    std::string out;
    std::vector<std::size_t> budgets;
    std::size_t compare_last = 16;
    std::size_t n_s = 4;
};

int cmd_experiment_match(const MatchArgs& args) {
    const pod::ModelWeights weights = pod::io::load_model(args.model);
    const auto corpus = pod::io::read_token_records(args.corpus);
    if (corpus.empty()) {
        throw pod::InvalidInput("experiment match: corpus has no records");
    }
    std::string hash;
    if (const auto manifest = pod::io::load_manifest(fs::path(args.model) / "manifest.json")) {
        hash = manifest->identity_hash();
    }

    const pod::MatchCurve curve =
        pod::match_experiment(weights, corpus, args.budgets, args.compare_last, args.n_s);

    std::vector<std::vector<std::string>> rows;
    json points = json::array();
    for (const pod::MatchPoint& p : curve.points) {
        rows.push_back({std::to_string(p.budget), pod::io::format_double(p.match_fraction),
                        std::to_string(p.samples)});
        points.push_back(json{{"budget", p.budget},
                              {"match_fraction", p.match_fraction},
                              {"samples", p.samples}});
    }
    const fs::path out(args.out);
    write_csv(out / "match.csv", hash, "budget,match_fraction,samples", rows);
    json j{{"points", points}, {"compare_last", args.compare_last}, {"n_s", args.n_s}};
    if (!hash.empty()) {
        j["manifest_hash"] = hash;
    }
    pod::io::save_json_file(out / "match.json", j);
    std::cout << "match curve with " << curve.points.size() << " budgets -> "
              << (out / "match.csv").string() << "\n";
    return 0;
}

struct TauSweepArgs {
    std::string model;
    std::string blocks;
    std::string prompt;
    std::string out;
    std::vector<double> taus;
    std::size_t steps = 64;
    std::size_t prompt_index = 0;
    std::size_t n_s = 4;
    std::size_t n_r = 32;
};

int cmd_experiment_tausweep(const TauSweepArgs& args) {
    const pod::ModelWeights weights = pod::io::load_model(args.model);
    const auto records = pod::io::read_token_records(args.prompt);
    if (records.empty()) {
        throw pod::InvalidInput("experiment tausweep: corpus has no records");
    }
    if (args.prompt_index >= records.size()) {
        throw pod::InvalidInput("experiment tausweep: prompt index out of range");
    }
    std::string model_hash;
    if (const auto manifest = pod::io::load_manifest(fs::path(args.model) / "manifest.json")) {
        model_hash = manifest->identity_hash();
    }
    std::string blocks_hash;
    pod::PoDConfig config;
    config.n_s = args.n_s;
    config.n_r = args.n_r;
    config.blocks = pod::io::load_blocks(args.blocks, &blocks_hash);
    pod::io::require_matching_hashes(model_hash, blocks_hash, "experiment tausweep: model vs blocks");

    const pod::TauSweep sweep =
        pod::tau_sweep(weights, config, records[args.prompt_index], args.taus, args.steps);

    std::vector<std::vector<std::string>> rows;
    json points = json::array();
    for (const pod::TauPoint& p : sweep.points) {
        rows.push_back({pod::io::format_double(p.tau), pod::io::format_double(p.skip_fraction),
                        pod::io::format_double(p.logit_divergence)});
        points.push_back(json{{"tau", p.tau},
                              {"skip_fraction", p.skip_fraction},
                              {"logit_divergence", p.logit_divergence}});
    }
    const fs::path out(args.out);
    write_csv(out / "tausweep.csv", model_hash, "tau,skip_fraction,logit_divergence", rows);
    json j{{"points", points},
           {"max_observed_gate", sweep.max_observed_gate},
           {"steps", args.steps},
           {"n_s", args.n_s},
           {"n_r", args.n_r}};
    if (!model_hash.empty()) {
        j["manifest_hash"] = model_hash;
    }
    pod::io::save_json_file(out / "tausweep.json", j);
    std::cout << "tau sweep with " << sweep.points.size() << " points -> "
              << (out / "tausweep.csv").string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"proximal/distant split-attention pipeline"};
    app.require_subcommand(1);

    GenArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen", "generate a seeded model and synthetic corpus");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();
    gen_cmd->add_option("--seed", gen.seed, "seed for weights and corpus")->required();
    gen_cmd->add_option("--layers", gen.layers, "number of layers");
    gen_cmd->add_option("--heads", gen.heads, "number of heads");
    gen_cmd->add_option("--head-dim", gen.head_dim, "per-head dimension");
    gen_cmd->add_option("--vocab", gen.vocab, "vocab size");
    gen_cmd->add_option("--rope-base", gen.rope_base, "rotary embedding base");
    gen_cmd->add_option("--samples", gen.samples, "corpus samples");
    gen_cmd->add_option("--length", gen.length, "tokens per sample");
    gen_cmd->add_option("--rep-prob", gen.rep_prob, "token repetition probability")
        ->check(CLI::Range(0.0, 1.0));
    gen_cmd->add_option("--lookback", gen.lookback, "repetition lookback window");

    AnalyzeArgs analyze;
    CLI::App* analyze_cmd =
        app.add_subcommand("analyze", "collect attention traces and layer similarity");
    analyze_cmd->add_option("--model", analyze.model, "model directory");
    analyze_cmd->add_option("--corpus", analyze.corpus, "token records file");
    analyze_cmd->add_option("--traces", analyze.traces, "recompute from dumped traces instead");
    analyze_cmd->add_option("--out", analyze.out, "output directory")->required();
    analyze_cmd->add_option("--q", analyze.q, "trailing query rows to trace");
    analyze_cmd->add_flag("--dump-traces", analyze.dump_traces, "write per-sample trace dumps");

    GroupArgs group;
    CLI::App* group_cmd = app.add_subcommand("group", "greedy layer grouping and cache accounting");
    group_cmd->add_option("--similarity", group.similarity, "similarity json")->required();
    group_cmd->add_option("--out", group.out, "output directory")->required();
    group_cmd->add_option("--delta", group.delta, "similarity threshold")
        ->required()
        ->check(CLI::Range(0.0, 1.0));
    group_cmd->add_option("--n", group.n, "sequence length for the savings report");
    group_cmd->add_option("--ns", group.n_s, "start size for the savings report");
    group_cmd->add_option("--nr", group.n_r, "recent size for the savings report");

    RunArgs run;
    CLI::App* run_cmd = app.add_subcommand("run", "prefill + greedy decoding under a mode");
    run_cmd->add_option("--model", run.model, "model directory")->required();
    run_cmd->add_option("--blocks", run.blocks, "blocks json (pod mode)");
    run_cmd->add_option("--prompt", run.prompt, "token records file")->required();
    run_cmd->add_option("--prompt-index", run.prompt_index, "record to use as prompt");
    run_cmd->add_option("--out", run.out, "output directory")->required();
    run_cmd->add_option("--ns", run.n_s, "start size");
    run_cmd->add_option("--nr", run.n_r, "recent size");
    run_cmd->add_option("--tau", run.tau, "gate threshold in [0,1]; omit to disable skipping")
        ->check(CLI::Range(0.0, 1.0));
    run_cmd->add_option("--steps", run.steps, "decode steps");
    run_cmd->add_option("--mode", run.mode, "pod | dense | window | streaming")
        ->check(CLI::IsMember({"pod", "dense", "window", "streaming"}));
    run_cmd->add_option("--window", run.window, "window size (window mode)");

    CLI::App* exp_cmd = app.add_subcommand("experiment", "analysis experiments");
    exp_cmd->require_subcommand(1);

    MatchArgs match;
    CLI::App* match_cmd =
        exp_cmd->add_subcommand("match", "next-token agreement vs proximal budget");
    match_cmd->add_option("--model", match.model, "model directory")->required();
    match_cmd->add_option("--corpus", match.corpus, "token records file")->required();
    match_cmd->add_option("--out", match.out, "output directory")->required();
    match_cmd->add_option("--budgets", match.budgets, "proximal budgets")
        ->required()
        ->delimiter(',');
    match_cmd->add_option("--compare-last", match.compare_last, "positions compared per sample");
    match_cmd->add_option("--ns", match.n_s, "sink tokens inside each budget");

    TauSweepArgs tausweep;
    CLI::App* tausweep_cmd =
        exp_cmd->add_subcommand("tausweep", "skip rate and divergence vs gate threshold");
    tausweep_cmd->add_option("--model", tausweep.model, "model directory")->required();
    tausweep_cmd->add_option("--blocks", tausweep.blocks, "blocks json")->required();
    tausweep_cmd->add_option("--prompt", tausweep.prompt, "token records file")->required();
    tausweep_cmd->add_option("--prompt-index", tausweep.prompt_index, "record to use as prompt");
    tausweep_cmd->add_option("--out", tausweep.out, "output directory")->required();
    tausweep_cmd->add_option("--taus", tausweep.taus, "thresholds to sweep")
        ->required()
        ->delimiter(',');
    tausweep_cmd->add_option("--steps", tausweep.steps, "decode steps");
    tausweep_cmd->add_option("--ns", tausweep.n_s, "start size");
    tausweep_cmd->add_option("--nr", tausweep.n_r, "recent size");

    try {
        app.parse(argc, argv);
        if (gen_cmd->parsed()) {
            return cmd_gen(gen);
        }
        if (analyze_cmd->parsed()) {
            if (analyze.traces.empty() && (analyze.model.empty() || analyze.corpus.empty())) {
                throw CLI::RequiredError("analyze needs --model and --corpus (or --traces)");
            }
            return cmd_analyze(analyze);
        }
        if (group_cmd->parsed()) {
            return cmd_group(group);
        }
        if (run_cmd->parsed()) {
            if (run.mode == "pod" && run.blocks.empty()) {
                throw CLI::RequiredError("run --mode pod needs --blocks");
            }
            return cmd_run(run);
        }
        if (match_cmd->parsed()) {
            return cmd_experiment_match(match);
        }
        if (tausweep_cmd->parsed()) {
            return cmd_experiment_tausweep(tausweep);
        }
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const pod::InvalidInput& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const pod::FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return 3;
    } catch (const pod::ConfigMismatch& e) {
        std::cerr << "config mismatch: " << e.what() << '\n';
        return 4;
    } catch (const pod::IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
