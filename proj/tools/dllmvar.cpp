// dllmvar command-line driver: corpus generation, packing stats, training,
// generation, benchmarking, EOS diagnostics, and the KV-cache probe.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dllmvar/bench.hpp"
#include "dllmvar/checkpoint.hpp"
#include "dllmvar/inference.hpp"
#include "dllmvar/synthetic.hpp"
#include "dllmvar/training.hpp"

namespace {

using nlohmann::json;
using namespace dllmvar;

struct DecodeFlags {
    DecodeConfig base;
    bool sample = false;

    void attach(CLI::App* app) {
        app->add_option("--block-size", base.block_size, "mask block width");
        app->add_option("--threshold", base.confidence_threshold, "confidence threshold for parallel unmasking");
        app->add_option("--max-blocks", base.max_blocks, "maximum blocks per generation");
        app->add_option("--quota", base.quota, "fixed-engine generation budget");
        app->add_option("--seed", base.seed, "decoding seed (sampling mode)");
        app->add_option("--temperature", base.temperature, "sampling temperature");
        app->add_flag("--sample", sample, "sample instead of greedy argmax");
        app->add_flag("--eager-eos", base.eager_eos, "stop as soon as an EOS commits mid-block");
    }

    DecodeConfig cfg() const {
        DecodeConfig c = base;
        c.greedy = !sample;
        return c;
    }
};

json metrics_json(const GenerationResult& res) {
    return {{"stop_reason", to_string(res.stop_reason)},
            {"steps", res.steps},
            {"forward_calls", res.forward_calls},
            {"positions_computed", res.positions_computed},
            {"blocks_used", res.blocks_used},
            {"emitted_len", res.tokens.size()},
            {"dropped_after_eos", res.dropped_after_eos},
            {"eos_index", res.eos_index ? json(*res.eos_index) : json(nullptr)},
            {"wall_ms", res.wall_ms}};
}

std::string sibling(const std::string& checkpoint_path, const char* name) {
    return (std::filesystem::path(checkpoint_path).parent_path() / name).string();
}

struct LoadedModel {
    Parameters<float> params;
    Tokenizer tok;
};

LoadedModel load_model(const std::string& checkpoint_path, std::string tokenizer_path) {
    if (tokenizer_path.empty()) tokenizer_path = sibling(checkpoint_path, "tokenizer.json");
    auto ckpt = load_checkpoint(checkpoint_path);
    Tokenizer tok = Tokenizer::load(tokenizer_path);
    if (tok.vocab_size() != ckpt.params.config.vocab_size)
        throw std::runtime_error("tokenizer vocabulary does not match the checkpoint");
    return {std::move(ckpt.params), std::move(tok)};
}

std::vector<TextPair> split_corpus(const std::string& path, bool holdout_only, bool train_only) {
    auto pairs = read_corpus(path);
    if (!holdout_only && !train_only) return pairs;
    std::vector<TextPair> out;
    for (auto& p : pairs) {
        if (is_holdout(p) == holdout_only) out.push_back(std::move(p));
    }
    return out;
}

int cmd_gen_corpus(const std::string& task, int min_len, int max_len, int count, const std::string& alphabet,
                   const std::string& terminal, std::uint64_t seed, const std::string& out_path) {
    SyntheticTaskSpec spec;
    spec.kind = task_kind_from_string(task);
    spec.min_len = min_len;
    spec.max_len = max_len;
    spec.count = count;
    if (!alphabet.empty()) spec.alphabet = alphabet;
    spec.terminal = terminal;
    auto pairs = gen_corpus(spec, seed);
    write_corpus(out_path, pairs);
    std::size_t held = 0;
    for (const auto& p : pairs) held += is_holdout(p);
    std::cout << json{{"written", pairs.size()}, {"holdout", held}, {"path", out_path}}.dump() << "\n";
    return 0;
}

int cmd_pack_stats(const std::string& data, std::size_t L, std::uint64_t seed) {
    auto pairs = read_corpus(data);
    Tokenizer tok = tokenizer_for(pairs);
    BatchIterator it(encode_pairs(pairs, tok), L, 1, seed);
    const auto rows = it.batches_in_epoch(0);
    std::size_t used = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        for (const PackedSequence& row : it.next_batch()) {
            for (Role role : row.roles) used += role != Role::pad;
        }
    }
    json out{{"rows", rows},
             {"L", L},
             {"fill_ratio", rows ? static_cast<double>(used) / static_cast<double>(rows * L) : 0.0},
             {"rejected_pairs", it.rejected()},
             {"vocab_size", tok.vocab_size()}};
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& out_dir, ModelConfig mcfg, TrainConfig tcfg,
              bool include_holdout) {
    auto pairs = split_corpus(data, false, !include_holdout);
    if (pairs.empty()) throw std::runtime_error("no training pairs after the holdout split");
    Tokenizer tok = tokenizer_for(read_corpus(data));  // full corpus so holdout prompts stay encodable
    mcfg.vocab_size = tok.vocab_size();
    mcfg.validate();

    std::filesystem::create_directories(out_dir);
    tok.save((std::filesystem::path(out_dir) / "tokenizer.json").string());
    const std::string ckpt_path = (std::filesystem::path(out_dir) / "checkpoint.bin").string();

    Trainer trainer(init_params<float>(mcfg), tcfg, encode_pairs(pairs, tok));
    std::ofstream log_file((std::filesystem::path(out_dir) / "train_log.jsonl").string());
    trainer.run(
        [&](const TrainLogRecord& r) {
            json rec{{"step", r.step},
                     {"loss", r.loss},
                     {"t_mean", r.t_mean},
                     {"masked_tokens", r.masked_tokens},
                     {"wall_ms", r.wall_ms}};
            std::cout << rec.dump() << "\n";
            log_file << rec.dump() << "\n";
        },
        ckpt_path);
    std::cout << json{{"checkpoint", ckpt_path},
                      {"steps", trainer.total_steps()},
                      {"rejected_pairs", trainer.rejected_pairs()}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& tokenizer, std::string prompt,
                 const std::string& prompt_file, const std::string& engine, const DecodeConfig& cfg) {
    if (!prompt_file.empty()) {
        std::ifstream is(prompt_file);
        if (!is) throw std::runtime_error("cannot open prompt file: " + prompt_file);
        std::getline(is, prompt);
    }
    if (prompt.empty()) throw std::runtime_error("empty prompt");
    auto model = load_model(checkpoint, tokenizer);
    ModelBackend<float> backend(model.params);
    TokenSeq ids = model.tok.encode(prompt);
    GenerationResult res =
        engine == "fixed" ? generate_fixed(backend, ids, cfg) : generate_variable(backend, ids, cfg);
    std::cout << model.tok.decode(res.tokens) << "\n";
    json rec = metrics_json(res);
    rec["engine"] = engine;
    std::cout << rec.dump() << "\n";
    return 0;
}

int cmd_bench(const std::string& checkpoint, const std::string& tokenizer, const std::string& data,
              bool holdout_only, std::vector<int> quotas, const DecodeConfig& cfg,
              const std::string& records_path) {
    auto model = load_model(checkpoint, tokenizer);
    ModelBackend<float> backend(model.params);
    auto pairs = split_corpus(data, holdout_only, false);
    if (pairs.empty()) throw std::runtime_error("no bench pairs");
    auto out = run_bench(backend, model.tok, pairs, cfg, quotas);
    std::ostream* rec_os = &std::cout;
    std::ofstream rec_file;
    if (!records_path.empty()) {
        rec_file.open(records_path);
        rec_os = &rec_file;
    }
    for (const BenchRecord& r : out.records) *rec_os << r.to_json().dump() << "\n";
    std::cout << out.summary.dump() << "\n";
    return 0;
}

int cmd_diagnose(const std::string& checkpoint, const std::string& tokenizer, const std::string& data,
                 bool holdout_only, const DecodeConfig& cfg) {
    auto model = load_model(checkpoint, tokenizer);
    ModelBackend<float> backend(model.params);
    auto pairs = split_corpus(data, holdout_only, false);
    if (pairs.empty()) throw std::runtime_error("no pairs to diagnose");
    std::cout << eos_diagnostics(backend, model.tok, pairs, cfg).to_json().dump() << "\n";
    return 0;
}

int cmd_probe_cache(const std::string& checkpoint, const std::string& tokenizer, const std::string& prompt,
                    const DecodeConfig& cfg, double tolerance) {
    auto model = load_model(checkpoint, tokenizer);
    if (prompt.empty()) throw std::runtime_error("empty prompt");
    auto report = cache_divergence_probe(model.params, model.tok.encode(prompt), cfg);
    json out{{"max_oracle_divergence", report.max_oracle_divergence},
             {"max_refreshed_all", report.max_refreshed_all},
             {"max_refreshed_frozen_prompt", report.max_refreshed_frozen_prompt},
             {"blocks", report.blocks},
             {"steps", report.steps},
             {"generated", model.tok.decode(report.result.tokens)},
             {"oracle_tolerance", tolerance}};
    std::cout << out.dump() << "\n";
    if (report.max_oracle_divergence > tolerance) {
        std::cerr << "cache invariant violated: oracle divergence " << report.max_oracle_divergence
                  << " exceeds " << tolerance << "\n";
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dLLM-Var: masked-diffusion language model with variable-length block decoding"};
    app.require_subcommand(1);
    app.set_config("--config");

    // gen-corpus
    std::string gc_task = "copy", gc_alphabet, gc_terminal, gc_out = "corpus.jsonl";
    int gc_min = 5, gc_max = 120, gc_count = 10000;
    std::uint64_t gc_seed = 0;
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic dialogue corpus");
    gen->add_option("--task", gc_task, "copy|reverse|addition|repeat-n");
    gen->add_option("--min-len", gc_min);
    gen->add_option("--max-len", gc_max);
    gen->add_option("--count", gc_count);
    gen->add_option("--alphabet", gc_alphabet, "payload alphabet (default digits)");
    gen->add_option("--terminal", gc_terminal, "marker appended to every payload");
    gen->add_option("--seed", gc_seed);
    gen->add_option("--out", gc_out);

    // pack-stats
    std::string ps_data;
    std::size_t ps_L = 256;
    std::uint64_t ps_seed = 0;
    auto* pack = app.add_subcommand("pack-stats", "packing statistics for a dataset");
    pack->add_option("--data", ps_data)->required();
    pack->add_option("--L", ps_L, "packed row length");
    pack->add_option("--seed", ps_seed);

    // train
    std::string tr_data, tr_out = "run";
    ModelConfig tr_mcfg;
    TrainConfig tr_tcfg;
    bool tr_include_holdout = false;
    std::string tr_weighting = "inverse_t";
    auto* train = app.add_subcommand("train", "train a model");
    train->add_option("--data", tr_data)->required();
    train->add_option("--out-dir", tr_out);
    train->add_option("--dim", tr_mcfg.dim);
    train->add_option("--layers", tr_mcfg.n_layers);
    train->add_option("--heads", tr_mcfg.n_heads);
    train->add_option("--max-positions", tr_mcfg.max_positions);
    train->add_option("--model-seed", tr_mcfg.seed);
    train->add_option("--lr", tr_tcfg.learning_rate);
    train->add_option("--warmup-steps", tr_tcfg.warmup_steps);
    train->add_option("--total-steps", tr_tcfg.total_steps);
    train->add_option("--epochs", tr_tcfg.epochs, "stop after N epochs instead of total-steps");
    train->add_option("--batch-size", tr_tcfg.batch_size);
    train->add_option("--L", tr_tcfg.L, "packed row length");
    train->add_option("--seed", tr_tcfg.seed);
    train->add_option("--checkpoint-every", tr_tcfg.checkpoint_every);
    train->add_option("--weighting", tr_weighting, "inverse_t|uniform");
    train->add_flag("--include-holdout", tr_include_holdout, "train on held-out pairs too");

    // generate
    std::string ge_ckpt, ge_tok, ge_prompt, ge_prompt_file, ge_engine = "variable";
    DecodeFlags ge_flags;
    auto* generate = app.add_subcommand("generate", "decode one prompt");
    generate->add_option("--checkpoint", ge_ckpt)->required();
    generate->add_option("--tokenizer", ge_tok, "defaults to tokenizer.json beside the checkpoint");
    generate->add_option("--prompt", ge_prompt);
    generate->add_option("--prompt-file", ge_prompt_file);
    generate->add_option("--engine", ge_engine)->check(CLI::IsMember({"variable", "fixed"}));
    ge_flags.attach(generate);

    // bench
    std::string be_ckpt, be_tok, be_data, be_records;
    bool be_holdout = true;
    std::vector<int> be_quotas{1024};
    DecodeFlags be_flags;
    auto* bench = app.add_subcommand("bench", "variable vs fixed engine comparison");
    bench->add_option("--checkpoint", be_ckpt)->required();
    bench->add_option("--tokenizer", be_tok);
    bench->add_option("--data", be_data)->required();
    bench->add_option("--quotas", be_quotas, "fixed-engine quota sweep");
    bench->add_option("--records-out", be_records, "write per-record JSONL here instead of stdout");
    bench->add_flag("--holdout-only,!--all-pairs", be_holdout, "evaluate held-out pairs only");
    be_flags.attach(bench);

    // diagnose
    std::string di_ckpt, di_tok, di_data;
    bool di_holdout = true;
    DecodeFlags di_flags;
    auto* diagnose = app.add_subcommand("diagnose", "EOS behavior diagnostics");
    diagnose->add_option("--checkpoint", di_ckpt)->required();
    diagnose->add_option("--tokenizer", di_tok);
    diagnose->add_option("--data", di_data)->required();
    diagnose->add_flag("--holdout-only,!--all-pairs", di_holdout);
    di_flags.attach(diagnose);

    // probe-cache
    std::string pc_ckpt, pc_tok, pc_prompt;
    double pc_tol = 1e-5;
    DecodeFlags pc_flags;
    auto* probe = app.add_subcommand("probe-cache", "frozen-prefix cache divergence probe");
    probe->add_option("--checkpoint", pc_ckpt)->required();
    probe->add_option("--tokenizer", pc_tok);
    probe->add_option("--prompt", pc_prompt)->required();
    probe->add_option("--tolerance", pc_tol, "max allowed oracle divergence");
    pc_flags.attach(probe);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_corpus(gc_task, gc_min, gc_max, gc_count, gc_alphabet, gc_terminal, gc_seed, gc_out);
        if (pack->parsed()) return cmd_pack_stats(ps_data, ps_L, ps_seed);
        if (train->parsed()) {
            tr_tcfg.weighting = tr_weighting == "uniform" ? LossWeighting::uniform : LossWeighting::inverse_t;
            return cmd_train(tr_data, tr_out, tr_mcfg, tr_tcfg, tr_include_holdout);
        }
        if (generate->parsed())
            return cmd_generate(ge_ckpt, ge_tok, ge_prompt, ge_prompt_file, ge_engine, ge_flags.cfg());
        if (bench->parsed())
            return cmd_bench(be_ckpt, be_tok, be_data, be_holdout, be_quotas, be_flags.cfg(), be_records);
        if (diagnose->parsed()) return cmd_diagnose(di_ckpt, di_tok, di_data, di_holdout, di_flags.cfg());
        if (probe->parsed()) return cmd_probe_cache(pc_ckpt, pc_tok, pc_prompt, pc_flags.cfg(), pc_tol);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
