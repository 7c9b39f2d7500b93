#include "ef/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ef/cost.hpp"
#include "ef/distill.hpp"
#include "ef/experiment.hpp"
#include "ef/quant.hpp"

namespace ef::cli {

namespace fs = std::filesystem;

namespace {

const char kUsage[] =
    "usage: efctl <command> [--config FILE] [--preset NAME] [--section.key value ...]\n"
    "\n"
    "commands:\n"
    "  analyze       parameter/FLOPS report with budget verdicts (--n-src/--n-tgt, --out DIR)\n"
    "  repro-tables  check every preset against the embedded golden tables\n"
    "  gen-data      write synthetic task corpora (--out DIR)\n"
    "  train         train on a gen-data directory (--data DIR, --out DIR)\n"
    "  distill       teacher beam-decodes a source file (--teacher CKPT, --src FILE, --out DIR)\n"
    "  decode        decode a source file (--checkpoint CKPT, --src FILE, --out FILE)\n"
    "  quantize      int8-quantize a checkpoint (--checkpoint CKPT, --out FILE)\n"
    "  eval          score outputs (--metric M, --checkpoint CKPT --src F --ref F | --hyp F --ref F)\n"
    "\n"
    "presets: edgeformer-{384,512,768}, full-6+6-*, full-12+2-*, ut-12+2-*, LA and\n"
    "load variants (see `efctl analyze --help-presets`).\n";

std::string require_flag(const Args& args, const std::string& name) {
    auto it = args.flags.find(name);
    if (it == args.flags.end()) throw config_error("command '" + args.command + "' requires --" + name);
    return it->second;
}

std::string flag_or(const Args& args, const std::string& name, const std::string& dflt) {
    auto it = args.flags.find(name);
    return it == args.flags.end() ? dflt : it->second;
}

ExperimentConfig build_config(const Args& args) {
    ExperimentConfig cfg;
    if (args.flags.count("config")) cfg = load_experiment(args.flags.at("config"));
    if (args.flags.count("preset")) cfg.model = preset(args.flags.at("preset"));
    for (const auto& [k, v] : args.overrides) apply_override(cfg, k, v);
    return cfg;
}

void write_manifest(const std::string& dir, const std::string& command, const ExperimentConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& inputs) {
    std::ofstream os(dir + "/manifest.json");
    if (!os) throw io_error("cannot write manifest in " + dir);
    os << manifest_json(command, cfg, inputs);
}

struct LoadedModel {
    ModelConfig cfg;
    TyingPlan plan;
    Vocab vocab;
    ParamStore<float> store;
    std::unique_ptr<Model<float>> model;
};

std::unique_ptr<LoadedModel> load_model(const std::string& ckpt_path) {
    auto lm = std::make_unique<LoadedModel>();
    const std::string header = read_checkpoint_header(ckpt_path);
    lm->cfg = model_from_header(header, &lm->vocab);
    lm->plan = build_plan(lm->cfg);
    lm->store = init_params<float>(lm->plan, lm->cfg, 0);
    load_checkpoint(ckpt_path, lm->store);
    lm->model = std::make_unique<Model<float>>(lm->cfg, lm->plan, lm->store);
    return lm;
}

std::unique_ptr<LoadedModel> load_quantized_model(const std::string& path) {
    auto lm = std::make_unique<LoadedModel>();
    std::string header;
    auto qs = load_quantized(path, &header);
    lm->cfg = model_from_header(header, &lm->vocab);
    lm->plan = build_plan(lm->cfg);
    lm->store = dequantize_store(qs);
    lm->model = std::make_unique<Model<float>>(lm->cfg, lm->plan, lm->store);
    return lm;
}

void run_analyze(const Args& args, std::ostream& out) {
    const ExperimentConfig cfg = build_config(args);
    const int n_src = std::stoi(flag_or(args, "n-src", "30"));
    const int n_tgt = std::stoi(flag_or(args, "n-tgt", "30"));
    const TyingPlan plan = build_plan(cfg.model);
    const CostReport report = analyze_cost(cfg.model, plan, n_src, n_tgt);
    out << format_report(report);
    if (args.flags.count("out")) {
        const std::string dir = args.flags.at("out");
        fs::create_directories(dir);
        std::ofstream kv(dir + "/report.kv");
        kv << machine_report(report);
        std::ofstream txt(dir + "/report.txt");
        txt << format_report(report);
        save_experiment(cfg, dir + "/config.json");
        write_manifest(dir, "analyze", cfg, {});
    }
}

void run_repro_tables(std::ostream& out) {
    const auto cells = repro_tables();
    size_t failures = 0;
    std::string last_table;
    for (const auto& c : cells) {
        if (c.table != last_table) {
            out << "== " << c.table << "\n";
            last_table = c.table;
        }
        out << "  " << std::left << std::setw(34) << c.row << std::setw(8) << c.metric << " golden "
            << std::setw(10) << c.golden << " actual " << std::setw(12) << c.actual
            << (c.pass ? " PASS" : " FAIL") << "\n";
        failures += !c.pass;
    }
    out << cells.size() << " cells, " << failures << " mismatches\n";
    if (failures > 0) throw verify_error(std::to_string(failures) + " golden cells mismatched");
}

void run_gen_data(const Args& args, std::ostream& out) {
    ExperimentConfig cfg = build_config(args);
    const std::string dir = flag_or(args, "out", cfg.out_dir);
    fs::create_directories(dir);
    const GeneratedData data = gen_data(cfg.task);
    save_corpus(data.train, dir + "/train.src", dir + "/train.tgt");
    save_corpus(data.dev, dir + "/dev.src", dir + "/dev.tgt");
    save_corpus(data.test, dir + "/test.src", dir + "/test.tgt");
    save_vocab(data.vocab, dir + "/vocab.txt");
    save_experiment(cfg, dir + "/config.json");
    write_manifest(dir, "gen-data", cfg, {});
    out << "task " << to_string(cfg.task.task) << ": " << data.train.size() << " train / "
        << data.dev.size() << " dev / " << data.test.size() << " test, vocab " << data.vocab.size()
        << " -> " << dir << "\n";
}

int longest_line_tokens(const Corpus& c) {
    int longest = 0;
    for (const auto& [s, t] : c.pairs) {
        int n = 1;
        for (char ch : s) n += ch == ' ';
        longest = std::max(longest, n);
        n = 1;
        for (char ch : t) n += ch == ' ';
        longest = std::max(longest, n);
    }
    return longest;
}

void run_train(const Args& args, std::ostream& out) {
    ExperimentConfig cfg = build_config(args);
    const std::string data_dir = require_flag(args, "data");
    const std::string dir = flag_or(args, "out", cfg.out_dir);
    const Vocab vocab = load_vocab(data_dir + "/vocab.txt");
    const Corpus train_corpus = load_corpus(data_dir + "/train.src", data_dir + "/train.tgt");
    Corpus dev_corpus;
    if (fs::exists(data_dir + "/dev.src"))
        dev_corpus = load_corpus(data_dir + "/dev.src", data_dir + "/dev.tgt");

    cfg.model.vocab = static_cast<int>(vocab.size());
    const int needed = longest_line_tokens(train_corpus) + 2;
    cfg.model.max_len = std::max(cfg.model.max_len, needed);

    fs::create_directories(dir + "/checkpoints");
    fs::create_directories(dir + "/logs");
    const TyingPlan plan = build_plan(cfg.model);
    auto store = init_params<float>(plan, cfg.model, cfg.seed);
    Model<float> model(cfg.model, plan, store);

    std::ofstream log(dir + "/logs/train.log");
    struct Tee : std::ostream, std::streambuf {
        std::ostream &a, &b;
        Tee(std::ostream& a, std::ostream& b) : std::ostream(this), a(a), b(b) {}
        int overflow(int c) override {
            a.put(static_cast<char>(c));
            b.put(static_cast<char>(c));
            return c;
        }
    } tee(log, out);

    const std::string header = checkpoint_header(cfg.model, &vocab, cfg.train.max_steps);
    const auto res = train(model, train_corpus, dev_corpus.pairs.empty() ? nullptr : &dev_corpus, vocab,
                           cfg.train, &tee, dir + "/checkpoints", header);

    save_experiment(cfg, dir + "/config.json");
    std::vector<std::pair<std::string, std::string>> inputs{
        {"train.src", data_dir + "/train.src"}, {"train.tgt", data_dir + "/train.tgt"},
        {"vocab", data_dir + "/vocab.txt"}};
    write_manifest(dir, "train", cfg, inputs);
    out << "trained " << res.steps << " steps, final loss " << res.final_loss << " -> " << dir
        << "/checkpoints/last.ckpt\n";
}

void run_distill(const Args& args, std::ostream& out) {
    ExperimentConfig cfg = build_config(args);
    const std::string ckpt = require_flag(args, "teacher");
    const std::string src_path = require_flag(args, "src");
    const std::string dir = flag_or(args, "out", cfg.out_dir);

    auto teacher = load_model(ckpt);
    if (args.flags.count("expect-vocab")) {
        const Vocab expected = load_vocab(args.flags.at("expect-vocab"));
        if (expected.tokens != teacher->vocab.tokens)
            throw config_error("teacher/student vocabulary mismatch");
    }
    const auto sources = read_lines(src_path);
    DistillJob job;
    job.decode = cfg.decode;
    const Corpus distilled = seq_kd(*teacher->model, teacher->vocab, sources, job);

    fs::create_directories(dir);
    save_corpus(distilled, dir + "/train.src", dir + "/train.tgt");
    save_vocab(teacher->vocab, dir + "/vocab.txt");
    write_manifest(dir, "distill", cfg, {{"teacher", ckpt}, {"sources", src_path}});
    out << "distilled " << distilled.size() << " pairs (beam " << cfg.decode.beam << ") -> " << dir
        << "\n";
}

void run_decode(const Args& args, std::ostream& out) {
    const ExperimentConfig cfg = build_config(args);
    const std::string ckpt = require_flag(args, "checkpoint");
    const std::string src_path = require_flag(args, "src");
    auto lm = load_model(ckpt);
    const auto hyps = decode_corpus(*lm->model, lm->vocab, read_lines(src_path), cfg.decode);
    if (args.flags.count("out")) {
        write_lines(args.flags.at("out"), hyps);
        out << "decoded " << hyps.size() << " lines -> " << args.flags.at("out") << "\n";
    } else {
        for (const auto& h : hyps) out << h << "\n";
    }
}

void run_quantize(const Args& args, std::ostream& out) {
    const std::string ckpt = require_flag(args, "checkpoint");
    const std::string dest = require_flag(args, "out");
    auto lm = load_model(ckpt);
    const auto qs = quantize_store(lm->store);
    save_quantized(dest, qs, read_checkpoint_header(ckpt));
    const auto r = quant_size_report(qs);
    out << "weight_f32_bytes=" << r.weight_f32_bytes << "\n";
    out << "weight_int8_bytes=" << r.weight_int8_bytes << "\n";
    out << "scale_bytes=" << r.scale_bytes << "\n";
    out << "raw_f32_bytes=" << r.raw_f32_bytes << "\n";
    out << "int8_ratio=" << std::fixed << std::setprecision(4)
        << static_cast<double>(r.weight_int8_bytes) / static_cast<double>(r.weight_f32_bytes) << "\n";
}

void run_eval(const Args& args, std::ostream& out) {
    const ExperimentConfig cfg = build_config(args);
    const std::string metric_name = flag_or(args, "metric", "exact_match");
    const EvalMetric metric = eval_metric_from(metric_name);

    double score = 0;
    if (args.flags.count("hyp")) {
        const auto hyps = read_lines(args.flags.at("hyp"));
        const auto refs = read_lines(require_flag(args, "ref"));
        if (metric == EvalMetric::token_accuracy)
            throw config_error("token_accuracy needs a model; use --checkpoint");
        score = metric == EvalMetric::exact_match ? exact_match(hyps, refs) : corpus_bleu(hyps, refs);
    } else {
        std::unique_ptr<LoadedModel> lm = args.flags.count("quantized")
                                              ? load_quantized_model(args.flags.at("quantized"))
                                              : load_model(require_flag(args, "checkpoint"));
        const Corpus corpus = load_corpus(require_flag(args, "src"), require_flag(args, "ref"));
        score = evaluate_metric(*lm->model, corpus, lm->vocab, metric, cfg.decode);
    }
    out << metric_name << "=" << std::setprecision(10) << score << "\n";
}

}  // namespace

Args parse_args(int argc, const char* const* argv) {
    Args args;
    if (argc < 2) throw config_error(std::string("missing command\n") + kUsage);
    args.command = argv[1];
    for (int i = 2; i < argc; ++i) {
        std::string key = argv[i];
        if (key.rfind("--", 0) != 0) throw config_error("unexpected argument: " + key);
        key = key.substr(2);
        std::string value;
        const auto eq = key.find('=');
        if (eq != std::string::npos) {
            value = key.substr(eq + 1);
            key = key.substr(0, eq);
        } else {
            if (i + 1 >= argc) throw config_error("flag --" + key + " needs a value");
            value = argv[++i];
        }
        if (key.find('.') != std::string::npos)
            args.overrides.emplace_back(key, value);
        else
            args.flags[key] = value;
    }
    return args;
}

void run(const Args& args, std::ostream& out) {
    if (args.command == "analyze") return run_analyze(args, out);
    if (args.command == "repro-tables") return run_repro_tables(out);
    if (args.command == "gen-data") return run_gen_data(args, out);
    if (args.command == "train") return run_train(args, out);
    if (args.command == "distill") return run_distill(args, out);
    if (args.command == "decode") return run_decode(args, out);
    if (args.command == "quantize") return run_quantize(args, out);
    if (args.command == "eval") return run_eval(args, out);
    if (args.command == "help" || args.command == "--help") {
        out << kUsage;
        return;
    }
    throw config_error("unknown command '" + args.command + "'\n" + kUsage);
}

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    try {
        run(parse_args(argc, argv), out);
        return 0;
    } catch (const verify_error& e) {
        err << "verification failure: " << e.what() << "\n";
        return 3;
    } catch (const io_error& e) {
        err << "i/o error: " << e.what() << "\n";
        return 2;
    } catch (const config_error& e) {
        err << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace ef::cli
