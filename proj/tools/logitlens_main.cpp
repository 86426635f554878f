// Command-line front end: single-text lens heatmaps, multi-document QA
// position sweeps, and per-layer probe-vs-lens accuracy tables.
//
// Exit codes: 0 success, 1 usage or invalid input, 2 model/data load failure,
// 3 numerics failure.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "logitlens/lens.hpp"
#include "logitlens/manifest.hpp"
#include "logitlens/metrics.hpp"
#include "logitlens/model.hpp"
#include "logitlens/probe.hpp"
#include "logitlens/qa.hpp"
#include "logitlens/report.hpp"
#include "logitlens/tokenizer.hpp"
#include "logitlens/version.hpp"

namespace fs = std::filesystem;
using namespace logitlens;

namespace {

struct LoadedModel {
    ModelConfig config;
    std::unique_ptr<Model> model;
    std::unique_ptr<Tokenizer> tokenizer;
};

LoadedModel load_model_dir(const std::string& dir) {
    LoadedModel lm;
    lm.config = ModelConfig::from_json_file(dir + "/config.json");
    lm.model = std::make_unique<Model>(
        load_checkpoint(dir + "/model.safetensors", lm.config));
    lm.tokenizer = std::make_unique<Tokenizer>(dir + "/vocab.json", dir + "/merges.txt");
    return lm;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open text file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void add_model_inputs(RunManifest& manifest, const std::string& model_dir) {
    for (const char* name : {"config.json", "model.safetensors", "vocab.json", "merges.txt"}) {
        manifest.add_input(model_dir + "/" + name);
    }
}

std::vector<int> parse_layers(const std::string& spec, int n_layers) {
    std::vector<int> layers;
    if (spec == "all") {
        for (int l = 0; l <= n_layers; ++l) layers.push_back(l);
        return layers;
    }
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        layers.push_back(std::stoi(item));
    }
    if (layers.empty()) throw InvalidInputError("no layers requested");
    return layers;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_lens(const std::string& model_dir, const std::string& out_dir,
             const std::string& text_arg, const std::string& text_file,
             const std::string& metric, const std::string& template_path) {
    const auto t0 = std::chrono::steady_clock::now();
    const MetricKind kind = metric_from_name(metric);
    const std::string text = !text_file.empty() ? read_text_file(text_file) : text_arg;

    LoadedModel lm = load_model_dir(model_dir);
    PromptTemplate tmpl;  // lens does not use the template; kept for parity of flags
    (void)tmpl;

    const std::vector<TokenId> ids = lm.tokenizer->encode(text);
    if (ids.empty()) throw InvalidInputError("input text produced no tokens");
    const HiddenStateTrace trace = forward_with_taps(*lm.model, ids);

    std::optional<std::vector<TokenId>> gold_next;
    if (kind == MetricKind::cross_entropy) {
        gold_next.emplace(ids.begin() + 1, ids.end());
    }
    const auto namer = [&](TokenId id) { return lm.tokenizer->token_string(id); };
    const HeatmapGrid grid = build_heatmap(*lm.model, trace, kind, gold_next, namer, ids);
    const Tables tables = export_tables(grid);

    fs::create_directories(out_dir);
    atomic_write_file(out_dir + "/heatmap.svg", render_svg(grid));
    atomic_write_file(out_dir + "/heatmap.csv", tables.csv);
    atomic_write_file(out_dir + "/heatmap.json", tables.json);

    RunManifest manifest;
    manifest.command = "lens";
    manifest.config = {{"model", model_dir},
                       {"metric", metric},
                       {"text", text},
                       {"n_tokens", ids.size()}};
    add_model_inputs(manifest, model_dir);
    if (!text_file.empty()) manifest.add_input(text_file);
    manifest.outputs = {"heatmap.svg", "heatmap.csv", "heatmap.json"};
    manifest.wall_seconds = seconds_since(t0);
    manifest.write(out_dir + "/manifest.json");
    std::cout << "lens: " << grid.rows.size() << "x" << grid.n_positions()
              << " grid written to " << out_dir << "\n";
    return 0;
}

int cmd_sweep(const std::string& model_dir, const std::string& out_dir,
              const std::string& dataset_path, int k, const std::vector<int>& positions,
              int runs, std::uint64_t seed, int max_answer_tokens, double confidence,
              int workers, int max_instances, const std::string& template_path) {
    const auto t0 = std::chrono::steady_clock::now();
    LoadedModel lm = load_model_dir(model_dir);
    std::vector<QAInstance> dataset = load_qa_jsonl(dataset_path);
    if (max_instances > 0 && static_cast<int>(dataset.size()) > max_instances) {
        dataset.resize(max_instances);
    }

    SweepConfig config;
    config.k_documents = k;
    config.gold_positions = positions;
    config.n_runs = runs;
    config.seed = seed;
    config.max_answer_tokens = max_answer_tokens;
    config.confidence = confidence;
    config.workers = workers;
    if (!template_path.empty()) config.prompt = PromptTemplate::load(template_path);

    const SweepResult result = run_sweep(*lm.model, *lm.tokenizer, dataset, config);
    const Tables tables = export_tables(result);

    fs::create_directories(out_dir);
    atomic_write_file(out_dir + "/sweep.json", tables.json);
    atomic_write_file(out_dir + "/sweep.csv", tables.csv);

    RunManifest manifest;
    manifest.command = "sweep";
    manifest.seed = seed;
    manifest.config = {{"model", model_dir},
                       {"dataset", dataset_path},
                       {"k", k},
                       {"positions", positions},
                       {"runs", runs},
                       {"seed", std::to_string(seed)},
                       {"max_answer_tokens", max_answer_tokens},
                       {"confidence", confidence},
                       {"max_instances", max_instances},
                       {"instances_used", dataset.size()},
                       {"template_version", config.prompt.version}};
    add_model_inputs(manifest, model_dir);
    manifest.add_input(dataset_path);
    if (!template_path.empty()) manifest.add_input(template_path);
    manifest.outputs = {"sweep.json", "sweep.csv"};
    manifest.wall_seconds = seconds_since(t0);
    manifest.write(out_dir + "/manifest.json");

    for (const PositionSummary& s : result.summaries) {
        std::cout << "position " << s.gold_position << ": accuracy "
                  << s.accuracy.mean << " [" << s.accuracy.ci_low << ", "
                  << s.accuracy.ci_high << "]\n";
    }
    return 0;
}

std::string probe_csv(const std::vector<LayerAccuracy>& curves) {
    std::string out = "layer,probe_accuracy,lens_accuracy,lens_accuracy_unrestricted\n";
    for (const LayerAccuracy& c : curves) {
        out += std::to_string(c.layer) + "," + detail::fmt_g9(c.probe_accuracy) + "," +
               detail::fmt_g9(c.lens_accuracy) + "," +
               detail::fmt_g9(c.lens_accuracy_unrestricted) + "\n";
    }
    return out;
}

std::string probe_json(const std::vector<LayerAccuracy>& curves) {
    std::string out = "{\"schema\":\"logitlens.probe/1\",\"curves\":[";
    for (std::size_t i = 0; i < curves.size(); ++i) {
        if (i) out += ",";
        out += "{\"layer\":" + std::to_string(curves[i].layer) +
               ",\"probe_accuracy\":" + detail::fmt_g9(curves[i].probe_accuracy) +
               ",\"lens_accuracy\":" + detail::fmt_g9(curves[i].lens_accuracy) +
               ",\"lens_accuracy_unrestricted\":" +
               detail::fmt_g9(curves[i].lens_accuracy_unrestricted) + "}";
    }
    out += "]}\n";
    return out;
}

int cmd_probe(const std::string& model_dir, const std::string& out_dir,
              const std::string& dataset_path, const std::string& layers_spec, int k,
              int gold_pos, std::uint64_t seed, std::uint64_t split_seed, int epochs,
              double lr, double l2, bool export_hidden, const std::string& from_hidden,
              int max_instances) {
    const auto t0 = std::chrono::steady_clock::now();
    LoadedModel lm = load_model_dir(model_dir);
    const std::vector<int> layers = parse_layers(layers_spec, lm.config.n_layers);

    ProbeTrainConfig train_config;
    train_config.epochs = epochs;
    train_config.learning_rate = lr;
    train_config.l2_penalty = l2;

    HiddenStateDataset ds;
    RunManifest manifest;
    if (!from_hidden.empty()) {
        ds = load_hidden_states(from_hidden + ".safetensors", from_hidden + ".json");
        manifest.add_input(from_hidden + ".safetensors");
        manifest.add_input(from_hidden + ".json");
    } else {
        std::vector<QAInstance> dataset = load_qa_jsonl(dataset_path);
        if (max_instances > 0 && static_cast<int>(dataset.size()) > max_instances) {
            dataset.resize(max_instances);
        }
        ProbePromptOptions opts;
        opts.k_documents = k;
        opts.gold_position = gold_pos;
        opts.seed = seed;
        ds = collect_hidden_states(*lm.model, *lm.tokenizer, dataset, layers, opts);
        manifest.add_input(dataset_path);
    }
    const std::vector<LayerAccuracy> curves =
        layer_accuracy_curves(*lm.model, ds, split_seed, train_config);

    fs::create_directories(out_dir);
    atomic_write_file(out_dir + "/probe.csv", probe_csv(curves));
    atomic_write_file(out_dir + "/probe.json", probe_json(curves));
    manifest.outputs = {"probe.csv", "probe.json"};
    if (export_hidden) {
        save_hidden_states(out_dir + "/hidden.safetensors", out_dir + "/hidden.json", ds);
        manifest.outputs.push_back("hidden.safetensors");
        manifest.outputs.push_back("hidden.json");
    }

    manifest.command = "probe";
    manifest.seed = seed;
    manifest.config = {{"model", model_dir},
                       {"dataset", dataset_path},
                       {"layers", layers},
                       {"k", k},
                       {"gold_pos", gold_pos},
                       {"seed", std::to_string(seed)},
                       {"split_seed", std::to_string(split_seed)},
                       {"epochs", epochs},
                       {"learning_rate", lr},
                       {"l2_penalty", l2},
                       {"from_hidden", from_hidden},
                       {"max_instances", max_instances}};
    add_model_inputs(manifest, model_dir);
    manifest.wall_seconds = seconds_since(t0);
    manifest.write(out_dir + "/manifest.json");

    for (const LayerAccuracy& c : curves) {
        std::cout << "layer " << c.layer << ": probe " << c.probe_accuracy << ", lens "
                  << c.lens_accuracy << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"logit-lens toolkit: layer-wise prediction refinement analysis"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    const char* env_model = std::getenv("LOGITLENS_MODEL_DIR");
    const std::string default_model = env_model ? env_model : "";

    std::string model_dir = default_model, out_dir = "out", template_path;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--model", model_dir, "model directory (config.json, "
                        "model.safetensors, vocab.json, merges.txt)")
            ->required(default_model.empty());
        sub->add_option("--out", out_dir, "output directory");
    };

    // lens
    auto* lens = app.add_subcommand("lens", "single-text logit-lens heatmap");
    std::string text, text_file, metric = "max_prob";
    add_common(lens);
    lens->add_option("--text", text, "input text");
    lens->add_option("--text-file", text_file, "read input text from a file");
    lens->add_option("--metric", metric, "max_prob | cross_entropy | forward_kl")
        ->check(CLI::IsMember({"max_prob", "cross_entropy", "forward_kl"}));

    // sweep
    auto* sweep = app.add_subcommand("sweep", "multi-document QA position sweep");
    std::string dataset;
    int k = 1, runs = 10, max_answer_tokens = 10, workers = 0, max_instances = 0;
    std::vector<int> positions;
    std::uint64_t seed = 0;
    double confidence = 0.95;
    add_common(sweep);
    sweep->add_option("--dataset", dataset, "QA dataset (JSON lines)")->required();
    sweep->add_option("--k", k, "documents per prompt")->required();
    sweep->add_option("--positions", positions, "gold document positions")
        ->required()
        ->delimiter(',');
    sweep->add_option("--runs", runs, "independent runs (default 10)");
    sweep->add_option("--seed", seed, "base seed");
    sweep->add_option("--max-answer-tokens", max_answer_tokens, "answer length limit");
    sweep->add_option("--confidence", confidence, "CI level (default 0.95)");
    sweep->add_option("--workers", workers, "worker threads (default: hardware)");
    sweep->add_option("--max-instances", max_instances, "use only the first N instances");
    sweep->add_option("--template", template_path, "prompt template JSON");

    // probe
    auto* probe = app.add_subcommand("probe", "per-layer probe vs lens accuracy");
    std::string layers_spec = "all", from_hidden;
    int probe_k = 1, gold_pos = 0, epochs = 500;
    double lr = 0.1, l2 = 1e-3;
    std::uint64_t split_seed = 1;
    bool export_hidden = false;
    add_common(probe);
    probe->add_option("--dataset", dataset, "QA dataset (JSON lines)");
    probe->add_option("--layers", layers_spec, "'all' or comma-separated layer indices");
    probe->add_option("--k", probe_k, "documents per probing prompt");
    probe->add_option("--gold-pos", gold_pos, "gold position in probing prompts");
    probe->add_option("--seed", seed, "prompt-sampling seed");
    probe->add_option("--split-seed", split_seed, "train/holdout split seed");
    probe->add_option("--epochs", epochs, "probe training epochs");
    probe->add_option("--lr", lr, "probe learning rate");
    probe->add_option("--l2", l2, "probe L2 penalty");
    probe->add_flag("--export-hidden", export_hidden, "write hidden states + sidecar");
    probe->add_option("--from-hidden", from_hidden,
                      "recompute curves from exported hidden states (path prefix)");
    probe->add_option("--max-instances", max_instances, "use only the first N instances");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (lens->parsed()) {
            if (text.empty() && text_file.empty()) {
                std::cerr << "error: one of --text / --text-file is required\n";
                return 1;
            }
            return cmd_lens(model_dir, out_dir, text, text_file, metric, template_path);
        }
        if (sweep->parsed()) {
            if (workers <= 0) {
                workers = static_cast<int>(std::thread::hardware_concurrency());
                if (workers <= 0) workers = 1;
            }
            return cmd_sweep(model_dir, out_dir, dataset, k, positions, runs, seed,
                             max_answer_tokens, confidence, workers, max_instances,
                             template_path);
        }
        if (probe->parsed()) {
            if (dataset.empty() && from_hidden.empty()) {
                std::cerr << "error: one of --dataset / --from-hidden is required\n";
                return 1;
            }
            return cmd_probe(model_dir, out_dir, dataset, layers_spec, probe_k, gold_pos,
                             seed, split_seed, epochs, lr, l2, export_hidden, from_hidden,
                             max_instances);
        }
    } catch (const LoadError& e) {
        std::cerr << "load error: " << e.what() << "\n";
        return 2;
    } catch (const NumericsError& e) {
        std::cerr << "numerics error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
