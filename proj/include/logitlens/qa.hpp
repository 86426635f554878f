#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "logitlens/errors.hpp"
#include "logitlens/lens.hpp"
#include "logitlens/metrics.hpp"
#include "logitlens/model.hpp"
#include "logitlens/refinement.hpp"
#include "logitlens/rng.hpp"
#include "logitlens/tokenizer.hpp"

namespace logitlens {

// Multi-document QA harness: build prompts with a controlled number of
// documents and a controlled gold-document position, run the model, score the
// answers, and sweep positions across seeded runs.

struct Document {
    std::string title;
    std::string text;
};

struct QAInstance {
    std::string id;
    std::string question;
    std::vector<std::string> answers;  // acceptable aliases, first is primary
    Document gold_document;
    std::vector<Document> distractor_pool;
};

/// The prompt layout, kept as one replaceable asset (assets/qa_prompt.json).
struct PromptTemplate {
    std::string version = "liu-qa/1";
    std::string header =
        "Write a high-quality answer for the given question using only the "
        "provided search results (some of which might be irrelevant).";
    std::string document_format = "Document [{index}](Title: {title}) {text}";
    std::string question_format = "Question: {question}";
    std::string answer_cue = "Answer:";

    static PromptTemplate load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw LoadError("cannot open prompt template: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("bad prompt template JSON: " + std::string(e.what()));
        }
        PromptTemplate t;
        t.version = j.at("version").get<std::string>();
        t.header = j.at("header").get<std::string>();
        t.document_format = j.at("document_format").get<std::string>();
        t.question_format = j.at("question_format").get<std::string>();
        t.answer_cue = j.at("answer_cue").get<std::string>();
        return t;
    }

    std::string render(const std::string& question,
                       const std::vector<Document>& documents) const {
        std::string out = header;
        for (std::size_t i = 0; i < documents.size(); ++i) {
            std::string line = document_format;
            replace_all(line, "{index}", std::to_string(i + 1));
            replace_all(line, "{title}", documents[i].title);
            replace_all(line, "{text}", documents[i].text);
            out += "\n" + line;
        }
        std::string q = question_format;
        replace_all(q, "{question}", question);
        out += "\n" + q + "\n" + answer_cue;
        return out;
    }

private:
    static void replace_all(std::string& s, const std::string& from, const std::string& to) {
        for (std::size_t pos = s.find(from); pos != std::string::npos;
             pos = s.find(from, pos + to.size())) {
            s.replace(pos, from.size(), to);
        }
    }
};

/// JSON-lines reader for {"question", "answers", "ctxs": [{title, text, isgold}]}.
inline std::vector<QAInstance> load_qa_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open dataset: " + path);
    std::vector<QAInstance> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("bad JSON on line " + std::to_string(line_no) + " of " + path +
                            ": " + e.what());
        }
        QAInstance inst;
        inst.id = std::to_string(line_no - 1);
        inst.question = j.at("question").get<std::string>();
        inst.answers = j.at("answers").get<std::vector<std::string>>();
        bool have_gold = false;
        for (const auto& ctx : j.at("ctxs")) {
            Document d{ctx.at("title").get<std::string>(), ctx.at("text").get<std::string>()};
            if (!have_gold && ctx.value("isgold", false)) {
                inst.gold_document = std::move(d);
                have_gold = true;
            } else {
                inst.distractor_pool.push_back(std::move(d));
            }
        }
        if (!have_gold) {
            throw LoadError("instance on line " + std::to_string(line_no) +
                            " has no gold document");
        }
        if (inst.answers.empty()) {
            throw LoadError("instance on line " + std::to_string(line_no) + " has no answers");
        }
        out.push_back(std::move(inst));
    }
    return out;
}

/// Assemble a k-document prompt with the gold document at `gold_pos` and
/// seeded, without-replacement distractors in generator order.
inline std::string build_prompt(const QAInstance& instance, int k, int gold_pos, Rng& rng,
                                const PromptTemplate& tmpl = {}) {
    if (k < 1) throw InvalidInputError("k must be >= 1");
    if (gold_pos < 0 || gold_pos >= k) {
        throw InvalidInputError("gold position " + std::to_string(gold_pos) +
                                " outside [0, " + std::to_string(k) + ")");
    }
    if (static_cast<int>(instance.distractor_pool.size()) < k - 1) {
        throw PoolExhaustedError("instance " + instance.id + ": " +
                                 std::to_string(instance.distractor_pool.size()) +
                                 " distractors available, " + std::to_string(k - 1) +
                                 " required");
    }
    const auto picks =
        sample_without_replacement(rng, instance.distractor_pool.size(), k - 1);
    std::vector<Document> docs;
    docs.reserve(k);
    std::size_t di = 0;
    for (int i = 0; i < k; ++i) {
        if (i == gold_pos) {
            docs.push_back(instance.gold_document);
        } else {
            docs.push_back(instance.distractor_pool[picks[di++]]);
        }
    }
    return tmpl.render(instance.question, docs);
}

/// Lowercase, strip punctuation, collapse whitespace, drop English articles.
inline std::string normalize_answer(const std::string& s) {
    std::string lowered;
    lowered.reserve(s.size());
    for (const char c : s) {
        const auto u = static_cast<unsigned char>(c);
        if (u < 128 && std::ispunct(u)) {
            lowered += ' ';
        } else {
            lowered += static_cast<char>(u < 128 ? std::tolower(u) : u);
        }
    }
    std::istringstream words(lowered);
    std::string word, out;
    while (words >> word) {
        if (word == "a" || word == "an" || word == "the") continue;
        if (!out.empty()) out += ' ';
        out += word;
    }
    return out;
}

/// Substring match over normalized text (the documented approximation of
/// best-subspan exact match).
inline bool evaluate_answer(const std::string& generated,
                            const std::vector<std::string>& answers) {
    const std::string gen = normalize_answer(generated);
    for (const std::string& alias : answers) {
        const std::string a = normalize_answer(alias);
        if (a.empty()) continue;
        if (gen.find(a) != std::string::npos) return true;
    }
    return false;
}

/// First token of the primary answer in continuation context (leading space):
/// the id the model must emit first for a correct answer.
inline TokenId gold_first_token(const QAInstance& instance, const Tokenizer& tokenizer) {
    if (instance.answers.empty() || instance.answers[0].empty()) {
        throw InvalidInputError("instance " + instance.id + " has an empty primary answer");
    }
    const std::vector<TokenId> ids = tokenizer.encode(" " + instance.answers[0]);
    return ids.at(0);
}

struct SweepConfig {
    int k_documents = 1;
    std::vector<int> gold_positions;
    int n_runs = 10;
    std::uint64_t seed = 0;
    int max_answer_tokens = 10;
    double confidence = 0.95;
    int workers = 1;
    PromptTemplate prompt;

    void validate() const {
        if (k_documents < 1) throw InvalidInputError("k_documents must be >= 1");
        if (gold_positions.empty()) throw InvalidInputError("no gold positions requested");
        for (const int p : gold_positions) {
            if (p < 0 || p >= k_documents) {
                throw InvalidInputError("gold position " + std::to_string(p) +
                                        " outside [0, " + std::to_string(k_documents) + ")");
            }
        }
        if (n_runs < 1) throw InvalidInputError("n_runs must be >= 1");
        if (max_answer_tokens < 1) throw InvalidInputError("max_answer_tokens must be >= 1");
    }
};

struct InstanceResult {
    int gold_position = 0;
    int run = 0;
    std::string instance_id;
    bool failed = false;    // prompt construction or forward failure
    std::string error;
    bool correct = false;
    std::string generated;  // decoded continuation
    TokenId gold_token = -1;
    RefinementProfile profile;
};

struct RunAccuracy {
    int gold_position = 0;
    int run = 0;
    std::optional<double> accuracy;  // absent when every instance failed
};

struct PositionSummary {
    int gold_position = 0;
    AggregateStat accuracy;        // over per-run accuracies
    AggregateStat first_correct;   // over per-run means of defined profiles
    AggregateStat stabilization;
    AggregateStat depth;
};

struct SweepResult {
    int k_documents = 0;
    int n_runs = 0;
    std::uint64_t seed = 0;
    int max_answer_tokens = 0;
    double confidence = 0.95;
    std::string template_version;
    std::vector<InstanceResult> records;      // (position, run, instance) order
    std::vector<RunAccuracy> run_accuracies;  // (position, run) order
    std::vector<PositionSummary> summaries;   // one per requested position
};

namespace detail {

inline double narrow(double v) { return static_cast<double>(static_cast<float>(v)); }

/// Reported statistics are narrowed to float32 so that serialized tables
/// (9 significant digits) round-trip exactly.
inline AggregateStat narrow(AggregateStat s) {
    s.mean = narrow(s.mean);
    s.ci_low = narrow(s.ci_low);
    s.ci_high = narrow(s.ci_high);
    return s;
}

inline InstanceResult evaluate_instance(const Model& model, const Tokenizer& tokenizer,
                                        const QAInstance& instance,
                                        const SweepConfig& config, int gold_pos,
                                        int run) {
    InstanceResult rec;
    rec.gold_position = gold_pos;
    rec.run = run;
    rec.instance_id = instance.id;
    try {
        Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(run), instance.id));
        const std::string prompt =
            build_prompt(instance, config.k_documents, gold_pos, rng, config.prompt);
        const std::vector<TokenId> prompt_ids = tokenizer.encode(prompt);
        if (static_cast<int>(prompt_ids.size()) + config.max_answer_tokens >
            model.config().max_context) {
            throw ContextOverflowError("prompt of " + std::to_string(prompt_ids.size()) +
                                       " tokens leaves no room for the answer");
        }
        rec.gold_token = gold_first_token(instance, tokenizer);

        HiddenStateTrace trace;
        Decoder decoder(model);
        Mat logits = decoder.feed(prompt_ids, &trace);
        const int last = static_cast<int>(prompt_ids.size()) - 1;
        rec.profile = refinement_profile(top1_by_layer(model, trace, last), rec.gold_token);

        // greedy continuation from the cached prompt; stops at end-of-text or
        // the first token containing a line break (short-answer extraction)
        std::vector<TokenId> generated;
        for (int step = 0; step < config.max_answer_tokens; ++step) {
            const Vec row = logits.row(logits.rows() - 1);
            const TokenId next = top1_token(lens_distribution(row));
            if (tokenizer.eot_id() && next == *tokenizer.eot_id()) break;
            if (tokenizer.is_newline_token(next)) break;
            generated.push_back(next);
            if (step + 1 < config.max_answer_tokens &&
                decoder.length() < model.config().max_context) {
                logits = decoder.feed(std::span<const TokenId>(&generated.back(), 1));
            } else {
                break;
            }
        }
        rec.generated = tokenizer.decode(generated);
        rec.correct = evaluate_answer(rec.generated, instance.answers);
    } catch (const Error& e) {
        rec.failed = true;
        rec.error = e.what();
    }
    return rec;
}

}  // namespace detail

/// Run the full position sweep. Instances, runs and positions are independent
/// work units executed by `config.workers` threads; results are identical for
/// any worker count because every unit writes its own slot and aggregation
/// happens over the fixed (position, run, instance) order.
inline SweepResult run_sweep(const Model& model, const Tokenizer& tokenizer,
                             const std::vector<QAInstance>& dataset,
                             const SweepConfig& config) {
    config.validate();
    if (dataset.empty()) throw EmptyInputError("empty QA dataset");

    const int n_pos = static_cast<int>(config.gold_positions.size());
    const int n_inst = static_cast<int>(dataset.size());
    const std::size_t n_units =
        static_cast<std::size_t>(n_pos) * config.n_runs * n_inst;

    SweepResult result;
    result.k_documents = config.k_documents;
    result.n_runs = config.n_runs;
    result.seed = config.seed;
    result.max_answer_tokens = config.max_answer_tokens;
    result.confidence = config.confidence;
    result.template_version = config.prompt.version;
    result.records.resize(n_units);

    std::atomic<std::size_t> next_unit{0};
    const int n_workers = std::max(1, config.workers);
    auto work = [&]() {
        for (;;) {
            const std::size_t u = next_unit.fetch_add(1);
            if (u >= n_units) return;
            const int pi = static_cast<int>(u / (static_cast<std::size_t>(config.n_runs) * n_inst));
            const int rest = static_cast<int>(u % (static_cast<std::size_t>(config.n_runs) * n_inst));
            const int run = rest / n_inst;
            const int ii = rest % n_inst;
            result.records[u] = detail::evaluate_instance(
                model, tokenizer, dataset[ii], config, config.gold_positions[pi], run);
        }
    };
    if (n_workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(n_workers);
        for (int w = 0; w < n_workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    // aggregation over the deterministic record order
    for (int pi = 0; pi < n_pos; ++pi) {
        std::vector<std::optional<double>> run_acc, run_first, run_stable, run_depth;
        for (int run = 0; run < config.n_runs; ++run) {
            int n_scored = 0, n_correct = 0;
            std::vector<double> firsts, stables, depths;
            for (int ii = 0; ii < n_inst; ++ii) {
                const std::size_t u =
                    (static_cast<std::size_t>(pi) * config.n_runs + run) * n_inst + ii;
                const InstanceResult& rec = result.records[u];
                if (rec.failed) continue;
                ++n_scored;
                n_correct += rec.correct ? 1 : 0;
                if (rec.profile.first_correct_layer)
                    firsts.push_back(*rec.profile.first_correct_layer);
                if (rec.profile.stabilization_layer)
                    stables.push_back(*rec.profile.stabilization_layer);
                if (rec.profile.depth) depths.push_back(*rec.profile.depth);
            }
            const auto mean_of = [](const std::vector<double>& v) -> std::optional<double> {
                if (v.empty()) return std::nullopt;
                double s = 0.0;
                for (const double x : v) s += x;
                return detail::narrow(s / static_cast<double>(v.size()));
            };
            run_acc.push_back(n_scored > 0
                                  ? std::optional<double>(detail::narrow(
                                        static_cast<double>(n_correct) / n_scored))
                                  : std::nullopt);
            run_first.push_back(mean_of(firsts));
            run_stable.push_back(mean_of(stables));
            run_depth.push_back(mean_of(depths));
            RunAccuracy ra;
            ra.gold_position = config.gold_positions[pi];
            ra.run = run;
            ra.accuracy = run_acc.back();
            result.run_accuracies.push_back(ra);
        }
        PositionSummary ps;
        ps.gold_position = config.gold_positions[pi];
        ps.accuracy = detail::narrow(aggregate_present(run_acc, config.confidence));
        ps.first_correct = detail::narrow(aggregate_present(run_first, config.confidence));
        ps.stabilization = detail::narrow(aggregate_present(run_stable, config.confidence));
        ps.depth = detail::narrow(aggregate_present(run_depth, config.confidence));
        result.summaries.push_back(ps);
    }
    return result;
}

}  // namespace logitlens
