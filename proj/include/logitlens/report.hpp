#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "logitlens/errors.hpp"
#include "logitlens/metrics.hpp"
#include "logitlens/model.hpp"
#include "logitlens/qa.hpp"

namespace logitlens {

// Layer x position heatmaps as SVG plus flat CSV/JSON tables for both
// heatmaps and sweep results. All emission is deterministic: fixed key
// order, fixed 9-significant-digit numeric formatting (exact for the
// float32-precision values this library reports), LF line endings.

enum class MetricKind { max_prob, cross_entropy, forward_kl };

inline const char* metric_name(MetricKind kind) {
    switch (kind) {
        case MetricKind::max_prob: return "max_prob";
        case MetricKind::cross_entropy: return "cross_entropy";
        case MetricKind::forward_kl: return "forward_kl";
    }
    return "?";
}

inline MetricKind metric_from_name(const std::string& name) {
    if (name == "max_prob") return MetricKind::max_prob;
    if (name == "cross_entropy") return MetricKind::cross_entropy;
    if (name == "forward_kl") return MetricKind::forward_kl;
    throw InvalidInputError("unknown metric: " + name);
}

struct HeatmapCell {
    TokenId token_id = -1;  // lens top-1 at this (layer, position)
    std::string token;      // display form of that token
    float value = 0.0f;

    bool operator==(const HeatmapCell&) const = default;
};

struct HeatmapGrid {
    MetricKind metric = MetricKind::max_prob;
    bool darker_is_higher = true;  // color polarity: true only for max_prob
    std::vector<std::vector<HeatmapCell>> rows;  // rows[layer][position]
    std::vector<std::string> column_labels;      // input token per column

    int n_layers() const { return static_cast<int>(rows.size()) - 1; }
    int n_positions() const { return rows.empty() ? 0 : static_cast<int>(rows[0].size()); }

    bool operator==(const HeatmapGrid&) const = default;
};

using TokenNamer = std::function<std::string(TokenId)>;

/// Fill a grid from layer_sweep at every position. For cross-entropy the gold
/// next token per position is required and the grid spans the positions that
/// have one; the other metrics span all positions.
inline HeatmapGrid build_heatmap(const Model& model, const HiddenStateTrace& trace,
                                 MetricKind kind,
                                 const std::optional<std::vector<TokenId>>& gold_next = {},
                                 const TokenNamer& namer = {},
                                 const std::vector<TokenId>& input_tokens = {}) {
    const int n = trace.n_positions();
    int n_cols = n;
    if (kind == MetricKind::cross_entropy) {
        if (!gold_next) {
            throw InvalidInputError("cross-entropy heatmap requires gold next tokens");
        }
        n_cols = std::min<int>(n, static_cast<int>(gold_next->size()));
        if (n_cols == 0) {
            throw InvalidInputError("cross-entropy heatmap: no position has a gold "
                                    "next token (input too short)");
        }
    }
    const auto name_of = [&](TokenId id) {
        return namer ? namer(id) : std::to_string(id);
    };

    HeatmapGrid grid;
    grid.metric = kind;
    grid.darker_is_higher = kind == MetricKind::max_prob;
    grid.rows.assign(trace.n_layers() + 1, std::vector<HeatmapCell>(n_cols));
    for (int pos = 0; pos < n_cols; ++pos) {
        std::optional<TokenId> gold;
        if (gold_next && pos < static_cast<int>(gold_next->size())) gold = (*gold_next)[pos];
        const auto records = layer_sweep(model, trace, pos, gold);
        for (const LayerTraceRecord& rec : records) {
            HeatmapCell& cell = grid.rows[rec.layer][pos];
            cell.token_id = rec.top1_token;
            cell.token = name_of(rec.top1_token);
            switch (kind) {
                case MetricKind::max_prob: cell.value = rec.max_prob; break;
                case MetricKind::cross_entropy:
                    cell.value = static_cast<float>(*rec.cross_entropy);
                    break;
                case MetricKind::forward_kl:
                    cell.value = static_cast<float>(rec.forward_kl);
                    break;
            }
        }
    }
    for (int pos = 0; pos < n_cols; ++pos) {
        grid.column_labels.push_back(pos < static_cast<int>(input_tokens.size())
                                         ? name_of(input_tokens[pos])
                                         : "t" + std::to_string(pos));
    }
    return grid;
}

namespace detail {

/// %.9g: 9 significant digits, enough to round-trip any float32 exactly.
inline std::string fmt_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline std::string json_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size() + 2);
    for (const char c : s) {
        const auto u = static_cast<unsigned char>(c);
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (u < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", u);
                    out += buf;
                } else {
                    out += c;
                }
        }
    }
    return out;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (const char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

/// RFC-4180 field quoting.
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (const char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

inline std::string opt_int_json(const std::optional<int>& v) {
    return v ? std::to_string(*v) : "null";
}

inline std::string num_or_null(double v) {
    return std::isfinite(v) ? fmt_g9(v) : "null";
}

inline std::string stat_json(const AggregateStat& s) {
    return "{\"mean\":" + num_or_null(s.mean) + ",\"ci_low\":" + num_or_null(s.ci_low) +
           ",\"ci_high\":" + num_or_null(s.ci_high) + ",\"n\":" + std::to_string(s.n) +
           ",\"n_missing\":" + std::to_string(s.n_missing) + "}";
}

inline AggregateStat stat_from_json(const nlohmann::json& j) {
    AggregateStat s;
    const auto num = [&](const char* key) {
        return j.at(key).is_null() ? std::numeric_limits<double>::quiet_NaN()
                                   : j.at(key).get<double>();
    };
    s.mean = num("mean");
    s.ci_low = num("ci_low");
    s.ci_high = num("ci_high");
    s.n = j.at("n").get<int>();
    s.n_missing = j.at("n_missing").get<int>();
    return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// heatmap tables

inline std::string heatmap_json(const HeatmapGrid& grid) {
    std::string out = "{\"schema\":\"logitlens.heatmap/1\",\"metric\":\"";
    out += metric_name(grid.metric);
    out += "\",\"darker_is_higher\":";
    out += grid.darker_is_higher ? "true" : "false";
    out += ",\"n_layers\":" + std::to_string(grid.n_layers());
    out += ",\"n_positions\":" + std::to_string(grid.n_positions());
    out += ",\"column_labels\":[";
    for (std::size_t i = 0; i < grid.column_labels.size(); ++i) {
        if (i) out += ",";
        out += "\"" + detail::json_escape(grid.column_labels[i]) + "\"";
    }
    out += "],\"cells\":[";
    bool first = true;
    for (std::size_t l = 0; l < grid.rows.size(); ++l) {
        for (std::size_t p = 0; p < grid.rows[l].size(); ++p) {
            const HeatmapCell& c = grid.rows[l][p];
            if (!first) out += ",";
            first = false;
            out += "{\"layer\":" + std::to_string(l) + ",\"position\":" + std::to_string(p) +
                   ",\"token_id\":" + std::to_string(c.token_id) + ",\"token\":\"" +
                   detail::json_escape(c.token) + "\",\"value\":" +
                   detail::fmt_g9(c.value) + "}";
        }
    }
    out += "]}\n";
    return out;
}

inline HeatmapGrid heatmap_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError("bad heatmap JSON: " + std::string(e.what()));
    }
    if (j.value("schema", "") != "logitlens.heatmap/1") {
        throw InvalidInputError("unexpected heatmap schema");
    }
    HeatmapGrid grid;
    grid.metric = metric_from_name(j.at("metric").get<std::string>());
    grid.darker_is_higher = j.at("darker_is_higher").get<bool>();
    grid.column_labels = j.at("column_labels").get<std::vector<std::string>>();
    const int n_layers = j.at("n_layers").get<int>();
    const int n_positions = j.at("n_positions").get<int>();
    grid.rows.assign(n_layers + 1, std::vector<HeatmapCell>(n_positions));
    for (const auto& cj : j.at("cells")) {
        HeatmapCell cell;
        cell.token_id = cj.at("token_id").get<TokenId>();
        cell.token = cj.at("token").get<std::string>();
        cell.value = static_cast<float>(cj.at("value").get<double>());
        grid.rows.at(cj.at("layer").get<int>()).at(cj.at("position").get<int>()) = cell;
    }
    return grid;
}

inline std::string heatmap_csv(const HeatmapGrid& grid) {
    std::string out = "layer,position,token_id,token,value\n";
    for (std::size_t l = 0; l < grid.rows.size(); ++l) {
        for (std::size_t p = 0; p < grid.rows[l].size(); ++p) {
            const HeatmapCell& c = grid.rows[l][p];
            out += std::to_string(l) + "," + std::to_string(p) + "," +
                   std::to_string(c.token_id) + "," + detail::csv_field(c.token) + "," +
                   detail::fmt_g9(c.value) + "\n";
        }
    }
    return out;
}

/// One rect (with a <title> tooltip) and one label per cell; layers run
/// bottom-to-top. The color ramp is normalized to the grid's min/max, which
/// are embedded in the header line of the SVG.
inline std::string render_svg(const HeatmapGrid& grid) {
    if (grid.rows.empty() || grid.rows[0].empty()) {
        throw InvalidInputError("cannot render an empty heatmap");
    }
    const int n_rows = static_cast<int>(grid.rows.size());
    const int n_cols = grid.n_positions();
    float lo = grid.rows[0][0].value, hi = lo;
    for (const auto& row : grid.rows) {
        for (const HeatmapCell& c : row) {
            lo = std::min(lo, c.value);
            hi = std::max(hi, c.value);
        }
    }
    const int cell_w = 74, cell_h = 26, left = 44, top = 34, bottom = 26, right = 8;
    const int width = left + n_cols * cell_w + right;
    const int height = top + n_rows * cell_h + bottom;

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
           "\" height=\"" + std::to_string(height) + "\">\n";
    svg += "<title>" + std::string(metric_name(grid.metric)) + " (scale " +
           detail::fmt_g9(lo) + " to " + detail::fmt_g9(hi) + ")</title>\n";
    svg += "<text x=\"" + std::to_string(left) + "\" y=\"20\" font-family=\"monospace\" "
           "font-size=\"12\">" + std::string(metric_name(grid.metric)) + "  [" +
           detail::fmt_g9(lo) + ", " + detail::fmt_g9(hi) + "]</text>\n";

    for (int l = 0; l < n_rows; ++l) {
        const int y = top + (n_rows - 1 - l) * cell_h;  // layer 0 at the bottom
        svg += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" +
               std::to_string(y + cell_h / 2 + 4) +
               "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">" +
               std::to_string(l) + "</text>\n";
        for (int p = 0; p < n_cols; ++p) {
            const HeatmapCell& c = grid.rows[l][p];
            const float t = hi > lo ? (c.value - lo) / (hi - lo) : 0.5f;
            const float shade = grid.darker_is_higher ? 1.0f - t : t;
            const int level = 15 + static_cast<int>(std::lround(shade * 225.0f));
            const int x = left + p * cell_w;
            const std::string fill = "rgb(" + std::to_string(level) + "," +
                                     std::to_string(level) + "," + std::to_string(level) + ")";
            svg += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) +
                   "\" width=\"" + std::to_string(cell_w) + "\" height=\"" +
                   std::to_string(cell_h) + "\" fill=\"" + fill +
                   "\" stroke=\"white\" stroke-width=\"1\">";
            svg += "<title>layer " + std::to_string(l) + ", position " + std::to_string(p) +
                   ": " + detail::fmt_g9(c.value) + "</title></rect>\n";
            std::string label = c.token;
            if (label.size() > 9) label = label.substr(0, 9);
            svg += "<text x=\"" + std::to_string(x + cell_w / 2) + "\" y=\"" +
                   std::to_string(y + cell_h / 2 + 3) +
                   "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"9\" "
                   "fill=\"" + (level > 128 ? std::string("black") : std::string("white")) +
                   "\">" + detail::xml_escape(label) + "</text>\n";
        }
    }
    for (int p = 0; p < n_cols && p < static_cast<int>(grid.column_labels.size()); ++p) {
        std::string label = grid.column_labels[p];
        if (label.size() > 9) label = label.substr(0, 9);
        svg += "<text x=\"" + std::to_string(left + p * cell_w + cell_w / 2) + "\" y=\"" +
               std::to_string(top + n_rows * cell_h + 16) +
               "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"9\">" +
               detail::xml_escape(label) + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

// ---------------------------------------------------------------------------
// sweep tables

inline std::string sweep_json(const SweepResult& result) {
    std::string out = "{\"schema\":\"logitlens.sweep/1\"";
    out += ",\"k_documents\":" + std::to_string(result.k_documents);
    out += ",\"n_runs\":" + std::to_string(result.n_runs);
    out += ",\"seed\":\"" + std::to_string(result.seed) + "\"";
    out += ",\"max_answer_tokens\":" + std::to_string(result.max_answer_tokens);
    out += ",\"confidence\":" + detail::fmt_g9(result.confidence);
    out += ",\"template_version\":\"" + detail::json_escape(result.template_version) + "\"";
    out += ",\"records\":[";
    for (std::size_t i = 0; i < result.records.size(); ++i) {
        const InstanceResult& r = result.records[i];
        if (i) out += ",";
        out += "{\"position\":" + std::to_string(r.gold_position) +
               ",\"run\":" + std::to_string(r.run) + ",\"instance\":\"" +
               detail::json_escape(r.instance_id) + "\",\"failed\":" +
               (r.failed ? "true" : "false") + ",\"error\":\"" +
               detail::json_escape(r.error) + "\",\"correct\":" +
               (r.correct ? "true" : "false") + ",\"generated\":\"" +
               detail::json_escape(r.generated) + "\",\"gold_token\":" +
               std::to_string(r.gold_token) + ",\"first_correct\":" +
               detail::opt_int_json(r.profile.first_correct_layer) +
               ",\"stabilization\":" + detail::opt_int_json(r.profile.stabilization_layer) +
               ",\"depth\":" + detail::opt_int_json(r.profile.depth) +
               ",\"final_correct\":" + (r.profile.final_correct ? "true" : "false") + "}";
    }
    out += "],\"run_accuracies\":[";
    for (std::size_t i = 0; i < result.run_accuracies.size(); ++i) {
        const RunAccuracy& ra = result.run_accuracies[i];
        if (i) out += ",";
        out += "{\"position\":" + std::to_string(ra.gold_position) +
               ",\"run\":" + std::to_string(ra.run) + ",\"accuracy\":" +
               (ra.accuracy ? detail::fmt_g9(*ra.accuracy) : "null") + "}";
    }
    out += "],\"summaries\":[";
    for (std::size_t i = 0; i < result.summaries.size(); ++i) {
        const PositionSummary& s = result.summaries[i];
        if (i) out += ",";
        out += "{\"position\":" + std::to_string(s.gold_position) +
               ",\"accuracy\":" + detail::stat_json(s.accuracy) +
               ",\"first_correct\":" + detail::stat_json(s.first_correct) +
               ",\"stabilization\":" + detail::stat_json(s.stabilization) +
               ",\"depth\":" + detail::stat_json(s.depth) + "}";
    }
    out += "]}\n";
    return out;
}

inline SweepResult sweep_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError("bad sweep JSON: " + std::string(e.what()));
    }
    if (j.value("schema", "") != "logitlens.sweep/1") {
        throw InvalidInputError("unexpected sweep schema");
    }
    SweepResult r;
    r.k_documents = j.at("k_documents").get<int>();
    r.n_runs = j.at("n_runs").get<int>();
    r.seed = std::stoull(j.at("seed").get<std::string>());
    r.max_answer_tokens = j.at("max_answer_tokens").get<int>();
    r.confidence = j.at("confidence").get<double>();
    r.template_version = j.at("template_version").get<std::string>();
    for (const auto& rj : j.at("records")) {
        InstanceResult rec;
        rec.gold_position = rj.at("position").get<int>();
        rec.run = rj.at("run").get<int>();
        rec.instance_id = rj.at("instance").get<std::string>();
        rec.failed = rj.at("failed").get<bool>();
        rec.error = rj.at("error").get<std::string>();
        rec.correct = rj.at("correct").get<bool>();
        rec.generated = rj.at("generated").get<std::string>();
        rec.gold_token = rj.at("gold_token").get<TokenId>();
        const auto opt_int = [&rj](const char* key) -> std::optional<int> {
            if (rj.at(key).is_null()) return std::nullopt;
            return rj.at(key).get<int>();
        };
        rec.profile.first_correct_layer = opt_int("first_correct");
        rec.profile.stabilization_layer = opt_int("stabilization");
        rec.profile.depth = opt_int("depth");
        rec.profile.final_correct = rj.at("final_correct").get<bool>();
        r.records.push_back(std::move(rec));
    }
    for (const auto& rj : j.at("run_accuracies")) {
        RunAccuracy ra;
        ra.gold_position = rj.at("position").get<int>();
        ra.run = rj.at("run").get<int>();
        if (!rj.at("accuracy").is_null()) ra.accuracy = rj.at("accuracy").get<double>();
        r.run_accuracies.push_back(ra);
    }
    for (const auto& sj : j.at("summaries")) {
        PositionSummary ps;
        ps.gold_position = sj.at("position").get<int>();
        ps.accuracy = detail::stat_from_json(sj.at("accuracy"));
        ps.first_correct = detail::stat_from_json(sj.at("first_correct"));
        ps.stabilization = detail::stat_from_json(sj.at("stabilization"));
        ps.depth = detail::stat_from_json(sj.at("depth"));
        r.summaries.push_back(ps);
    }
    return r;
}

inline std::string sweep_csv(const SweepResult& result) {
    std::string out = "row_type,position,run,accuracy,stat,mean,ci_low,ci_high,n,n_missing\n";
    for (const RunAccuracy& ra : result.run_accuracies) {
        out += "run," + std::to_string(ra.gold_position) + "," + std::to_string(ra.run) +
               "," + (ra.accuracy ? detail::fmt_g9(*ra.accuracy) : "") + ",,,,,,\n";
    }
    for (const PositionSummary& s : result.summaries) {
        const auto row = [&](const char* stat, const AggregateStat& a) {
            out += "aggregate," + std::to_string(s.gold_position) + ",,," + stat + "," +
                   (std::isfinite(a.mean) ? detail::fmt_g9(a.mean) : "") + "," +
                   (std::isfinite(a.ci_low) ? detail::fmt_g9(a.ci_low) : "") + "," +
                   (std::isfinite(a.ci_high) ? detail::fmt_g9(a.ci_high) : "") + "," +
                   std::to_string(a.n) + "," + std::to_string(a.n_missing) + "\n";
        };
        row("accuracy", s.accuracy);
        row("first_correct_layer", s.first_correct);
        row("stabilization_layer", s.stabilization);
        row("depth", s.depth);
    }
    return out;
}

struct Tables {
    std::string csv;
    std::string json;
};

inline Tables export_tables(const HeatmapGrid& grid) {
    return {heatmap_csv(grid), heatmap_json(grid)};
}

inline Tables export_tables(const SweepResult& result) {
    return {sweep_csv(result), sweep_json(result)};
}

}  // namespace logitlens
