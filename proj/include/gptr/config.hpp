#pragma once

// Run configuration: model sizes, training hyperparameters, architecture
// toggles, and paths. Plain-text `key = value` format with exact round-trip
// (parse(write(cfg)) == cfg), so the echoed effective config reproduces runs.

#include <array>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "gptr/errors.hpp"
#include "gptr/graph.hpp"
#include "gptr/image.hpp"

namespace gptr {

constexpr std::size_t kPatchSide = 16;
constexpr std::size_t kGridTokens =
    (kStandardSide / kPatchSide) * (kStandardSide / kPatchSide);  // 196

struct RunConfig {
    // model
    std::size_t d = 256;
    std::size_t layers = 4;   // encoder and decoder depth, and pooling levels
    std::size_t heads = 4;
    std::size_t queries = 50;
    double pool_ratio = 0.5;
    double delta = 0.1;       // position-similarity bandwidth
    double dropout = 0.1;
    // training
    double lr = 1e-4;
    double weight_decay = 1e-4;
    std::size_t batch_size = 16;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;
    // architecture toggles
    bool branch_cb = true;
    bool branch_pb = true;
    bool branch_eb = true;
    bool adaptive_fusion = true;  // learned fusion coefficients vs fixed 1
    bool vq = true;               // visual queries vs zero-initialized queries
    bool msa = true;              // multi-scale selection vs learned query seed
    bool normalize_w = true;      // degree-normalized propagation + mass-normalized pooling
    bool aux_loss = true;         // per-decoder-layer loss copies
    // paths
    std::string dataset;
    std::string checkpoint;
    std::string output;

    bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
        s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

inline std::string shortest_double(double v) {
    std::array<char, 32> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

inline double parse_double(std::string_view key, std::string_view value) {
    double out = 0.0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), out);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
        throw ConfigError("config: " + std::string(key) + " expects a number, got '" +
                          std::string(value) + "'");
    return out;
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view value) {
    std::uint64_t out = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), out);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
        throw ConfigError("config: " + std::string(key) + " expects a non-negative integer, got '" +
                          std::string(value) + "'");
    return out;
}

inline bool parse_bool(std::string_view key, std::string_view value) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw ConfigError("config: " + std::string(key) + " expects true or false, got '" +
                      std::string(value) + "'");
}

} // namespace detail

/// Applies one `key = value` assignment. Unknown keys are configuration
/// errors so typos never silently fall back to defaults.
inline void set_config_field(RunConfig& cfg, std::string_view key, std::string_view value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_uint;
    if (key == "d") cfg.d = parse_uint(key, value);
    else if (key == "layers") cfg.layers = parse_uint(key, value);
    else if (key == "heads") cfg.heads = parse_uint(key, value);
    else if (key == "queries") cfg.queries = parse_uint(key, value);
    else if (key == "pool_ratio") cfg.pool_ratio = parse_double(key, value);
    else if (key == "delta") cfg.delta = parse_double(key, value);
    else if (key == "dropout") cfg.dropout = parse_double(key, value);
    else if (key == "lr") cfg.lr = parse_double(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_double(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_uint(key, value);
    else if (key == "epochs") cfg.epochs = parse_uint(key, value);
    else if (key == "seed") cfg.seed = parse_uint(key, value);
    else if (key == "branches") {
        cfg.branch_cb = cfg.branch_pb = cfg.branch_eb = false;
        std::string_view rest = value;
        while (!rest.empty()) {
            const std::size_t comma = rest.find(',');
            std::string_view item = detail::trim(rest.substr(0, comma));
            rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
            if (item == "cb") cfg.branch_cb = true;
            else if (item == "pb") cfg.branch_pb = true;
            else if (item == "eb") cfg.branch_eb = true;
            else
                throw ConfigError("config: branches expects a comma list of cb, pb, eb; got '" +
                                  std::string(item) + "'");
        }
    }
    else if (key == "adaptive_fusion") cfg.adaptive_fusion = parse_bool(key, value);
    else if (key == "vq") cfg.vq = parse_bool(key, value);
    else if (key == "msa") cfg.msa = parse_bool(key, value);
    else if (key == "normalize_w") cfg.normalize_w = parse_bool(key, value);
    else if (key == "aux_loss") cfg.aux_loss = parse_bool(key, value);
    else if (key == "dataset") cfg.dataset = std::string(value);
    else if (key == "checkpoint") cfg.checkpoint = std::string(value);
    else if (key == "output") cfg.output = std::string(value);
    else throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

/// Parses `key = value` lines into cfg. `#` starts a comment; blank lines
/// are skipped; values keep interior spaces (paths), keys must be known.
inline void parse_config_text(std::string_view text, RunConfig& cfg) {
    std::size_t line_no = 0;
    while (!text.empty()) {
        const std::size_t nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string_view::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("config: line " + std::to_string(line_no) +
                              " is not a 'key = value' assignment: '" + std::string(line) + "'");
        set_config_field(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

/// Node counts per pooling level for this configuration.
inline std::vector<std::size_t> config_schedule(const RunConfig& cfg) {
    return pool_schedule(kGridTokens, cfg.layers, cfg.pool_ratio);
}

/// Field-level validation; throws ConfigError naming the offending field.
inline void validate_config(const RunConfig& cfg) {
    if (cfg.d == 0) throw ConfigError("config: d must be positive");
    if (cfg.heads == 0) throw ConfigError("config: heads must be positive");
    if (cfg.d % cfg.heads != 0)
        throw ConfigError("config: d=" + std::to_string(cfg.d) + " not divisible by heads=" +
                          std::to_string(cfg.heads));
    if (cfg.layers == 0) throw ConfigError("config: layers must be positive");
    if (cfg.queries == 0) throw ConfigError("config: queries must be positive");
    if (!(cfg.pool_ratio > 0.0) || !(cfg.pool_ratio < 1.0))
        throw ConfigError("config: pool_ratio=" + detail::shortest_double(cfg.pool_ratio) +
                          " outside (0, 1)");
    if (!(cfg.delta > 0.0))
        throw ConfigError("config: delta must be positive, got " +
                          detail::shortest_double(cfg.delta));
    if (!(cfg.dropout >= 0.0) || cfg.dropout >= 1.0)
        throw ConfigError("config: dropout=" + detail::shortest_double(cfg.dropout) +
                          " outside [0, 1)");
    if (!(cfg.lr > 0.0))
        throw ConfigError("config: lr must be positive, got " + detail::shortest_double(cfg.lr));
    if (!(cfg.weight_decay >= 0.0))
        throw ConfigError("config: weight_decay must be non-negative, got " +
                          detail::shortest_double(cfg.weight_decay));
    if (cfg.batch_size == 0) throw ConfigError("config: batch_size must be positive");
    if (!cfg.branch_cb && !cfg.branch_pb && !cfg.branch_eb)
        throw ConfigError("config: branches must enable at least one of cb, pb, eb");
    const auto schedule = config_schedule(cfg);
    const std::size_t pool = std::accumulate(schedule.begin(), schedule.end(), std::size_t{0});
    if (cfg.queries > pool)
        throw ConfigError("config: queries=" + std::to_string(cfg.queries) +
                          " exceeds the multi-scale pool of " + std::to_string(pool) + " nodes");
}

/// Canonical text form containing every field; parsing it reproduces cfg
/// exactly (numbers use shortest round-trip formatting).
inline std::string write_config_text(const RunConfig& cfg) {
    using detail::shortest_double;
    std::string out;
    auto kv = [&out](std::string_view key, const std::string& value) {
        out += std::string(key) + " = " + value + "\n";
    };
    kv("d", std::to_string(cfg.d));
    kv("layers", std::to_string(cfg.layers));
    kv("heads", std::to_string(cfg.heads));
    kv("queries", std::to_string(cfg.queries));
    kv("pool_ratio", shortest_double(cfg.pool_ratio));
    kv("delta", shortest_double(cfg.delta));
    kv("dropout", shortest_double(cfg.dropout));
    kv("lr", shortest_double(cfg.lr));
    kv("weight_decay", shortest_double(cfg.weight_decay));
    kv("batch_size", std::to_string(cfg.batch_size));
    kv("epochs", std::to_string(cfg.epochs));
    kv("seed", std::to_string(cfg.seed));
    std::string branches;
    if (cfg.branch_cb) branches += "cb";
    if (cfg.branch_pb) branches += branches.empty() ? "pb" : ",pb";
    if (cfg.branch_eb) branches += branches.empty() ? "eb" : ",eb";
    kv("branches", branches);
    kv("adaptive_fusion", cfg.adaptive_fusion ? "true" : "false");
    kv("vq", cfg.vq ? "true" : "false");
    kv("msa", cfg.msa ? "true" : "false");
    kv("normalize_w", cfg.normalize_w ? "true" : "false");
    kv("aux_loss", cfg.aux_loss ? "true" : "false");
    kv("dataset", cfg.dataset);
    kv("checkpoint", cfg.checkpoint);
    kv("output", cfg.output);
    return out;
}

} // namespace gptr
