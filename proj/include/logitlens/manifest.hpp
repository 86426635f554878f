#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "logitlens/errors.hpp"
#include "logitlens/rng.hpp"
#include "logitlens/version.hpp"

namespace logitlens {

/// Atomic file write: stage to a sibling temp file, then rename. A failed run
/// never leaves a partial output behind.
inline void atomic_write_file(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write file: " + tmp);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw Error("failed writing file: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

/// FNV-1a 64 digest of a file's bytes, as fixed-width hex.
inline std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open file for digest: " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
        if (in.eof()) break;
    }
    char hex[20];
    std::snprintf(hex, sizeof(hex), "fnv1a64:%016llx", static_cast<unsigned long long>(h));
    return hex;
}

/// One manifest per run: everything needed to reproduce the outputs
/// byte-identically (resolved config, explicit seed, input digests), plus
/// wall-clock timing for the record.
struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t seed = 0;
    std::map<std::string, std::string> input_digests;
    std::vector<std::string> outputs;
    double wall_seconds = 0.0;

    void add_input(const std::string& path) { input_digests[path] = file_digest(path); }

    std::string to_json() const {
        nlohmann::json j;
        j["schema"] = "logitlens.manifest/1";
        j["tool_version"] = kVersion;
        j["command"] = command;
        j["config"] = config;
        j["seed"] = std::to_string(seed);
        j["inputs"] = input_digests;
        j["outputs"] = outputs;
        j["wall_seconds"] = wall_seconds;
        return j.dump(1) + "\n";
    }

    void write(const std::string& path) const { atomic_write_file(path, to_json()); }
};

}  // namespace logitlens
