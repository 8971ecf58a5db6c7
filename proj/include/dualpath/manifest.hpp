#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dualpath/config.hpp"
#include "dualpath/error.hpp"

namespace dualpath {

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string checksum_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("checksum: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    char out[20];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(fnv1a64(buf.str())));
    return out;
}

// A run directory is reconstructible from its manifest: the merged config
// snapshot plus the seed fully determine every artifact byte.
struct RunManifest {
    std::string command;
    KeyValues config;
    std::vector<std::uint64_t> seeds;
    std::string output_dir;
    std::map<std::string, std::string> checksums;  // file name -> fnv1a64 hex

    void save(const std::string& path) const {
        nlohmann::json j;
        j["command"] = command;
        j["config"] = config;
        j["seeds"] = seeds;
        j["output_dir"] = output_dir;
        j["checksums"] = checksums;
        std::ofstream os(path);
        if (!os) throw data_error("manifest: cannot open '" + path + "' for writing");
        os << j.dump(2) << "\n";
    }

    static RunManifest load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw data_error("manifest: cannot open '" + path + "'");
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw data_error("manifest: parse error in '" + path + "': " + e.what());
        }
        RunManifest m;
        m.command = j.at("command").get<std::string>();
        m.config = j.at("config").get<KeyValues>();
        m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        m.output_dir = j.at("output_dir").get<std::string>();
        m.checksums = j.at("checksums").get<std::map<std::string, std::string>>();
        return m;
    }
};

}  // namespace dualpath
