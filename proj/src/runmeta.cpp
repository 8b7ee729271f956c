#include "nslnet/runmeta.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "nslnet/error.hpp"

namespace nsl {

std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open '" + path.string() + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        // trim
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw FormatError("config: expected key=value at line " + std::to_string(line_no));
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

void check_known_keys(const std::map<std::string, std::string>& kv, const std::vector<std::string>& allowed) {
    for (const auto& [k, _] : kv) {
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
            throw ParamError("config: unknown key '" + k + "'");
        }
    }
}

std::string file_hash_hex(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("hash: cannot open '" + path.string() + "'");
    std::uint64_t h = 0xCBF29CE484222325ULL;
    char buf[1 << 16];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ULL;
        }
        if (!is) break;
    }
    std::ostringstream os;
    os << std::hex;
    for (int shift = 60; shift >= 0; shift -= 4) os << ((h >> shift) & 0xF);
    return os.str();
}

void write_manifest(const std::filesystem::path& path, const std::map<std::string, std::string>& fields) {
    std::ofstream os(path);
    if (!os) throw IoError("manifest: cannot open '" + path.string() + "'");
    for (const auto& [k, v] : fields) os << k << '=' << v << '\n';
    if (!os) throw IoError("manifest: write failed");
}

void upsert_csv_row(const std::filesystem::path& path, const std::string& header, const std::string& key,
                    const std::string& row) {
    std::vector<std::string> lines;
    if (std::filesystem::exists(path)) {
        std::ifstream is(path);
        std::string line;
        while (std::getline(is, line)) {
            if (!line.empty()) lines.push_back(line);
        }
    }
    if (lines.empty()) lines.push_back(header);

    const std::string prefix = key + ",";
    bool replaced = false;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].rfind(prefix, 0) == 0) {
            lines[i] = row;
            replaced = true;
            break;
        }
    }
    if (!replaced) lines.push_back(row);

    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("results csv: cannot open '" + path.string() + "'");
    for (const auto& l : lines) os << l << '\n';
}

}  // namespace nsl
