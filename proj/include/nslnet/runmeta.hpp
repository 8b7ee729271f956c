#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace nsl {

// Flat key=value settings; '#' starts a comment, blank lines ignored.
std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path);

// Rejects keys outside `allowed`.
void check_known_keys(const std::map<std::string, std::string>& kv, const std::vector<std::string>& allowed);

// FNV-1a 64-bit of a file's bytes, as 16 hex digits.
std::string file_hash_hex(const std::filesystem::path& path);

// Writes "<key>=<value>" lines (sorted by key) next to a produced artifact.
void write_manifest(const std::filesystem::path& path, const std::map<std::string, std::string>& fields);

// Append-or-overwrite keyed rows of a small results table. The first column
// is the key; rewriting a key replaces that row only.
void upsert_csv_row(const std::filesystem::path& path, const std::string& header, const std::string& key,
                    const std::string& row);

}  // namespace nsl
