#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "crest/util.hpp"

namespace crest {

using json = nlohmann::json;

// Parses one line-delimited JSON file, invoking fn(line_number, object) per
// non-empty line. Errors carry the 1-based line number.
inline void for_each_jsonl(const std::filesystem::path& path,
                           const std::function<void(std::size_t, const json&)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": malformed JSON line (" + std::string(e.what()) + ")");
    }
    fn(lineno, obj);
  }
}

inline std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::vector<json> out;
  for_each_jsonl(path, [&](std::size_t, const json& obj) { out.push_back(obj); });
  return out;
}

inline std::string dump_jsonl(const std::vector<json>& lines) {
  std::string out;
  for (const auto& obj : lines) {
    out += obj.dump();
    out += '\n';
  }
  return out;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<json>& lines) {
  atomic_write_file(path, dump_jsonl(lines));
}

// Append-only channel for run-store files; one flushed line per record.
class JsonlAppender {
 public:
  explicit JsonlAppender(std::filesystem::path path)
      : path_(std::move(path)), out_(path_, std::ios::binary | std::ios::app) {
    if (!out_) throw std::runtime_error("cannot open for append: " + path_.string());
  }

  void append(const json& obj) {
    out_ << obj.dump() << '\n';
    out_.flush();
    if (!out_) throw std::runtime_error("append failed: " + path_.string());
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

inline std::string require_string(const json& obj, const char* field, const std::string& where) {
  if (!obj.contains(field) || !obj[field].is_string())
    throw std::runtime_error(where + ": missing or non-string field '" + field + "'");
  return obj[field].get<std::string>();
}

inline json require_field(const json& obj, const char* field, const std::string& where) {
  if (!obj.contains(field))
    throw std::runtime_error(where + ": missing field '" + field + "'");
  return obj[field];
}

}  // namespace crest
