#pragma once

// Line-JSON task files: an optional first line {"labels": [...]} followed by
// one {"x": string, "y": string} object per line, UTF-8.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "icft/tasks/dataset.hpp"

namespace icft::tasks {

struct LoadOptions {
  /// Without a header line the task is open-ended unless this is set, in which
  /// case the label set is the union of responses in first-seen order.
  bool infer_labels = false;
};

inline void save_task_file(const std::filesystem::path& path, const Dataset& d) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw TaskError("cannot write task file " + path.string());
  if (d.labels) os << nlohmann::json{{"labels", *d.labels}}.dump() << '\n';
  for (const auto& ex : d.examples) os << nlohmann::json{{"x", ex.x}, {"y", ex.y}}.dump() << '\n';
  if (!os) throw TaskError("write failed for " + path.string());
}

inline Dataset load_task_file(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TaskError("cannot open task file " + path.string());
  Dataset d;
  d.name = path.stem().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw TaskError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw TaskError(where + ": expected a JSON object");
    if (j.contains("labels")) {
      if (lineno != 1 || !d.examples.empty()) throw TaskError(where + ": labels header must be the first line");
      if (!j["labels"].is_array() || j["labels"].empty()) throw TaskError(where + ": labels must be a non-empty array");
      std::vector<std::string> labels;
      for (const auto& l : j["labels"]) {
        if (!l.is_string()) throw TaskError(where + ": labels must be strings");
        labels.push_back(l.get<std::string>());
      }
      d.labels = std::move(labels);
      continue;
    }
    if (!j.contains("x") || !j["x"].is_string()) throw TaskError(where + ": missing string field 'x'");
    if (!j.contains("y") || !j["y"].is_string()) throw TaskError(where + ": missing string field 'y'");
    Example ex{j["x"].get<std::string>(), j["y"].get<std::string>()};
    if (ex.y.empty()) throw TaskError(where + ": empty response 'y'");
    if (d.labels && std::find(d.labels->begin(), d.labels->end(), ex.y) == d.labels->end()) {
      throw TaskError(where + ": response '" + ex.y + "' is not in the declared label set");
    }
    d.examples.push_back(std::move(ex));
  }
  if (!d.labels && opts.infer_labels) {
    std::vector<std::string> labels;
    for (const auto& ex : d.examples)
      if (std::find(labels.begin(), labels.end(), ex.y) == labels.end()) labels.push_back(ex.y);
    d.labels = std::move(labels);
  }
  return d;
}

}  // namespace icft::tasks
