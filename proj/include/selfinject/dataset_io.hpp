#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "selfinject/common.hpp"
#include "selfinject/cooccurrence.hpp"
#include "selfinject/lexicon.hpp"

namespace selfinject {

using OrderedJson = nlohmann::ordered_json;

struct UnannotatedSample {
  std::string sample_id;
  std::string image_ref;
  std::string prompt;

  friend bool operator==(const UnannotatedSample&, const UnannotatedSample&) = default;
};

/// A generated (preferred) response for one sample.
struct ResponseRecord {
  std::string sample_id;
  std::string image_ref;
  std::string prompt;
  std::string response;

  friend bool operator==(const ResponseRecord&, const ResponseRecord&) = default;
};

struct PreferenceRecord {
  std::string sample_id;
  std::string image_ref;
  std::string prompt;
  std::string preferred_text;
  std::string dispreferred_text;
  std::vector<std::size_t> replace_indices;
  std::vector<std::string> hallucinated_objects;
  std::vector<int> template_ids;
  int iteration = 0;
  double rho = 0.0;
  std::string pipeline_version = std::string(kPipelineVersion);

  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

struct GroundTruthAnnotation {
  std::string sample_id;
  TagSet present_tags;

  friend bool operator==(const GroundTruthAnnotation&, const GroundTruthAnnotation&) = default;
};

struct TrainingExample {
  std::string prompt;
  std::string image_ref;
  std::string chosen;
  std::string rejected;
};

// ---------------------------------------------------------------------------
// Per-record codecs. Field order in the emitted JSON is fixed.

template <typename R>
struct RecordCodec;

namespace detail {
template <typename T>
T require(const OrderedJson& j, const char* field) {
  if (!j.contains(field)) throw InputError(std::string("missing field '") + field + "'");
  try {
    return j.at(field).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InputError(std::string("field '") + field + "' has the wrong type");
  }
}

inline void require_id(const std::string& id) {
  if (id.empty()) throw InputError("sample_id must be non-empty");
}
}  // namespace detail

template <>
struct RecordCodec<UnannotatedSample> {
  static constexpr std::string_view kName = "unannotated";
  static OrderedJson to_json(const UnannotatedSample& r) {
    return {{"sample_id", r.sample_id}, {"image_ref", r.image_ref}, {"prompt", r.prompt}};
  }
  static UnannotatedSample from_json(const OrderedJson& j) {
    return {detail::require<std::string>(j, "sample_id"), detail::require<std::string>(j, "image_ref"),
            detail::require<std::string>(j, "prompt")};
  }
  static void validate(const UnannotatedSample& r) { detail::require_id(r.sample_id); }
  static const std::string& id(const UnannotatedSample& r) { return r.sample_id; }
};

template <>
struct RecordCodec<ResponseRecord> {
  static constexpr std::string_view kName = "responses";
  static OrderedJson to_json(const ResponseRecord& r) {
    return {{"sample_id", r.sample_id}, {"image_ref", r.image_ref}, {"prompt", r.prompt}, {"response", r.response}};
  }
  static ResponseRecord from_json(const OrderedJson& j) {
    return {detail::require<std::string>(j, "sample_id"), detail::require<std::string>(j, "image_ref"),
            detail::require<std::string>(j, "prompt"), detail::require<std::string>(j, "response")};
  }
  static void validate(const ResponseRecord& r) { detail::require_id(r.sample_id); }
  static const std::string& id(const ResponseRecord& r) { return r.sample_id; }
};

template <>
struct RecordCodec<PreferenceRecord> {
  static constexpr std::string_view kName = "preference";
  static OrderedJson to_json(const PreferenceRecord& r) {
    return {{"sample_id", r.sample_id},
            {"image_ref", r.image_ref},
            {"prompt", r.prompt},
            {"preferred_text", r.preferred_text},
            {"dispreferred_text", r.dispreferred_text},
            {"replace_indices", r.replace_indices},
            {"hallucinated_objects", r.hallucinated_objects},
            {"template_ids", r.template_ids},
            {"iteration", r.iteration},
            {"rho", r.rho},
            {"pipeline_version", r.pipeline_version}};
  }
  static PreferenceRecord from_json(const OrderedJson& j) {
    PreferenceRecord r;
    r.sample_id = detail::require<std::string>(j, "sample_id");
    r.image_ref = detail::require<std::string>(j, "image_ref");
    r.prompt = detail::require<std::string>(j, "prompt");
    r.preferred_text = detail::require<std::string>(j, "preferred_text");
    r.dispreferred_text = detail::require<std::string>(j, "dispreferred_text");
    r.replace_indices = detail::require<std::vector<std::size_t>>(j, "replace_indices");
    r.hallucinated_objects = detail::require<std::vector<std::string>>(j, "hallucinated_objects");
    r.template_ids = detail::require<std::vector<int>>(j, "template_ids");
    r.iteration = detail::require<int>(j, "iteration");
    r.rho = detail::require<double>(j, "rho");
    r.pipeline_version = detail::require<std::string>(j, "pipeline_version");
    validate(r);
    return r;
  }
  static void validate(const PreferenceRecord& r) {
    detail::require_id(r.sample_id);
    if (r.replace_indices.empty() || r.replace_indices.size() != r.hallucinated_objects.size() ||
        r.replace_indices.size() != r.template_ids.size()) {
      throw InputError("record " + r.sample_id +
                       ": replace_indices, hallucinated_objects and template_ids must have equal non-zero length");
    }
  }
  static const std::string& id(const PreferenceRecord& r) { return r.sample_id; }
};

// ---------------------------------------------------------------------------
// Line-delimited JSON.

namespace detail {
inline std::string dump_line(const OrderedJson& j) {
  try {
    return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("record is not valid UTF-8: ") + e.what());
  }
}
}  // namespace detail

template <typename R>
std::string serialize_records(const std::vector<R>& records) {
  for (const auto& r : records) RecordCodec<R>::validate(r);
  std::string out;
  for (const auto& r : records) {
    out += detail::dump_line(RecordCodec<R>::to_json(r));
    out += '\n';
  }
  return out;
}

/// Parses records in order. Blank lines are skipped; a repeated sample_id
/// is an error naming both lines.
template <typename R>
std::vector<R> parse_records(std::string_view text, const std::string& source = "<memory>") {
  std::vector<R> out;
  std::map<std::string, std::size_t> first_line;
  std::size_t line_no = 0;
  for (const auto& line : split(text, '\n')) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    OrderedJson j;
    try {
      j = OrderedJson::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw InputError(where + ": expected a JSON object");
    R record;
    try {
      record = RecordCodec<R>::from_json(j);
      RecordCodec<R>::validate(record);
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
    const std::string& id = RecordCodec<R>::id(record);
    if (auto [it, inserted] = first_line.emplace(id, line_no); !inserted) {
      throw InputError(source + ": duplicate sample_id '" + id + "' on lines " + std::to_string(it->second) +
                       " and " + std::to_string(line_no));
    }
    out.push_back(std::move(record));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Annotation files: `sample_id<TAB>tag,tag,...`

inline std::vector<GroundTruthAnnotation> parse_annotations(std::string_view text,
                                                            const std::string& source = "<memory>") {
  std::vector<GroundTruthAnnotation> out;
  std::map<std::string, std::size_t> first_line;
  std::size_t line_no = 0;
  for (const auto& line : split(text, '\n')) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw InputError(source + ":" + std::to_string(line_no) + ": expected a TAB");
    GroundTruthAnnotation a;
    a.sample_id = std::string(trim(std::string_view(line).substr(0, tab)));
    if (a.sample_id.empty()) throw InputError(source + ":" + std::to_string(line_no) + ": empty sample_id");
    for (const auto& tag : split(std::string_view(line).substr(tab + 1), ',')) {
      auto t = SynonymLexicon::normalize_form(tag);
      if (!t.empty()) a.present_tags.insert(std::move(t));
    }
    if (auto [it, inserted] = first_line.emplace(a.sample_id, line_no); !inserted) {
      throw InputError(source + ": duplicate sample_id '" + a.sample_id + "' on lines " +
                       std::to_string(it->second) + " and " + std::to_string(line_no));
    }
    out.push_back(std::move(a));
  }
  return out;
}

inline std::string serialize_annotations(const std::vector<GroundTruthAnnotation>& annotations) {
  std::string out;
  for (const auto& a : annotations) {
    detail::require_id(a.sample_id);
    out += a.sample_id + '\t' + join(a.present_tags, ",") + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Atomic writes: temp file in the target directory, then rename, under an
// exclusive advisory lock on the directory.

struct WriteOptions {
  /// Called after the temp file is complete and before the rename.
  std::function<void(const std::string& temp_path)> before_commit;
};

namespace detail {
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir) {
    fd_ = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
    if (fd_ < 0) throw IoError("cannot open directory '" + dir.string() + "': " + std::strerror(errno));
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw IoError("cannot lock directory '" + dir.string() + "'");
    }
  }
  ~DirectoryLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};
}  // namespace detail

inline void write_text_atomic(const std::string& path, std::string_view content, const WriteOptions& options = {}) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  fs::path dir = target.parent_path();
  if (dir.empty()) dir = ".";
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());

  detail::DirectoryLock lock(dir);
  const fs::path temp = dir / ("." + target.filename().string() + ".tmp." + std::to_string(::getpid()));
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + temp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("write to '" + temp.string() + "' failed");
  }
  if (options.before_commit) options.before_commit(temp.string());
  fs::rename(temp, target, ec);
  if (ec) {
    fs::remove(temp);
    throw IoError("cannot rename into '" + path + "': " + ec.message());
  }
}

template <typename R>
std::vector<R> read_records(const std::string& path) {
  return parse_records<R>(read_file(path), path);
}

/// Validates every record before touching the file system.
template <typename R>
std::size_t write_records(const std::vector<R>& records, const std::string& path, const WriteOptions& options = {}) {
  write_text_atomic(path, serialize_records(records), options);
  return records.size();
}

inline std::vector<GroundTruthAnnotation> read_annotations(const std::string& path) {
  return parse_annotations(read_file(path), path);
}

inline std::size_t write_annotations(const std::vector<GroundTruthAnnotation>& a, const std::string& path) {
  write_text_atomic(path, serialize_annotations(a));
  return a.size();
}

inline CooccurrenceGraph read_graph(const std::string& path) { return read_graph_text(read_file(path), path); }

inline void write_graph(const CooccurrenceGraph& graph, const std::string& path) {
  write_text_atomic(path, write_graph_text(graph));
}

enum class Schema { kUnannotated, kResponses, kPreference, kAnnotations };

using AnyDataset = std::variant<std::vector<UnannotatedSample>, std::vector<ResponseRecord>,
                                std::vector<PreferenceRecord>, std::vector<GroundTruthAnnotation>>;

inline AnyDataset read_dataset(const std::string& path, Schema schema) {
  switch (schema) {
    case Schema::kUnannotated: return read_records<UnannotatedSample>(path);
    case Schema::kResponses: return read_records<ResponseRecord>(path);
    case Schema::kPreference: return read_records<PreferenceRecord>(path);
    case Schema::kAnnotations: return read_annotations(path);
  }
  throw InputError("unknown schema");
}

inline std::size_t write_dataset(const AnyDataset& records, const std::string& path) {
  return std::visit(
      [&](const auto& recs) -> std::size_t {
        using V = std::decay_t<decltype(recs)>;
        if constexpr (std::is_same_v<V, std::vector<GroundTruthAnnotation>>) {
          return write_annotations(recs, path);
        } else {
          return write_records(recs, path);
        }
      },
      records);
}

/// Exports (prompt, image_ref, chosen, rejected) lines for external DPO
/// trainers. Injection metadata is dropped.
inline std::size_t export_training_format(const std::vector<PreferenceRecord>& records, const std::string& path) {
  std::string out;
  for (const auto& r : records) {
    OrderedJson j{{"prompt", r.prompt},
                  {"image_ref", r.image_ref},
                  {"chosen", r.preferred_text},
                  {"rejected", r.dispreferred_text}};
    out += detail::dump_line(j);
    out += '\n';
  }
  write_text_atomic(path, out);
  return records.size();
}

}  // namespace selfinject
