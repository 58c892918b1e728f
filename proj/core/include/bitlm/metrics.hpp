#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

namespace bitlm {

/// Schema tag carried by every machine-readable record.
inline constexpr const char* kRecordSchema = "bitlm/1";

/// Append-only JSON Lines stream. Each record gets "schema" and "kind"
/// fields and is flushed on write.
class RecordWriter {
 public:
  RecordWriter() = default;
  /// `truncate` starts a fresh file; otherwise records are appended.
  RecordWriter(const std::filesystem::path& path, bool truncate);

  bool is_open() const { return out_.is_open(); }
  void write(const std::string& kind, nlohmann::json record);

 private:
  std::ofstream out_;
};

/// One line, schema and kind first.
std::string format_record(const std::string& kind, const nlohmann::json& record);

}  // namespace bitlm
