#include "bitlm/metrics.hpp"

#include "bitlm/errors.hpp"

namespace bitlm {

RecordWriter::RecordWriter(const std::filesystem::path& path, bool truncate)
    : out_(path, truncate ? std::ios::trunc : std::ios::app) {
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
}

void RecordWriter::write(const std::string& kind, nlohmann::json record) {
  out_ << format_record(kind, record) << '\n';
  out_.flush();
}

std::string format_record(const std::string& kind, const nlohmann::json& record) {
  // ordered_json keeps schema and kind in front for human readers
  nlohmann::ordered_json line;
  line["schema"] = kRecordSchema;
  line["kind"] = kind;
  for (const auto& [key, value] : record.items()) line[key] = value;
  return line.dump();
}

}  // namespace bitlm
