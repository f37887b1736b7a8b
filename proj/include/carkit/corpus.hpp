#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace carkit {

struct InstructionRecord {
  std::string id;
  std::string text;
  std::optional<std::string> source;
  std::optional<std::string> task_category;

  bool operator==(const InstructionRecord&) const = default;
};

struct ResponseRecord {
  std::string instruction_id;
  std::string generator_id;
  std::string text;
  double temperature = 0.0;
  double top_p = 1.0;
  std::uint32_t sample_index = 0;

  // Generators can emit empty strings; such responses are kept and flagged.
  bool degenerate() const { return text.empty(); }

  bool operator==(const ResponseRecord&) const = default;
};

struct Pair {
  InstructionRecord instruction;
  ResponseRecord response;

  bool operator==(const Pair&) const = default;
};

/// All responses attributed to one response generator. After ingestion the
/// pairs are in canonical order: instruction id (bytewise), then sample_index.
struct GeneratorDataset {
  std::string generator_id;
  std::optional<std::string> base_model_id;
  std::vector<Pair> pairs;

  bool empty() const { return pairs.empty(); }
  std::size_t size() const { return pairs.size(); }

  bool operator==(const GeneratorDataset&) const = default;
};

struct ValidationIssue {
  std::size_t line = 0;  // 1-based position of the offending pair
  std::string reason;
};

struct ValidationReport {
  std::size_t record_count = 0;
  std::vector<ValidationIssue> errors;
  std::vector<ValidationIssue> warnings;

  bool accepted() const { return errors.empty(); }
};

enum class DatasetFormat { kJsonl };

/// Accepts "jsonl" (the canonical format); anything else is an ArgumentError.
DatasetFormat dataset_format_from_string(std::string_view id);

/// Sorts pairs into canonical order (instruction id, then sample_index).
void canonicalize(GeneratorDataset& dataset);

/// Reads newline-delimited JSON, one pair per line. Blank lines are skipped.
/// Throws ParseError / SchemaError / DuplicateKeyError carrying the 1-based
/// line number of the first offending line.
GeneratorDataset parse_dataset(std::istream& in, DatasetFormat format = DatasetFormat::kJsonl);
GeneratorDataset parse_dataset(std::string_view text, DatasetFormat format = DatasetFormat::kJsonl);

/// Opens and parses a dataset file; a missing or unreadable file is a DataError.
GeneratorDataset load_dataset(const std::filesystem::path& path,
                              DatasetFormat format = DatasetFormat::kJsonl);

/// Reads instruction-only JSONL (`id`, `instruction`, optional `source` and
/// `task_category`; other fields are ignored). Sorted by id, ids unique.
std::vector<InstructionRecord> parse_instructions(std::istream& in);
std::vector<InstructionRecord> load_instructions(const std::filesystem::path& path);

ValidationReport validate_dataset(const GeneratorDataset& dataset);

void write_dataset(const GeneratorDataset& dataset, std::ostream& out,
                   DatasetFormat format = DatasetFormat::kJsonl);
std::string write_dataset(const GeneratorDataset& dataset,
                          DatasetFormat format = DatasetFormat::kJsonl);

}  // namespace carkit
