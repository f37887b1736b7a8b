#include "carkit/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <utility>

#include "carkit/error.hpp"
#include "json.hpp"

namespace carkit {
namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

json parse_line(const std::string& line, std::size_t line_no) {
  try {
    json obj = json::parse(line);
    if (!obj.is_object()) throw ParseError(line_no, "expected a JSON object");
    return obj;
  } catch (const json::exception& e) {
    throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
  }
}

std::string required_string(const json& obj, const char* field, std::size_t line_no) {
  auto it = obj.find(field);
  if (it == obj.end()) throw SchemaError(line_no, std::string("missing required field '") + field + "'");
  if (!it->is_string()) throw SchemaError(line_no, std::string("field '") + field + "' must be a string");
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const json& obj, const char* field, std::size_t line_no) {
  auto it = obj.find(field);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw SchemaError(line_no, std::string("field '") + field + "' must be a string");
  return it->get<std::string>();
}

double optional_number(const json& obj, const char* field, double fallback, std::size_t line_no) {
  auto it = obj.find(field);
  if (it == obj.end()) return fallback;
  if (!it->is_number()) throw SchemaError(line_no, std::string("field '") + field + "' must be a number");
  return it->get<double>();
}

// Reads and splits a stream into (line number, text) for non-blank lines.
template <typename Fn>
void for_each_line(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    fn(line_no, line);
  }
}

InstructionRecord read_instruction(const json& obj, std::size_t line_no) {
  InstructionRecord rec;
  rec.id = required_string(obj, "id", line_no);
  if (rec.id.empty()) throw SchemaError(line_no, "field 'id' must be non-empty");
  rec.text = required_string(obj, "instruction", line_no);
  if (rec.text.empty()) throw SchemaError(line_no, "field 'instruction' must be non-empty");
  rec.source = optional_string(obj, "source", line_no);
  rec.task_category = optional_string(obj, "task_category", line_no);
  return rec;
}

}  // namespace

DatasetFormat dataset_format_from_string(std::string_view id) {
  if (id == "jsonl") return DatasetFormat::kJsonl;
  throw ArgumentError("unsupported dataset format '" + std::string(id) + "'");
}

void canonicalize(GeneratorDataset& dataset) {
  std::stable_sort(dataset.pairs.begin(), dataset.pairs.end(), [](const Pair& a, const Pair& b) {
    return std::tie(a.instruction.id, a.response.sample_index) <
           std::tie(b.instruction.id, b.response.sample_index);
  });
}

GeneratorDataset parse_dataset(std::istream& in, DatasetFormat /*format*/) {
  GeneratorDataset dataset;
  bool have_generator = false;
  std::map<std::pair<std::string, std::uint32_t>, std::size_t> seen;
  std::map<std::string, std::string> instruction_text;

  for_each_line(in, [&](std::size_t line_no, const std::string& line) {
    json obj = parse_line(line, line_no);
    Pair pair;
    pair.instruction = read_instruction(obj, line_no);
    ResponseRecord& resp = pair.response;
    resp.instruction_id = pair.instruction.id;
    resp.text = required_string(obj, "response", line_no);
    resp.generator_id = required_string(obj, "generator", line_no);
    if (resp.generator_id.empty()) throw SchemaError(line_no, "field 'generator' must be non-empty");
    resp.temperature = optional_number(obj, "temperature", 0.0, line_no);
    resp.top_p = optional_number(obj, "top_p", 1.0, line_no);
    if (!std::isfinite(resp.temperature) || resp.temperature < 0.0)
      throw SchemaError(line_no, "field 'temperature' must be a nonnegative number");
    if (!std::isfinite(resp.top_p) || resp.top_p <= 0.0 || resp.top_p > 1.0)
      throw SchemaError(line_no, "field 'top_p' must lie in (0, 1]");
    if (auto it = obj.find("sample_index"); it != obj.end()) {
      if (!it->is_number_unsigned() || it->get<std::uint64_t>() > UINT32_MAX)
        throw SchemaError(line_no, "field 'sample_index' must be a nonnegative integer");
      resp.sample_index = it->get<std::uint32_t>();
    }

    if (!have_generator) {
      dataset.generator_id = resp.generator_id;
      have_generator = true;
    } else if (resp.generator_id != dataset.generator_id) {
      throw SchemaError(line_no, "generator '" + resp.generator_id + "' differs from '" +
                                     dataset.generator_id + "' declared earlier in the file");
    }

    if (auto base = optional_string(obj, "base_model", line_no)) {
      if (dataset.base_model_id && *dataset.base_model_id != *base)
        throw SchemaError(line_no, "conflicting 'base_model' values");
      dataset.base_model_id = std::move(base);
    }

    auto key = std::make_pair(resp.instruction_id, resp.sample_index);
    if (auto [it, inserted] = seen.emplace(key, line_no); !inserted) {
      throw DuplicateKeyError(line_no, "duplicate (id='" + resp.instruction_id + "', generator='" +
                                           resp.generator_id + "', sample_index=" +
                                           std::to_string(resp.sample_index) + "), first seen on line " +
                                           std::to_string(it->second));
    }
    if (auto [it, inserted] = instruction_text.emplace(pair.instruction.id, pair.instruction.text);
        !inserted && it->second != pair.instruction.text) {
      throw SchemaError(line_no, "instruction text for id '" + pair.instruction.id +
                                     "' differs from an earlier line");
    }
    dataset.pairs.push_back(std::move(pair));
  });

  canonicalize(dataset);
  return dataset;
}

GeneratorDataset parse_dataset(std::string_view text, DatasetFormat format) {
  std::istringstream in{std::string(text)};
  return parse_dataset(in, format);
}

GeneratorDataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset file '" + path.string() + "'");
  try {
    return parse_dataset(in, format);
  } catch (const ParseError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<InstructionRecord> parse_instructions(std::istream& in) {
  std::vector<InstructionRecord> out;
  std::map<std::string, std::size_t> seen;
  for_each_line(in, [&](std::size_t line_no, const std::string& line) {
    InstructionRecord rec = read_instruction(parse_line(line, line_no), line_no);
    if (auto [it, inserted] = seen.emplace(rec.id, line_no); !inserted)
      throw DuplicateKeyError(line_no, "duplicate instruction id '" + rec.id + "', first seen on line " +
                                           std::to_string(it->second));
    out.push_back(std::move(rec));
  });
  std::sort(out.begin(), out.end(),
            [](const InstructionRecord& a, const InstructionRecord& b) { return a.id < b.id; });
  return out;
}

std::vector<InstructionRecord> load_instructions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open instruction file '" + path.string() + "'");
  try {
    return parse_instructions(in);
  } catch (const ParseError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

ValidationReport validate_dataset(const GeneratorDataset& dataset) {
  ValidationReport report;
  report.record_count = dataset.pairs.size();
  auto error = [&](std::size_t line, std::string reason) {
    report.errors.push_back({line, std::move(reason)});
  };

  std::set<std::pair<std::string, std::uint32_t>> keys;
  std::map<std::string, std::string> texts;
  std::map<std::string, std::size_t> per_instruction;
  std::set<std::uint32_t> sample_indices;

  for (std::size_t i = 0; i < dataset.pairs.size(); ++i) {
    const std::size_t line = i + 1;
    const auto& ins = dataset.pairs[i].instruction;
    const auto& resp = dataset.pairs[i].response;

    if (ins.id.empty()) error(line, "empty instruction id");
    if (ins.text.empty()) error(line, "empty instruction text");
    if (resp.instruction_id != ins.id)
      error(line, "response references unknown instruction_id '" + resp.instruction_id + "'");
    if (resp.generator_id != dataset.generator_id)
      error(line, "response generator '" + resp.generator_id + "' does not match dataset generator '" +
                      dataset.generator_id + "'");
    if (!std::isfinite(resp.temperature) || resp.temperature < 0.0) error(line, "temperature must be nonnegative");
    if (!std::isfinite(resp.top_p) || resp.top_p <= 0.0 || resp.top_p > 1.0) error(line, "top_p must lie in (0, 1]");
    if (!keys.emplace(resp.instruction_id, resp.sample_index).second)
      error(line, "duplicate (instruction_id, generator_id, sample_index)");
    if (auto [it, inserted] = texts.emplace(ins.id, ins.text); !inserted && it->second != ins.text)
      error(line, "conflicting instruction text for id '" + ins.id + "'");
    if (resp.degenerate()) report.warnings.push_back({line, "degenerate response"});

    ++per_instruction[ins.id];
    sample_indices.insert(resp.sample_index);

    if (i > 0) {
      const auto& prev = dataset.pairs[i - 1];
      if (std::tie(prev.instruction.id, prev.response.sample_index) >
          std::tie(ins.id, resp.sample_index))
        error(line, "pairs are not in canonical order");
    }
  }

  if (sample_indices.size() <= 1) {
    for (const auto& [id, count] : per_instruction)
      if (count > 1) error(0, "instruction '" + id + "' has " + std::to_string(count) + " responses");
  }
  return report;
}

void write_dataset(const GeneratorDataset& dataset, std::ostream& out, DatasetFormat /*format*/) {
  for (const auto& pair : dataset.pairs) {
    ordered_json obj;
    obj["id"] = pair.instruction.id;
    obj["instruction"] = pair.instruction.text;
    obj["response"] = pair.response.text;
    obj["generator"] = pair.response.generator_id;
    obj["temperature"] = pair.response.temperature;
    obj["top_p"] = pair.response.top_p;
    obj["sample_index"] = pair.response.sample_index;
    if (pair.instruction.source) obj["source"] = *pair.instruction.source;
    if (pair.instruction.task_category) obj["task_category"] = *pair.instruction.task_category;
    if (dataset.base_model_id) obj["base_model"] = *dataset.base_model_id;
    out << obj.dump() << '\n';
  }
}

std::string write_dataset(const GeneratorDataset& dataset, DatasetFormat format) {
  std::ostringstream out;
  write_dataset(dataset, out, format);
  return out.str();
}

}  // namespace carkit
