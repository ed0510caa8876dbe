#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace advex {

enum class Decision { Unchanged, Unsure, Changed };

/// Throws FormatError for anything but "unchanged", "unsure" or "changed".
Decision decision_from_string(const std::string& s);
std::string to_string(Decision d);

/// One line of the annotation log.
struct AnnotationRecord {
  static constexpr int kVersion = 1;

  std::string id;
  std::string source_id;
  std::string image_path;  // AETN file holding the adversarial image
  std::size_t original_label = 0;
  std::size_t predicted_class = 0;
  Decision decision = Decision::Unsure;
  std::string annotator;
  std::int64_t timestamp = 0;  // UTC seconds
};

std::string to_json_line(const AnnotationRecord& r);
AnnotationRecord parse_annotation_line(const std::string& line);

/// Reads every non-blank line; errors carry the 1-based line number.
std::vector<AnnotationRecord> read_annotations(std::istream& is);
std::vector<AnnotationRecord> load_annotations(const std::string& path);
void write_annotations(std::ostream& os, const std::vector<AnnotationRecord>& records);

}  // namespace advex
