#pragma once

#include <array>
#include <set>
#include <string>

#include "c2fvl/errors.hpp"

namespace c2fvl {

enum class Zone { Upper = 0, Middle = 1, Lower = 2 };

// Parsed lesion finding: laterality, lesion count and the occupied zones of
// each lung.
struct ReportAst {
  bool bilateral = false;
  int lesion_count = 0;
  std::set<Zone> left_zones;
  std::set<Zone> right_zones;

  bool operator==(const ReportAst&) const = default;

  // bilateral <=> both lungs occupied; count 0 <=> no zones
  void validate() const;
};

// 8-dim structured descriptor:
// [bilateral, count, left upper/middle/lower, right upper/middle/lower]
struct TextVector {
  std::array<int, 8> v{};

  bool operator==(const TextVector&) const = default;
  int operator[](int i) const { return v[static_cast<size_t>(i)]; }

  void validate() const;  // throws InvalidVector
  std::string to_json() const;
};

ReportAst parse_report(const std::string& text);
TextVector encode_vector(const ReportAst& ast);
std::string decode_vector(const TextVector& vec);

}  // namespace c2fvl
