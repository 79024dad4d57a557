#include "c2fvl/report_codec.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <vector>

namespace c2fvl {

namespace {

const std::map<std::string, int> kCountWords = {
    {"one", 1}, {"two", 2}, {"three", 3}, {"four", 4},  {"five", 5},
    {"six", 6}, {"seven", 7}, {"eight", 8}, {"nine", 9},
};

const char* kCountNames[] = {"",    "one", "two",   "three", "four",
                             "five", "six", "seven", "eight", "nine"};

std::vector<std::string> tokenize(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char ch : text) {
    if (ch == ',' || ch == '.' || ch == ';') {
      cleaned.push_back(' ');
    } else {
      cleaned.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  std::istringstream is(cleaned);
  std::vector<std::string> tokens;
  for (std::string tok; is >> tok;) tokens.push_back(tok);
  return tokens;
}

bool is_zone_word(const std::string& t, Zone* z) {
  if (t == "upper") { *z = Zone::Upper; return true; }
  if (t == "middle") { *z = Zone::Middle; return true; }
  if (t == "lower") { *z = Zone::Lower; return true; }
  return false;
}

std::string zones_phrase(const std::set<Zone>& zones, const char* side) {
  std::string out;
  for (Zone z : {Zone::Upper, Zone::Middle, Zone::Lower}) {
    if (!zones.count(z)) continue;
    out += (z == Zone::Upper ? "upper " : z == Zone::Middle ? "middle " : "lower ");
  }
  out += side;
  out += " lung";
  return out;
}

}  // namespace

void ReportAst::validate() const {
  const bool both = !left_zones.empty() && !right_zones.empty();
  if (bilateral != both)
    throw InconsistentReport(bilateral ? "bilateral report must name zones in both lungs"
                                       : "zones in both lungs require a bilateral report");
  const bool any = !left_zones.empty() || !right_zones.empty();
  if ((lesion_count == 0) == any)
    throw InconsistentReport(lesion_count == 0 ? "zero lesions but zones are given"
                                               : "lesions reported without any zone");
}

void TextVector::validate() const {
  if (v[0] != 0 && v[0] != 1) throw InvalidVector("v[0] must be 0 or 1");
  if (v[1] < 0) throw InvalidVector("v[1] must be non-negative");
  for (int i = 2; i < 8; ++i)
    if (v[i] != 0 && v[i] != 1) throw InvalidVector("v[" + std::to_string(i) + "] must be 0 or 1");
  const bool left = v[2] || v[3] || v[4];
  const bool right = v[5] || v[6] || v[7];
  if ((v[0] == 1) != (left && right))
    throw InvalidVector("bilateral flag inconsistent with zone indicators");
  if ((v[1] == 0) == (left || right))
    throw InvalidVector("lesion count inconsistent with zone indicators");
}

std::string TextVector::to_json() const {
  std::string out = "[";
  for (int i = 0; i < 8; ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out + "]";
}

ReportAst parse_report(const std::string& text) {
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw UnparseableReport("empty report");

  size_t i = 0;
  auto peek = [&]() -> const std::string& {
    static const std::string kEnd;
    return i < tokens.size() ? tokens[i] : kEnd;
  };
  auto expect = [&](const std::string& word) {
    if (peek() != word)
      throw UnparseableReport("expected '" + word + "' near token " + std::to_string(i) +
                              (i < tokens.size() ? " ('" + tokens[i] + "')" : " (end)"));
    ++i;
  };

  ReportAst ast;

  if (peek() == "no") {
    ++i;
    expect("pulmonary");
    expect("infection");
    if (i != tokens.size()) throw UnparseableReport("trailing tokens after 'no pulmonary infection'");
    return ast;  // zero case; invariants hold by construction
  }

  bool saw_bilateral_word = false, saw_unilateral_word = false;
  if (peek() == "bilateral") {
    saw_bilateral_word = true;
    ++i;
  } else if (peek() == "unilateral") {
    saw_unilateral_word = true;
    ++i;
  }
  expect("pulmonary");
  expect("infection");

  // lesion count: digits, or the words one..nine
  const std::string count_tok = peek();
  if (count_tok.empty()) throw UnparseableReport("missing lesion count");
  if (auto it = kCountWords.find(count_tok); it != kCountWords.end()) {
    ast.lesion_count = it->second;
  } else if (std::all_of(count_tok.begin(), count_tok.end(),
                         [](unsigned char c) { return std::isdigit(c); })) {
    ast.lesion_count = std::stoi(count_tok);
  } else {
    throw UnparseableReport("unrecognized count token '" + count_tok + "'");
  }
  ++i;
  expect("infected");
  if (peek() == "area" || peek() == "areas") {
    ++i;
  } else {
    throw UnparseableReport("expected 'area(s)'");
  }

  // one or more "<zones> left|right lung" phrases joined by "and"
  while (true) {
    std::set<Zone> zones;
    Zone z;
    while (is_zone_word(peek(), &z)) {
      zones.insert(z);
      ++i;
    }
    if (zones.empty()) throw UnparseableReport("expected zone words before lung side");
    std::set<Zone>* side = nullptr;
    if (peek() == "left") {
      side = &ast.left_zones;
    } else if (peek() == "right") {
      side = &ast.right_zones;
    } else {
      throw UnparseableReport("expected 'left' or 'right'");
    }
    ++i;
    expect("lung");
    side->insert(zones.begin(), zones.end());
    if (peek() == "and") {
      ++i;
      continue;
    }
    break;
  }
  if (i != tokens.size()) throw UnparseableReport("trailing tokens '" + tokens[i] + "'");

  const bool both = !ast.left_zones.empty() && !ast.right_zones.empty();
  if (saw_bilateral_word && !both)
    throw InconsistentReport("'bilateral' given but zones name only one lung");
  if (saw_unilateral_word && both)
    throw InconsistentReport("'unilateral' given but zones name both lungs");
  ast.bilateral = both;  // absence of 'bilateral' with one-sided zones stays unilateral
  ast.validate();
  return ast;
}

TextVector encode_vector(const ReportAst& ast) {
  TextVector out;
  out.v[0] = ast.bilateral ? 1 : 0;
  out.v[1] = ast.lesion_count;
  out.v[2] = ast.left_zones.count(Zone::Upper) ? 1 : 0;
  out.v[3] = ast.left_zones.count(Zone::Middle) ? 1 : 0;
  out.v[4] = ast.left_zones.count(Zone::Lower) ? 1 : 0;
  out.v[5] = ast.right_zones.count(Zone::Upper) ? 1 : 0;
  out.v[6] = ast.right_zones.count(Zone::Middle) ? 1 : 0;
  out.v[7] = ast.right_zones.count(Zone::Lower) ? 1 : 0;
  return out;
}

std::string decode_vector(const TextVector& vec) {
  vec.validate();
  if (vec.v[1] == 0) return "No pulmonary infection";

  std::set<Zone> left, right;
  if (vec.v[2]) left.insert(Zone::Upper);
  if (vec.v[3]) left.insert(Zone::Middle);
  if (vec.v[4]) left.insert(Zone::Lower);
  if (vec.v[5]) right.insert(Zone::Upper);
  if (vec.v[6]) right.insert(Zone::Middle);
  if (vec.v[7]) right.insert(Zone::Lower);

  std::string out = vec.v[0] ? "Bilateral" : "Unilateral";
  out += " pulmonary infection, ";
  out += vec.v[1] <= 9 ? kCountNames[vec.v[1]] : std::to_string(vec.v[1]);
  out += vec.v[1] == 1 ? " infected area, " : " infected areas, ";
  if (!left.empty()) out += zones_phrase(left, "left");
  if (!left.empty() && !right.empty()) out += " and ";
  if (!right.empty()) out += zones_phrase(right, "right");
  return out;
}

}  // namespace c2fvl
