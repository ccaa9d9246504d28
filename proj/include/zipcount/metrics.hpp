#pragma once

// MAE, RMSE and NAE over image-level counts. NAE averages only over images
// with a positive true count.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "zipcount/io.hpp"

namespace zipcount {

struct EvalPair {
  std::string image_id;
  double truth = 0;      // c
  double predicted = 0;  // c*
};

struct EvalSummary {
  double mae = 0;
  double rmse = 0;
  std::optional<double> nae;  // empty when no image has c > 0
  std::size_t images = 0;     // M
  std::size_t positive_images = 0;  // |M+|
};

inline EvalSummary evaluate(std::span<const EvalPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("evaluate: no image pairs");
  long double abs_sum = 0, sq_sum = 0, rel_sum = 0;
  EvalSummary s;
  for (const auto& p : pairs) {
    if (!(p.truth >= 0)) throw std::domain_error("true count must be non-negative for " + p.image_id);
    const long double err = std::abs(static_cast<long double>(p.truth) - p.predicted);
    abs_sum += err;
    sq_sum += err * err;
    if (p.truth > 0) {
      rel_sum += err / p.truth;
      ++s.positive_images;
    }
  }
  s.images = pairs.size();
  s.mae = static_cast<double>(abs_sum / s.images);
  s.rmse = static_cast<double>(std::sqrt(sq_sum / s.images));
  if (s.positive_images > 0) s.nae = static_cast<double>(rel_sum / s.positive_images);
  return s;
}

/// Parses "image_id,count" CSV (header required). Duplicate ids are an error.
inline std::map<std::string, double> read_prediction_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("prediction CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "image_id,count") throw FormatError("prediction CSV header must be 'image_id,count'");
  std::map<std::string, double> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw FormatError("line " + std::to_string(lineno) + ": missing comma");
    const auto id = line.substr(0, comma);
    double value = 0;
    try {
      std::size_t used = 0;
      value = std::stod(line.substr(comma + 1), &used);
      if (comma + 1 + used != line.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw FormatError("line " + std::to_string(lineno) + ": bad count");
    }
    if (!out.emplace(id, value).second) throw FormatError("duplicate image id " + id);
  }
  return out;
}

inline std::map<std::string, double> read_prediction_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_prediction_csv(in);
}

inline std::string format_prediction_csv(std::span<const EvalPair> pairs) {
  std::ostringstream out;
  out.precision(17);
  out << "image_id,count\n";
  for (const auto& p : pairs) out << p.image_id << ',' << p.predicted << '\n';
  return out.str();
}

}  // namespace zipcount
