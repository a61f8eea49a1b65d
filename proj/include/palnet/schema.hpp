#pragma once

#include <string>
#include <vector>

#include "palnet/common.hpp"

// The default 50-landmark facial schema: 12 midline landmarks followed by 19
// right-side and 19 left-side paired landmarks (suffix R/L). All shipped
// measurement tables and the synthetic generator key off these names.

namespace palnet {

inline const std::vector<std::string>& paired_landmark_stems() {
  static const std::vector<std::string> stems = {"T",  "Pra", "Sa", "Pa",  "Sba", "Ft", "Zy",
                                                 "Go", "Os",  "Ex", "Or",  "En",  "Chk", "Ac",
                                                 "Al", "Itn", "Stn", "Cph", "Ch"};
  return stems;
}

inline const std::vector<std::string>& midline_landmark_names() {
  static const std::vector<std::string> names = {"Tr", "G",  "N",  "Prn", "C",  "Sn",
                                                 "Ls", "Sto", "Li", "Sl",  "Pg", "Gn"};
  return names;
}

/// Canonical order: midline, then all right-side, then all left-side.
inline const std::vector<std::string>& default_landmark_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v = midline_landmark_names();
    for (const auto& s : paired_landmark_stems()) v.push_back(s + "R");
    for (const auto& s : paired_landmark_stems()) v.push_back(s + "L");
    return v;
  }();
  return names;
}

/// Region group of a schema landmark: "midline", "right", or "left".
inline std::string landmark_region(const std::string& name) {
  for (const auto& m : midline_landmark_names())
    if (name == m) return "midline";
  for (const auto& s : paired_landmark_stems()) {
    if (name == s + "R") return "right";
    if (name == s + "L") return "left";
  }
  throw Error("landmark_region: unknown landmark name " + name);
}

/// The eight ear-adjacent landmarks that sit on frequently corrupted mesh
/// regions; the re-analysis drops these and recomputes every metric.
inline const std::vector<std::string>& peripheral_ear_landmarks() {
  static const std::vector<std::string> names = {"PraR", "SaR", "PaR", "SbaR",
                                                 "PraL", "SaL", "PaL", "SbaL"};
  return names;
}

}  // namespace palnet
