#pragma once

// Hand-computed EM/F1 cases.

#include <array>
#include <string_view>

namespace caqa::test {

struct MetricCase {
  std::string_view prediction;
  std::string_view gold;
  double em;
  double f1;
};

inline constexpr std::array<MetricCase, 12> kMetricCases = {{
    {"Kenny Shiels", "Kenny Shiels", 1.0, 1.0},
    {"the Kenny Shiels", "Kenny Shiels", 1.0, 1.0},
    {"Kenny", "Kenny Shiels", 0.0, 2.0 / 3.0},
    {"The Cat!", "cat", 1.0, 1.0},
    {"", "", 1.0, 1.0},
    {"", "Kilmarnock", 0.0, 0.0},
    {"Kilmarnock", "", 0.0, 0.0},
    {"Rugby Park", "Portugal", 0.0, 0.0},
    {"a  White   Elephant.", "white elephant", 1.0, 1.0},
    {"an apple a day", "apple day", 1.0, 1.0},
    {"park rugby park", "Rugby Park", 0.0, 0.8},
    {"U.S. Army", "us army corps", 0.0, 0.8},
}};

}  // namespace caqa::test
