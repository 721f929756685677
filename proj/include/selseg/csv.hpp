#pragma once

#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace selseg {

/// Two-column CSV: 1-based index and value, with a header row.
inline std::string trace_csv(const std::vector<double>& values, std::string_view index_name,
                             std::string_view value_name) {
  std::ostringstream out;
  out.precision(17);
  out << index_name << ',' << value_name << '\n';
  for (std::size_t i = 0; i < values.size(); ++i) out << i + 1 << ',' << values[i] << '\n';
  return out.str();
}

}  // namespace selseg
