#include "cotlab/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "cotlab/common.hpp"
#include "cotlab/rng.hpp"

namespace cotlab {

std::string fmt_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) return buf;
  }
  return buf;
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoFailure, "cannot open: " + path);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoFailure, "cannot open for write: " + path);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) fail(ErrorCode::IoFailure, "short write: " + path);
}

std::uint64_t file_fnv64(const std::string& path) { return fnv1a64(read_text_file(path)); }

std::string hex64(std::uint64_t x) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

}  // namespace cotlab
