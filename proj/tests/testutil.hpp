#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "scenforge/tape.hpp"

namespace testutil {

// Relative error with an absolute floor: below |g| ~ 1e-2 the comparison is
// effectively absolute at 1e-6, which sits well above central-difference
// noise.
inline double grad_err(double analytic, double numeric) {
  double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-2});
  return std::fabs(analytic - numeric) / denom;
}

// Central finite difference of eval() over one parameter entry.
inline double fd_entry(scenforge::nn::Parameter& p, std::size_t i, const std::function<double()>& eval,
                       double h = 1e-5) {
  double save = p.value[i];
  p.value[i] = save + h;
  double up = eval();
  p.value[i] = save - h;
  double dn = eval();
  p.value[i] = save;
  return (up - dn) / (2.0 * h);
}

// Compares already-accumulated p.grad against central differences of eval().
// Returns the max error seen (as defined by grad_err).
inline double max_grad_error(const std::vector<scenforge::nn::Parameter*>& params,
                             const std::function<double()>& eval, double h = 1e-5) {
  double worst = 0.0;
  for (scenforge::nn::Parameter* p : params) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      double fd = fd_entry(*p, i, eval, h);
      worst = std::max(worst, grad_err(p->grad[i], fd));
    }
  }
  return worst;
}

// Scratch directory unique to a test case; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    dir_ = std::filesystem::temp_directory_path() / ("scenforge_test_" + tag + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path dir_;
};

inline std::string read_file(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  REQUIRE(f != nullptr);
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) out.append(buf, n);
  std::fclose(f);
  return out;
}

}  // namespace testutil
