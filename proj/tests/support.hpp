#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "amortenc/rng.hpp"
#include "amortenc/tensor.hpp"

namespace amortenc::test {

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("amortenc_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename T>
BasicTensor<T> random_tensor(Shape shape, CounterRng& rng, double stddev = 1.0) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

// Worst elementwise relative error; entries where both sides are below
// `floor` in magnitude are compared against `floor` instead.
inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                            double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

// Central differences of `loss` with respect to every entry of `params`.
inline std::vector<double> numeric_gradient(const std::vector<BasicTensor<double>*>& params,
                                            const std::function<double()>& loss, double h = 1e-6) {
  std::vector<double> out;
  for (auto* t : params) {
    for (auto& v : t->values()) {
      const double saved = v;
      v = saved + h;
      const double up = loss();
      v = saved - h;
      const double down = loss();
      v = saved;
      out.push_back((up - down) / (2 * h));
    }
  }
  return out;
}

template <typename T>
std::vector<double> flatten(const std::vector<const BasicTensor<T>*>& tensors) {
  std::vector<double> out;
  for (const auto* t : tensors)
    for (auto v : t->values()) out.push_back(static_cast<double>(v));
  return out;
}

}  // namespace amortenc::test
