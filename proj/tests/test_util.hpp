#ifndef FQR_TEST_UTIL_HPP
#define FQR_TEST_UTIL_HPP

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "fqr/core.hpp"

namespace fqr::test {

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fqr_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

inline Matrix random_psd(Eigen::Index T, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Matrix A(T, T + 2);
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j) A(i, j) = z(rng);
  return A * A.transpose() / static_cast<double>(A.cols());
}

}  // namespace fqr::test

#endif
