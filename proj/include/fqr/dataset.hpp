#ifndef FQR_DATASET_HPP
#define FQR_DATASET_HPP

#include "fqr/core.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace fqr {

/// Common sampling grid t_1 < ... < t_T shared by every subject.
class SamplingGrid {
 public:
  explicit SamplingGrid(std::vector<double> points) : points_(std::move(points)) {
    if (points_.size() < 2) throw Error("sampling grid needs at least 2 points");
    for (std::size_t l = 0; l < points_.size(); ++l) {
      if (!std::isfinite(points_[l])) throw Error("non-finite grid value at index " + std::to_string(l));
      if (l > 0 && !(points_[l] > points_[l - 1])) {
        throw Error("non-increasing grid at index " + std::to_string(l));
      }
    }
  }

  static SamplingGrid equally_spaced(double lo, double hi, std::size_t count) {
    std::vector<double> p(count);
    for (std::size_t l = 0; l < count; ++l) {
      p[l] = lo + (hi - lo) * static_cast<double>(l) / static_cast<double>(count - 1);
    }
    return SamplingGrid(std::move(p));
  }

  std::size_t size() const { return points_.size(); }
  double operator[](std::size_t l) const { return points_[l]; }
  const std::vector<double>& points() const { return points_; }
  double front() const { return points_.front(); }
  double back() const { return points_.back(); }
  double length() const { return back() - front(); }

  /// delta_T: largest adjacent gap.
  double max_gap() const {
    double g = 0.0;
    for (std::size_t l = 1; l < points_.size(); ++l) g = std::max(g, points_[l] - points_[l - 1]);
    return g;
  }

  /// Uniform refinement: `factor` sub-intervals per original interval.
  SamplingGrid refined(int factor) const {
    if (factor <= 1) return *this;
    std::vector<double> p;
    p.reserve((points_.size() - 1) * factor + 1);
    for (std::size_t l = 0; l + 1 < points_.size(); ++l) {
      for (int k = 0; k < factor; ++k) {
        p.push_back(points_[l] + (points_[l + 1] - points_[l]) * k / static_cast<double>(factor));
      }
    }
    p.push_back(points_.back());
    return SamplingGrid(std::move(p));
  }

  bool operator==(const SamplingGrid& other) const { return points_ == other.points_; }

 private:
  std::vector<double> points_;
};

/// Unit-norm linear combination a of the coefficient vector.
class Contrast {
 public:
  explicit Contrast(Vector weights) : weights_(std::move(weights)) {
    const double norm = weights_.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) throw Error("contrast must have nonzero finite norm");
    weights_ /= norm;
  }
  static Contrast unit(Eigen::Index d, Eigen::Index index) {
    if (index < 0 || index >= d) {
      throw Error("contrast index " + std::to_string(index) + " outside design with " + std::to_string(d) +
                  " columns");
    }
    return Contrast(Vector::Unit(d, index));
  }
  const Vector& weights() const { return weights_; }
  Eigen::Index size() const { return weights_.size(); }

 private:
  Vector weights_;
};

struct DatasetOptions {
  /// Smallest admissible sigma_min / sigma_max of the design.
  double rank_tolerance = 1e-10;
};

/// n x T responses on a common grid with an n x d design.
class FunctionalDataset {
 public:
  FunctionalDataset(Matrix responses, Matrix design, SamplingGrid grid, const DatasetOptions& opts = {})
      : responses_(std::move(responses)), design_(std::move(design)), grid_(std::move(grid)) {
    validate(opts);
  }

  Eigen::Index n() const { return responses_.rows(); }
  Eigen::Index T() const { return responses_.cols(); }
  Eigen::Index d() const { return design_.cols(); }
  const Matrix& responses() const { return responses_; }
  const Matrix& design() const { return design_; }
  const SamplingGrid& grid() const { return grid_; }

  FunctionalDataset with_responses(Matrix responses) const {
    return FunctionalDataset(std::move(responses), design_, grid_);
  }

 private:
  void validate(const DatasetOptions& opts) const {
    if (responses_.rows() != design_.rows()) {
      throw Error("dimension mismatch: responses have " + std::to_string(responses_.rows()) +
                  " rows but design has " + std::to_string(design_.rows()));
    }
    if (static_cast<std::size_t>(responses_.cols()) != grid_.size()) {
      throw Error("dimension mismatch: responses have " + std::to_string(responses_.cols()) +
                  " columns but grid has " + std::to_string(grid_.size()) + " points");
    }
    if (design_.cols() < 1) throw Error("design needs at least one column");
    check_finite(responses_, "responses");
    check_finite(design_, "design");
    if (design_.rows() < design_.cols()) {
      throw Error("rank-deficient design: " + std::to_string(design_.rows()) + " rows for " +
                  std::to_string(design_.cols()) + " columns");
    }
    Eigen::JacobiSVD<Matrix> svd(design_);
    const Vector& s = svd.singularValues();
    const double ratio = s(0) > 0.0 ? s(s.size() - 1) / s(0) : 0.0;
    if (!(ratio > opts.rank_tolerance)) {
      std::ostringstream msg;
      msg << "rank-deficient design: sigma_min/sigma_max = " << ratio << " (tolerance " << opts.rank_tolerance
          << ")";
      throw Error(msg.str());
    }
  }

  static void check_finite(const Matrix& m, const std::string& what) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        if (!std::isfinite(m(i, j))) {
          throw Error("non-finite " + what + " cell at row " + std::to_string(i) + ", column " + std::to_string(j));
        }
      }
    }
  }

  Matrix responses_;
  Matrix design_;
  SamplingGrid grid_;
};

struct DatasetSummary {
  Eigen::Index n = 0;
  Eigen::Index d = 0;
  Eigen::Index T = 0;
  double max_gap = 0.0;
  Vector response_min;
  Vector response_max;
};

inline DatasetSummary summarize(const FunctionalDataset& ds) {
  DatasetSummary s;
  s.n = ds.n();
  s.d = ds.d();
  s.T = ds.T();
  s.max_gap = ds.grid().max_gap();
  s.response_min = ds.responses().colwise().minCoeff().transpose();
  s.response_max = ds.responses().colwise().maxCoeff().transpose();
  return s;
}

// ---------------------------------------------------------------------------
// CSV

namespace csv {

inline std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(cell);
  return cells;
}

inline bool parse_double(const std::string& text, double& out) {
  const auto first = text.find_first_not_of(" \t");
  if (first == std::string::npos) return false;
  const auto last = text.find_last_not_of(" \t");
  const std::string trimmed = text.substr(first, last - first + 1);
  char* end = nullptr;
  errno = 0;
  out = std::strtod(trimmed.c_str(), &end);
  return end == trimmed.c_str() + trimmed.size() && errno != ERANGE;
}

/// Numeric matrix from a comma-separated file. A first row that does not
/// parse as numbers is treated as a header and skipped.
inline Matrix read_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_row(line);
    std::vector<double> values(cells.size());
    bool numeric = true;
    std::size_t bad_col = 0;
    for (std::size_t j = 0; j < cells.size(); ++j) {
      if (!parse_double(cells[j], values[j])) {
        numeric = false;
        bad_col = j;
        break;
      }
    }
    if (!numeric) {
      if (rows.empty() && line_no == 1) continue;  // header
      throw Error(path + ": non-numeric cell at row " + std::to_string(line_no) + ", column " +
                  std::to_string(bad_col + 1));
    }
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (!std::isfinite(values[j])) {
        throw Error(path + ": non-finite cell at row " + std::to_string(line_no) + ", column " +
                    std::to_string(j + 1));
      }
    }
    if (rows.empty()) {
      width = values.size();
    } else if (values.size() != width) {
      throw Error(path + ": row " + std::to_string(line_no) + " has " + std::to_string(values.size()) +
                  " cells, expected " + std::to_string(width));
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw Error(path + ": no numeric rows");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < width; ++j) m(i, j) = rows[i][j];
  }
  return m;
}

inline void write_matrix(const std::string& path, const Matrix& m) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
}

}  // namespace csv

inline FunctionalDataset load_dataset(const std::string& responses_path, const std::string& design_path,
                                      const std::string& grid_path, const DatasetOptions& opts = {}) {
  Matrix responses = csv::read_matrix(responses_path);
  Matrix design = csv::read_matrix(design_path);
  Matrix grid_m = csv::read_matrix(grid_path);
  if (grid_m.cols() != 1) throw Error(grid_path + ": grid file must have a single column");
  std::vector<double> grid(grid_m.data(), grid_m.data() + grid_m.rows());
  return FunctionalDataset(std::move(responses), std::move(design), SamplingGrid(std::move(grid)), opts);
}

inline void save_dataset(const FunctionalDataset& ds, const std::string& responses_path,
                         const std::string& design_path, const std::string& grid_path) {
  csv::write_matrix(responses_path, ds.responses());
  csv::write_matrix(design_path, ds.design());
  Vector g = Eigen::Map<const Vector>(ds.grid().points().data(), static_cast<Eigen::Index>(ds.grid().size()));
  csv::write_matrix(grid_path, g);
}

}  // namespace fqr

#endif  // FQR_DATASET_HPP
