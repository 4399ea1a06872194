// Coupled LTI subsystems: config ingestion, validation, neighbor structure
// and global assembly.
#pragma once

#include <dsmpc/common.hpp>
#include <dsmpc/conic.hpp>

#include <json.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace dsmpc {

using Json = nlohmann::json;

/// {x : H x <= h}. Origin must be strictly inside (h > 0).
struct Polytope {
  Matrix H;
  Vector h;

  Eigen::Index facets() const { return H.rows(); }
  Eigen::Index dim() const { return H.cols(); }

  bool contains(const Vector& x, double tol = 0.0) const {
    return ((H * x - h).array() <= tol).all();
  }
};

enum class NoiseFamily { kGaussian, kCentralConvexUnimodal };

struct Subsystem {
  int index = 0;  ///< zero-based; files and messages use index + 1
  int n = 0;
  int m = 0;
  int p = 0;
  std::map<int, Matrix> A;  ///< neighbor j -> A_ij (n_i x n_j), nonzero only
  Matrix B;
  std::map<int, Matrix> C;  ///< neighbor j -> C_ij (p_i x n_j), nonzero only
  Matrix Sigma_W;
  Matrix Sigma_D;
  Polytope X;
  std::optional<Polytope> U;
  double p_x = 0.5;
  std::optional<double> p_u;  ///< input chance constraint enforced iff set
  Matrix Q;
  Matrix R;
  NoiseFamily noise = NoiseFamily::kGaussian;
};

struct Scenario {
  std::optional<int> horizon;
  std::optional<Vector> x0;
};

class SystemGraph {
 public:
  SystemGraph() = default;

  /// Validates every block and derives neighbor sets from nonzero blocks.
  explicit SystemGraph(std::vector<Subsystem> subsystems, Scenario scenario = {})
      : subsystems_(std::move(subsystems)), scenario_(std::move(scenario)) {
    finalize();
  }

  int size() const { return static_cast<int>(subsystems_.size()); }
  const Subsystem& operator[](int i) const { return subsystems_.at(i); }
  const std::vector<Subsystem>& subsystems() const { return subsystems_; }
  const Scenario& scenario() const { return scenario_; }

  int n() const { return n_; }
  int m() const { return m_; }
  int p() const { return p_; }

  int x_offset(int i) const { return x_off_.at(i); }
  int u_offset(int i) const { return u_off_.at(i); }
  int y_offset(int i) const { return y_off_.at(i); }

  /// Ascending neighbor list N_i (contains i).
  const std::vector<int>& neighbors(int i) const { return neighbors_.at(i); }

  /// Total state dimension of N_i.
  int neighborhood_dim(int i) const {
    int d = 0;
    for (int j : neighbors(i)) d += subsystems_[j].n;
    return d;
  }

  /// Global state indices picked by T_i, in N_i order.
  std::vector<int> neighborhood_indices(int i) const {
    std::vector<int> idx;
    for (int j : neighbors(i))
      for (int k = 0; k < subsystems_[j].n; ++k) idx.push_back(x_off_[j] + k);
    return idx;
  }

  /// 0/1 row selector T_i with x_{N_i} = T_i x.
  Matrix selector(int i) const {
    const auto idx = neighborhood_indices(i);
    Matrix t = Matrix::Zero(static_cast<Eigen::Index>(idx.size()), n_);
    for (std::size_t r = 0; r < idx.size(); ++r) t(r, idx[r]) = 1.0;
    return t;
  }

  /// A_{N_i}: rows of subsystem i, columns of N_i.
  Matrix neighborhood_A(int i) const {
    return neighborhood_row(i, subsystems_[i].A, subsystems_[i].n);
  }
  Matrix neighborhood_C(int i) const {
    return neighborhood_row(i, subsystems_[i].C, subsystems_[i].p);
  }

  /// True when any subsystem declares an input chance constraint.
  bool has_input_constraints() const {
    for (const auto& s : subsystems_)
      if (s.p_u) return true;
    return false;
  }

 private:
  Matrix neighborhood_row(int i, const std::map<int, Matrix>& blocks,
                          Eigen::Index rows) const {
    Matrix out = Matrix::Zero(rows, neighborhood_dim(i));
    int c = 0;
    for (int j : neighbors(i)) {
      auto it = blocks.find(j);
      if (it != blocks.end()) out.block(0, c, rows, subsystems_[j].n) = it->second;
      c += subsystems_[j].n;
    }
    return out;
  }

  void finalize();

  std::vector<Subsystem> subsystems_;
  Scenario scenario_;
  std::vector<std::vector<int>> neighbors_;
  std::vector<int> x_off_, u_off_, y_off_;
  int n_ = 0, m_ = 0, p_ = 0;
};

namespace detail {

inline std::string pair_name(int i, int j) {
  return "(" + std::to_string(i + 1) + ", " + std::to_string(j + 1) + ")";
}

inline void expect_shape(const Matrix& mat, Eigen::Index rows, Eigen::Index cols,
                         const std::string& what) {
  if (mat.rows() != rows || mat.cols() != cols) {
    std::ostringstream os;
    os << what << ": expected " << rows << "x" << cols << ", got " << mat.rows()
       << "x" << mat.cols();
    throw Error(ErrorKind::kDimension, os.str());
  }
}

inline void expect_psd(const Matrix& mat, bool strict, const std::string& what) {
  if ((mat - mat.transpose()).cwiseAbs().maxCoeff() >
      1e-10 * std::max(1.0, mat.cwiseAbs().maxCoeff())) {
    throw Error(ErrorKind::kNotPsd, what + ": not symmetric");
  }
  if (mat.size() == 0) return;
  const double lo = conic::min_eigenvalue(mat);
  const double tol = 1e-12 * std::max(1.0, mat.norm());
  if (strict ? lo <= tol : lo < -tol) {
    throw Error(ErrorKind::kNotPsd,
                what + (strict ? ": not positive definite" : ": not positive semidefinite"));
  }
}

inline void validate_polytope(const Polytope& poly, int dim, const std::string& what) {
  if (poly.H.cols() != dim || poly.H.rows() != poly.h.size()) {
    std::ostringstream os;
    os << what << ": H is " << poly.H.rows() << "x" << poly.H.cols() << ", h has "
       << poly.h.size() << " entries, expected " << dim << " columns";
    throw Error(ErrorKind::kDimension, os.str());
  }
  for (Eigen::Index r = 0; r < poly.H.rows(); ++r) {
    if (!(poly.h(r) > 0.0)) {
      throw Error(ErrorKind::kPolytope,
                  what + ": origin not in the interior (facet " +
                      std::to_string(r + 1) + " has h <= 0)");
    }
    if (poly.H.row(r).isZero(0.0)) {
      throw Error(ErrorKind::kPolytope,
                  what + ": degenerate facet " + std::to_string(r + 1));
    }
  }
}

}  // namespace detail

inline void SystemGraph::finalize() {
  const int count = size();
  if (count == 0) throw Error(ErrorKind::kParse, "config: no subsystems");
  x_off_.assign(count, 0);
  u_off_.assign(count, 0);
  y_off_.assign(count, 0);
  n_ = m_ = p_ = 0;
  for (int i = 0; i < count; ++i) {
    Subsystem& s = subsystems_[i];
    s.index = i;
    if (s.n <= 0 || s.m < 0 || s.p < 0) {
      throw Error(ErrorKind::kDimension,
                  "subsystem " + std::to_string(i + 1) + ": invalid dimensions");
    }
    x_off_[i] = n_;
    u_off_[i] = m_;
    y_off_[i] = p_;
    n_ += s.n;
    m_ += s.m;
    p_ += s.p;
  }
  neighbors_.assign(count, {});
  for (int i = 0; i < count; ++i) {
    Subsystem& s = subsystems_[i];
    const std::string tag = "subsystem " + std::to_string(i + 1);
    auto check_blocks = [&](std::map<int, Matrix>& blocks, int rows, const char* name) {
      for (auto it = blocks.begin(); it != blocks.end();) {
        const int j = it->first;
        if (j < 0 || j >= count) {
          throw Error(ErrorKind::kDimension, tag + ": " + name + " block " +
                                                 detail::pair_name(i, j) +
                                                 " references unknown subsystem");
        }
        detail::expect_shape(it->second, rows, subsystems_[j].n,
                             std::string(name) + " block " + detail::pair_name(i, j));
        if (!it->second.allFinite()) {
          throw Error(ErrorKind::kParse, std::string(name) + " block " +
                                             detail::pair_name(i, j) + ": non-finite entry");
        }
        // Exact zero blocks carry no coupling.
        if (it->second.isZero(0.0) && j != i) {
          it = blocks.erase(it);
        } else {
          ++it;
        }
      }
    };
    check_blocks(s.A, s.n, "A");
    check_blocks(s.C, s.p, "C");
    detail::expect_shape(s.B, s.n, s.m, tag + ": B");
    detail::expect_shape(s.Sigma_W, s.n, s.n, tag + ": Sigma_W");
    detail::expect_shape(s.Sigma_D, s.p, s.p, tag + ": Sigma_D");
    detail::expect_shape(s.Q, s.n, s.n, tag + ": Q");
    detail::expect_shape(s.R, s.m, s.m, tag + ": R");
    detail::expect_psd(s.Sigma_W, false, tag + ": Sigma_W");
    detail::expect_psd(s.Sigma_D, false, tag + ": Sigma_D");
    detail::expect_psd(s.Q, false, tag + ": Q");
    detail::expect_psd(s.R, true, tag + ": R");
    detail::validate_polytope(s.X, s.n, tag + ": X");
    if (s.U) detail::validate_polytope(*s.U, s.m, tag + ": U");
    if (s.p_u && !s.U) {
      throw Error(ErrorKind::kParse, tag + ": p_u given without input polytope U");
    }
    auto check_prob = [&](double v, const char* name) {
      if (!(v > 0.0 && v < 1.0)) {
        throw Error(ErrorKind::kParse,
                    tag + ": " + name + " must lie strictly inside (0, 1)");
      }
    };
    check_prob(s.p_x, "p_x");
    if (s.p_u) check_prob(*s.p_u, "p_u");

    std::vector<int>& nb = neighbors_[i];
    nb.push_back(i);
    for (const auto& [j, blk] : s.A)
      if (j != i) nb.push_back(j);
    for (const auto& [j, blk] : s.C)
      if (j != i) nb.push_back(j);
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
  if (scenario_.x0 && scenario_.x0->size() != n_) {
    throw Error(ErrorKind::kDimension, "scenario.x0: expected length " +
                                           std::to_string(n_));
  }
  if (scenario_.horizon && *scenario_.horizon < 1) {
    throw Error(ErrorKind::kParse, "scenario.horizon must be >= 1");
  }
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix matrix_from_json(const Json& j, const std::string& path) {
  if (!j.is_array()) throw Error(ErrorKind::kParse, path + ": expected array of rows");
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  Eigen::Index cols = -1;
  Matrix out;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array()) {
      throw Error(ErrorKind::kParse, path + "[" + std::to_string(r) + "]: expected row array");
    }
    if (cols < 0) {
      cols = static_cast<Eigen::Index>(row.size());
      out.resize(rows, cols);
    } else if (static_cast<Eigen::Index>(row.size()) != cols) {
      throw Error(ErrorKind::kDimension, path + ": ragged rows");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) {
        throw Error(ErrorKind::kParse, path + "[" + std::to_string(r) + "][" +
                                           std::to_string(c) + "]: expected number");
      }
      out(r, c) = v.get<double>();
    }
  }
  if (rows == 0) out.resize(0, 0);
  return out;
}

inline Vector vector_from_json(const Json& j, const std::string& path) {
  if (!j.is_array()) throw Error(ErrorKind::kParse, path + ": expected array");
  Vector out(static_cast<Eigen::Index>(j.size()));
  for (std::size_t k = 0; k < j.size(); ++k) {
    if (!j[k].is_number()) {
      throw Error(ErrorKind::kParse, path + "[" + std::to_string(k) + "]: expected number");
    }
    out(static_cast<Eigen::Index>(k)) = j[k].get<double>();
  }
  return out;
}

inline const Json& require(const Json& obj, const char* key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw Error(ErrorKind::kParse, path + ": missing field \"" + key + "\"");
  }
  return *it;
}

inline int int_field(const Json& obj, const char* key, const std::string& path) {
  const Json& v = require(obj, key, path);
  if (!v.is_number_integer()) {
    throw Error(ErrorKind::kParse, path + "." + key + ": expected integer");
  }
  return v.get<int>();
}

inline double number_field(const Json& obj, const char* key, const std::string& path) {
  const Json& v = require(obj, key, path);
  if (!v.is_number()) throw Error(ErrorKind::kParse, path + "." + key + ": expected number");
  return v.get<double>();
}

inline std::map<int, Matrix> block_map_from_json(const Json& j, const std::string& path,
                                                 int self, int count) {
  std::map<int, Matrix> out;
  if (j.is_array()) {  // plain matrix: the local block
    out.emplace(self, matrix_from_json(j, path));
    return out;
  }
  if (!j.is_object()) throw Error(ErrorKind::kParse, path + ": expected object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    int idx = 0;
    try {
      std::size_t used = 0;
      idx = std::stoi(it.key(), &used);
      if (used != it.key().size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw Error(ErrorKind::kParse,
                  path + ": key \"" + it.key() + "\" is not a subsystem index");
    }
    if (idx < 1 || idx > count) {
      throw Error(ErrorKind::kDimension, path + ": block " + pair_name(self, idx - 1) +
                                             " references unknown subsystem");
    }
    out.emplace(idx - 1, matrix_from_json(it.value(), path + "." + it.key()));
  }
  return out;
}

inline Polytope polytope_from_json(const Json& j, const std::string& path) {
  if (!j.is_object()) throw Error(ErrorKind::kParse, path + ": expected object");
  Polytope poly;
  poly.H = matrix_from_json(require(j, "H", path), path + ".H");
  poly.h = vector_from_json(require(j, "h", path), path + ".h");
  return poly;
}

inline Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json vector_to_json(const Vector& v) {
  Json out = Json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) out.push_back(v(k));
  return out;
}

}  // namespace detail

inline SystemGraph system_from_json(const Json& doc) {
  using namespace detail;
  if (!doc.is_object()) throw Error(ErrorKind::kParse, "config: top level must be an object");
  const Json& subs = require(doc, "subsystems", "config");
  if (!subs.is_array() || subs.empty()) {
    throw Error(ErrorKind::kParse, "config.subsystems: expected non-empty array");
  }
  const int count = static_cast<int>(subs.size());
  std::vector<Subsystem> out;
  for (int i = 0; i < count; ++i) {
    const std::string path = "subsystems[" + std::to_string(i) + "]";
    const Json& js = subs[static_cast<std::size_t>(i)];
    if (!js.is_object()) throw Error(ErrorKind::kParse, path + ": expected object");
    Subsystem s;
    s.index = i;
    s.n = int_field(js, "n", path);
    s.m = int_field(js, "m", path);
    s.p = int_field(js, "p", path);
    s.A = block_map_from_json(require(js, "A", path), path + ".A", i, count);
    s.B = matrix_from_json(require(js, "B", path), path + ".B");
    s.C = block_map_from_json(require(js, "C", path), path + ".C", i, count);
    s.Sigma_W = matrix_from_json(require(js, "Sigma_W", path), path + ".Sigma_W");
    s.Sigma_D = matrix_from_json(require(js, "Sigma_D", path), path + ".Sigma_D");
    s.X = polytope_from_json(require(js, "X", path), path + ".X");
    if (js.contains("U")) s.U = polytope_from_json(js["U"], path + ".U");
    s.p_x = number_field(js, "p_x", path);
    if (js.contains("p_u")) s.p_u = number_field(js, "p_u", path);
    s.Q = matrix_from_json(require(js, "Q", path), path + ".Q");
    s.R = matrix_from_json(require(js, "R", path), path + ".R");
    if (js.contains("noise")) {
      const Json& nz = js["noise"];
      if (nz == "gaussian") {
        s.noise = NoiseFamily::kGaussian;
      } else if (nz == "ccu") {
        s.noise = NoiseFamily::kCentralConvexUnimodal;
      } else {
        throw Error(ErrorKind::kParse, path + ".noise: expected \"gaussian\" or \"ccu\"");
      }
    }
    // Empty (0-row) matrices come back 0x0; give them their declared shape.
    if (s.m == 0) s.B = Matrix::Zero(s.n, 0), s.R = Matrix::Zero(0, 0);
    out.push_back(std::move(s));
  }
  Scenario sc;
  if (doc.contains("scenario")) {
    const Json& js = doc["scenario"];
    if (js.contains("horizon")) sc.horizon = int_field(js, "horizon", "scenario");
    if (js.contains("x0")) sc.x0 = vector_from_json(js["x0"], "scenario.x0");
  }
  return SystemGraph(std::move(out), std::move(sc));
}

/// Parses a config document; parse errors carry the byte offset.
inline SystemGraph load_system(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorKind::kParse, "config: parse error at byte " +
                                       std::to_string(e.byte) + ": " + e.what());
  }
  return system_from_json(doc);
}

inline Json serialize(const SystemGraph& graph) {
  using detail::matrix_to_json;
  Json subs = Json::array();
  for (const Subsystem& s : graph.subsystems()) {
    Json js;
    js["n"] = s.n;
    js["m"] = s.m;
    js["p"] = s.p;
    Json a = Json::object();
    for (const auto& [j, blk] : s.A) a[std::to_string(j + 1)] = matrix_to_json(blk);
    js["A"] = a;
    js["B"] = matrix_to_json(s.B);
    Json c = Json::object();
    for (const auto& [j, blk] : s.C) c[std::to_string(j + 1)] = matrix_to_json(blk);
    js["C"] = c;
    js["Sigma_W"] = matrix_to_json(s.Sigma_W);
    js["Sigma_D"] = matrix_to_json(s.Sigma_D);
    js["X"] = {{"H", matrix_to_json(s.X.H)}, {"h", detail::vector_to_json(s.X.h)}};
    if (s.U) js["U"] = {{"H", matrix_to_json(s.U->H)}, {"h", detail::vector_to_json(s.U->h)}};
    js["p_x"] = s.p_x;
    if (s.p_u) js["p_u"] = *s.p_u;
    js["Q"] = matrix_to_json(s.Q);
    js["R"] = matrix_to_json(s.R);
    js["noise"] = s.noise == NoiseFamily::kGaussian ? "gaussian" : "ccu";
    subs.push_back(std::move(js));
  }
  Json doc;
  doc["subsystems"] = subs;
  const Scenario& sc = graph.scenario();
  if (sc.horizon || sc.x0) {
    Json js = Json::object();
    if (sc.horizon) js["horizon"] = *sc.horizon;
    if (sc.x0) js["x0"] = detail::vector_to_json(*sc.x0);
    doc["scenario"] = js;
  }
  return doc;
}

struct GlobalModel {
  Matrix A, B, C;
  Matrix Sigma_W, Sigma_D;
  Matrix Q, R;
};

inline GlobalModel assemble_global(const SystemGraph& g) {
  GlobalModel out;
  out.A = Matrix::Zero(g.n(), g.n());
  out.B = Matrix::Zero(g.n(), g.m());
  out.C = Matrix::Zero(g.p(), g.n());
  out.Sigma_W = Matrix::Zero(g.n(), g.n());
  out.Sigma_D = Matrix::Zero(g.p(), g.p());
  out.Q = Matrix::Zero(g.n(), g.n());
  out.R = Matrix::Zero(g.m(), g.m());
  for (int i = 0; i < g.size(); ++i) {
    const Subsystem& s = g[i];
    const int xi = g.x_offset(i), ui = g.u_offset(i), yi = g.y_offset(i);
    for (const auto& [j, blk] : s.A) out.A.block(xi, g.x_offset(j), s.n, g[j].n) = blk;
    for (const auto& [j, blk] : s.C) out.C.block(yi, g.x_offset(j), s.p, g[j].n) = blk;
    out.B.block(xi, ui, s.n, s.m) = s.B;
    out.Sigma_W.block(xi, xi, s.n, s.n) = s.Sigma_W;
    out.Sigma_D.block(yi, yi, s.p, s.p) = s.Sigma_D;
    out.Q.block(xi, xi, s.n, s.n) = s.Q;
    out.R.block(ui, ui, s.m, s.m) = s.R;
  }
  return out;
}

/// T_i · v, ordered by the ascending neighbor list.
inline Vector lift_to_neighborhood(const SystemGraph& g, int i, const Vector& global) {
  if (global.size() != g.n()) {
    throw Error(ErrorKind::kDimension, "lift_to_neighborhood: expected length " +
                                           std::to_string(g.n()));
  }
  const auto idx = g.neighborhood_indices(i);
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out(static_cast<Eigen::Index>(k)) = global(idx[k]);
  return out;
}

inline Vector local_part(const SystemGraph& g, int i, const Vector& global) {
  return global.segment(g.x_offset(i), g[i].n);
}

}  // namespace dsmpc
