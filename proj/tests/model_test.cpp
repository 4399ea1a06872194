#include <dsmpc/model.hpp>

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

namespace dsmpc {
namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string reference_config() { return read_file(DSMPC_SOURCE_DIR "/configs/three_subsystems.json"); }

// One scalar subsystem with A_ii = a and no coupling.
Json scalar_subsystem(double a) {
  Json j = Json::parse(R"({"n":1,"m":1,"p":1,"B":[[1]],"C":[[1]],
    "Sigma_W":[[0.01]],"Sigma_D":[[0.01]],"X":{"H":[[1],[-1]],"h":[1,1]},
    "p_x":0.9,"Q":[[1]],"R":[[1]]})");
  j["A"] = Json::object();
  return j;
}

Json two_decoupled() {
  Json a = scalar_subsystem(0.5);
  a["A"]["1"] = Json::array({Json::array({0.5})});
  Json b = scalar_subsystem(0.5);
  b["A"]["2"] = Json::array({Json::array({0.5})});
  b["C"] = Json{{"2", Json::array({Json::array({1.0})})}};
  return Json{{"subsystems", Json::array({a, b})}};
}

TEST(LoadSystem, ReferenceExampleNeighborhoods) {
  const SystemGraph g = load_system(reference_config());
  ASSERT_EQ(g.size(), 3);
  EXPECT_EQ(g.n(), 6);
  EXPECT_EQ(g.m(), 3);
  EXPECT_EQ(g.p(), 3);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(g.neighbors(i), (std::vector<int>{0, 1, 2}));
    EXPECT_EQ(g.neighborhood_dim(i), 6);
  }
  ASSERT_TRUE(g.scenario().horizon.has_value());
  EXPECT_EQ(*g.scenario().horizon, 15);
}

TEST(LoadSystem, SingleDecoupledSubsystem) {
  Json s = scalar_subsystem(2.0);
  s["A"]["1"] = Json::array({Json::array({2.0})});
  const SystemGraph g = system_from_json(Json{{"subsystems", Json::array({s})}});
  EXPECT_EQ(g.neighbors(0), std::vector<int>{0});
}

TEST(LoadSystem, WrongCouplingShapeNamesPair) {
  Json doc = Json::parse(reference_config());
  doc["subsystems"][0]["A"]["2"] = Json::array({Json::array({0.1}), Json::array({0.1})});
  try {
    system_from_json(doc);
    FAIL() << "expected dimension error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimension);
    EXPECT_NE(std::string(e.what()).find("(1, 2)"), std::string::npos) << e.what();
  }
}

TEST(LoadSystem, ParseErrorCarriesLocation) {
  try {
    load_system("{\"subsystems\": [ {\"n\": 2,, } ]}");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParse);
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos);
  }
}

TEST(LoadSystem, RejectsIndefiniteCovariance) {
  Json doc = Json::parse(reference_config());
  doc["subsystems"][1]["Sigma_W"] = Json::parse("[[0.005, 0.01], [0.01, 0.005]]");
  try {
    system_from_json(doc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNotPsd);
  }
}

TEST(LoadSystem, RejectsPolytopeWithoutOrigin) {
  Json doc = Json::parse(reference_config());
  doc["subsystems"][2]["X"]["h"] = Json::parse("[0.5, 0]");
  try {
    system_from_json(doc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kPolytope);
  }
}

TEST(LoadSystem, RejectsProbabilityOutsideUnitInterval) {
  Json doc = Json::parse(reference_config());
  doc["subsystems"][0]["p_x"] = 1.0;
  EXPECT_THROW(system_from_json(doc), Error);
}

TEST(LoadSystem, ExactZeroBlockIsNotCoupling) {
  Json doc = two_decoupled();
  doc["subsystems"][0]["A"]["2"] = Json::array({Json::array({0.0})});
  const SystemGraph g = system_from_json(doc);
  EXPECT_EQ(g.neighbors(0), std::vector<int>{0});
  doc["subsystems"][0]["A"]["2"] = Json::array({Json::array({1e-300})});
  EXPECT_EQ(system_from_json(doc).neighbors(0), (std::vector<int>{0, 1}));
}

TEST(LoadSystem, OutputCouplingCreatesNeighbor) {
  Json doc = two_decoupled();
  doc["subsystems"][1]["C"]["1"] = Json::array({Json::array({0.3})});
  const SystemGraph g = system_from_json(doc);
  EXPECT_EQ(g.neighbors(0), std::vector<int>{0});
  EXPECT_EQ(g.neighbors(1), (std::vector<int>{0, 1}));
}

TEST(Serialize, RoundTrip) {
  const SystemGraph g = load_system(reference_config());
  const Json once = serialize(g);
  const SystemGraph back = system_from_json(once);
  EXPECT_EQ(serialize(back), once);
  const GlobalModel a = assemble_global(g);
  const GlobalModel b = assemble_global(back);
  EXPECT_EQ(a.A, b.A);
  EXPECT_EQ(a.C, b.C);
  EXPECT_EQ(a.Sigma_W, b.Sigma_W);
}

TEST(AssembleGlobal, ReferenceBlocks) {
  const SystemGraph g = load_system(reference_config());
  const GlobalModel gm = assemble_global(g);
  ASSERT_EQ(gm.A.rows(), 6);
  Matrix aii(2, 2), aij(2, 2);
  aii << 1, 1, 0, 1;
  aij << 0.1, 0, 0.1, 0.1;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      EXPECT_EQ(Matrix(gm.A.block(2 * i, 2 * j, 2, 2)), i == j ? aii : aij);
      const Matrix bij = gm.B.block(2 * i, j, 2, 1);
      EXPECT_EQ(bij, i == j ? Matrix(Eigen::Vector2d(0, 1)) : Matrix::Zero(2, 1));
    }
  }
  EXPECT_DOUBLE_EQ(gm.C(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(gm.C(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(gm.C(0, 2), 0.0);
}

TEST(AssembleGlobal, NeighborRelationRecoveredFromBlocks) {
  Json doc = two_decoupled();
  doc["subsystems"][1]["A"]["1"] = Json::array({Json::array({0.2})});
  const SystemGraph g = system_from_json(doc);
  const GlobalModel gm = assemble_global(g);
  for (int i = 0; i < g.size(); ++i) {
    for (int j = 0; j < g.size(); ++j) {
      const bool nonzero =
          !gm.A.block(g.x_offset(i), g.x_offset(j), g[i].n, g[j].n).isZero(0.0) ||
          !gm.C.block(g.y_offset(i), g.x_offset(j), g[i].p, g[j].n).isZero(0.0);
      const auto& nb = g.neighbors(i);
      const bool listed = std::find(nb.begin(), nb.end(), j) != nb.end();
      EXPECT_EQ(listed, nonzero || i == j) << i << "," << j;
    }
  }
}

TEST(AssembleGlobal, DecoupledIsBlockDiagonal) {
  const GlobalModel gm = assemble_global(system_from_json(two_decoupled()));
  EXPECT_EQ(gm.A(0, 1), 0.0);
  EXPECT_EQ(gm.A(1, 0), 0.0);
}

TEST(LiftToNeighborhood, Cases) {
  const SystemGraph g = load_system(reference_config());
  Vector x(6);
  x << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(lift_to_neighborhood(g, 0, x), x);
  EXPECT_EQ(g.selector(0) * x, x);
  EXPECT_TRUE(lift_to_neighborhood(g, 1, Vector::Zero(6)).isZero(0.0));
  EXPECT_THROW(lift_to_neighborhood(g, 0, Vector::Zero(5)), Error);

  const SystemGraph d = system_from_json(two_decoupled());
  Vector y(2);
  y << 7, 8;
  EXPECT_EQ(lift_to_neighborhood(d, 1, y), Vector::Constant(1, 8.0));
}

TEST(NeighborhoodMatrices, MatchGlobalRows) {
  const SystemGraph g = load_system(reference_config());
  const GlobalModel gm = assemble_global(g);
  for (int i = 0; i < g.size(); ++i) {
    const Matrix rows = gm.A.middleRows(g.x_offset(i), g[i].n);
    EXPECT_EQ(g.neighborhood_A(i), Matrix(rows * g.selector(i).transpose()));
  }
}

}  // namespace
}  // namespace dsmpc
