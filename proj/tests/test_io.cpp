#include "doctest.h"
#include "support.hpp"

#include "qlmm/error.hpp"
#include "qlmm/io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace qlmm;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("qlmm_test_" + name)).string();
}

std::string write_temp(const std::string& name, const std::string& text) {
  const std::string path = temp_path(name);
  std::ofstream(path) << text;
  return path;
}

LongFormatSchema schema_xz() {
  LongFormatSchema s;
  s.cluster = "g";
  s.response = "y";
  s.fixed = {"x1", "x2"};
  s.random = {"z1"};
  return s;
}

}  // namespace

TEST_CASE("long format regrouping") {
  const auto path = write_temp("interleaved.csv",
                               "g,y,x1,x2,z1\n"
                               "b,1,1,2,1\n"
                               "a,2,3,4,1\n"
                               "b,3,5,6,0.5\n"
                               "c,4,7,8,1\n"
                               "a,5,9,10,2\n");
  const auto d = load_csv(path, schema_xz());
  REQUIRE(d.n() == 3);
  CHECK(d.cluster(0).id == "b");
  CHECK(d.cluster(1).id == "a");
  CHECK(d.cluster(2).id == "c");
  CHECK(d.cluster(0).y == (Vector(2) << 1, 3).finished());
  CHECK(d.cluster(1).X == (Matrix(2, 2) << 3, 4, 9, 10).finished());
  CHECK(d.cluster(0).Z(1, 0) == 0.5);
  CHECK(d.total_observations() == 5);
}

TEST_CASE("column selection follows the schema order") {
  const auto path = write_temp("reordered.csv", "x2,z1,y,g,x1\n20,1,3,k,10\n21,2,4,k,11\n");
  const auto d = load_csv(path, schema_xz());
  CHECK(d.cluster(0).X == (Matrix(2, 2) << 10, 20, 11, 21).finished());
}

TEST_CASE("load errors") {
  SUBCASE("missing column is named") {
    const auto path = write_temp("missing.csv", "g,y,x1,z1\na,1,2,3\n");
    try {
      load_csv(path, schema_xz());
      FAIL("expected a parse error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Parse);
      CHECK(std::string(e.what()).find("x2") != std::string::npos);
    }
  }
  SUBCASE("non-numeric cell reports its row") {
    const auto path = write_temp("text.csv", "g,y,x1,x2,z1\na,1,2,3,4\na,1,oops,3,4\n");
    try {
      load_csv(path, schema_xz());
      FAIL("expected a parse error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Parse);
      const std::string what = e.what();
      CHECK(what.find('3') != std::string::npos);
      CHECK(what.find("x1") != std::string::npos);
    }
  }
  SUBCASE("missing file") {
    try {
      load_csv(temp_path("does_not_exist.csv"), schema_xz());
      FAIL("expected an io error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Io);
    }
  }
  SUBCASE("repeated schema names") {
    auto s = schema_xz();
    s.random = {"x1"};
    CHECK_THROWS_AS(s.validate(), Error);
  }
}

TEST_CASE("fixed effects from a separate wide file") {
  const auto longp = write_temp("long.csv", "g,y,z1\na,1,1\nb,2,1\na,3,1\n");
  const auto widep = write_temp("wide.csv", "u,v\n1,2\n3,4\n5,6\n");
  LongFormatSchema s;
  s.cluster = "g";
  s.random = {"z1"};
  const auto d = load_csv(longp, s, widep);
  CHECK(d.p() == 2);
  CHECK(d.cluster(0).X == (Matrix(2, 2) << 1, 2, 5, 6).finished());
  const auto shortp = write_temp("short.csv", "u,v\n1,2\n");
  CHECK_THROWS_AS(load_csv(longp, s, shortp), Error);
}

TEST_CASE("dataset write then load is the identity") {
  std::mt19937_64 rng(71);
  const auto d = test::random_dataset(rng, 5, 1, 4, 3, 2);
  const auto path = temp_path("roundtrip.csv");
  write_dataset_csv(d, path);
  LongFormatSchema s;
  s.cluster = "cluster";
  s.fixed = {"x1", "x2", "x3"};
  s.random = {"z1", "z2"};
  const auto back = load_csv(path, s);
  REQUIRE(back.n() == d.n());
  for (Index i = 0; i < d.n(); ++i) {
    CHECK(back.cluster(i).id == d.cluster(i).id);
    CHECK(back.cluster(i).y == d.cluster(i).y);
    CHECK(back.cluster(i).X == d.cluster(i).X);
    CHECK(back.cluster(i).Z == d.cluster(i).Z);
  }
}

TEST_CASE("double formatting round trips") {
  std::mt19937_64 rng(72);
  for (int t = 0; t < 1000; ++t) {
    const double v = std::ldexp(test::uniform(rng, -1.0, 1.0), static_cast<int>(test::uniform_index(rng, -300, 300)));
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(std::numeric_limits<double>::quiet_NaN()) == "nan");
  CHECK(format_double(-std::numeric_limits<double>::infinity()) == "-inf");
}

TEST_CASE("inference table") {
  std::vector<InferenceRecord> recs(2);
  recs[0].j = 0;
  recs[0].beta_db = 0.1;
  recs[0].V_hat = 2.0 / 3.0;
  recs[0].ci_lo = -1e-300;
  recs[0].ci_hi = 1.0 / 7.0;
  recs[0].z = -3.25;
  recs[0].p_value = 1e-17;
  recs[1].j = 9;
  recs[1].z = std::numeric_limits<double>::quiet_NaN();
  recs[1].p_value = std::numeric_limits<double>::quiet_NaN();
  const std::string text = inference_to_csv(recs);
  CHECK(text.substr(0, text.find('\n')) == "j,beta_db,V_hat,ci_lo,ci_hi,z,p_value");
  CHECK(text.find("\n10,") != std::string::npos);
  const auto back = inference_from_csv(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].j == 0);
  CHECK(back[0].V_hat == recs[0].V_hat);
  CHECK(back[0].ci_lo == recs[0].ci_lo);
  CHECK(back[0].ci_hi == recs[0].ci_hi);
  CHECK(back[0].p_value == recs[0].p_value);
  CHECK(back[1].j == 9);
  CHECK(std::isnan(back[1].z));
  CHECK(inference_from_csv(inference_to_csv({})).empty());
}

TEST_CASE("inference json") {
  InferenceResult r;
  r.fit.beta = Vector::Zero(3);
  r.records.resize(1);
  r.records[0].j = 2;
  r.records[0].beta_db = 0.3;
  r.records[0].p_value = std::numeric_limits<double>::quiet_NaN();
  r.records[0].degenerate = true;
  r.failures.push_back({1, "zero column"});
  const Json doc = inference_to_json(r, {2}, Json{{"tool", "x"}});
  CHECK(doc.at("records").at(0).at("j") == 3);
  CHECK(doc.at("records").at(0).at("p_value").is_null());
  CHECK(doc.at("failures").at(0).at("j") == 2);
  CHECK(doc.at("selected").at(0) == 3);
  CHECK(doc.at("provenance").at("tool") == "x");
  const auto back = inference_records_from_json(Json::parse(doc.dump()));
  REQUIRE(back.size() == 1);
  CHECK(back[0].j == 2);
  CHECK(back[0].degenerate);
  CHECK(std::isnan(back[0].p_value));
}
