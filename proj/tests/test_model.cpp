#include "catch_amalgamated.hpp"
#include "test_support.hpp"

using namespace dfmvi;

TEST_CASE("minnesota prior for a single block") {
  auto mn = minnesota_prior(ModelSpec{3, 1, 0}, 1.0, 1.0, 2.0, 2.0);
  REQUIRE(mn.V_inv.rows() == 1);
  CHECK(mn.V_inv(0, 0) == 1.0);
}

TEST_CASE("minnesota prior lag decay") {
  auto mn = minnesota_prior(ModelSpec{3, 2, 1}, 1.0, 1.0, 2.0, 2.0);
  MatrixXd expected = VectorXd((VectorXd(4) << 1, 1, 4, 4).finished()).asDiagonal();
  CHECK(mn.V_inv == expected);
  CHECK(mn.W_inv == expected);
}

TEST_CASE("minnesota prior scales linearly and is block diagonal") {
  ModelSpec spec{4, 3, 2};
  auto a = minnesota_prior(spec, 1.0, 0.5, 2.5, 1.5);
  auto b = minnesota_prior(spec, 3.0, 0.5, 2.5, 1.5);
  CHECK(b.V_inv == 3.0 * a.V_inv);
  for (int i = 0; i < spec.s(); ++i)
    for (int j = 0; j < spec.s(); ++j)
      if (i != j) REQUIRE(a.V_inv(i, j) == 0.0);
  for (int lag = 0; lag <= spec.p; ++lag)
    for (int k = 1; k < spec.r; ++k) REQUIRE(a.V_inv(lag * spec.r + k, lag * spec.r + k) == a.V_inv(lag * spec.r, lag * spec.r));
}

TEST_CASE("minnesota prior rejects bad hyperparameters") {
  ModelSpec spec{2, 1, 1};
  CHECK_THROWS_AS(minnesota_prior(spec, 0.0, 1.0, 2.0, 2.0), DomainError);
  CHECK_THROWS_AS(minnesota_prior(spec, 1.0, -1.0, 2.0, 2.0), DomainError);
  CHECK_THROWS_AS(minnesota_prior(spec, 1.0, 1.0, 1.0, 2.0), DomainError);
}

TEST_CASE("model spec dimensions") {
  CHECK(ModelSpec{5, 2, 2}.s() == 6);
  CHECK_THROWS_AS(ModelSpec({0, 1, 0}).validate(), DomainError);
  CHECK_THROWS_AS(ModelSpec({2, 0, 0}).validate(), DomainError);
  CHECK_THROWS_AS(ModelSpec({2, 1, -1}).validate(), DomainError);
}

TEST_CASE("validate_prior accepts identities") {
  ModelSpec spec{2, 1, 1};
  PriorSpec prior;
  prior.V_inv = MatrixXd::Identity(2, 2);
  prior.W_inv = MatrixXd::Identity(2, 2);
  prior.Sigma_F0 = MatrixXd::Identity(2, 2);
  prior.nu = VectorXd::Ones(2);
  prior.tau2 = VectorXd::Ones(2);
  CHECK_NOTHROW(validate_prior(prior, spec));
}

TEST_CASE("validate_prior rejects improper or indefinite priors") {
  ModelSpec spec{2, 1, 1};
  auto prior = make_prior(spec);
  auto bad = prior;
  bad.Sigma_F0(1, 1) = -0.5;
  CHECK_THROWS_AS(validate_prior(bad, spec), DomainError);
  bad = prior;
  bad.nu(0) = 0.0;
  CHECK_THROWS_AS(validate_prior(bad, spec), DomainError);
  bad = prior;
  bad.V_inv.setZero();
  CHECK_THROWS_AS(validate_prior(bad, spec), DomainError);
  bad = prior;
  bad.W_inv = MatrixXd::Identity(3, 3);
  CHECK_THROWS_AS(validate_prior(bad, spec), StructuralError);
}

TEST_CASE("validate_prior symmetrizes tiny asymmetry") {
  ModelSpec spec{2, 2, 0};
  auto prior = make_prior(spec);
  prior.V_inv(0, 1) = 1e-14;
  auto v = validate_prior(prior, spec);
  CHECK(v.V_inv(0, 1) == v.V_inv(1, 0));
  CHECK(v.V_inv(0, 1) == 0.5e-14);
}

TEST_CASE("companion matrix layout") {
  MatrixXd top(2, 6);
  top << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
  auto M = companion(top, 2, 2);
  CHECK(M.topRows(2) == top);
  CHECK(M.block(2, 0, 4, 4) == MatrixXd::Identity(4, 4));
  CHECK(M.block(2, 4, 4, 2) == MatrixXd::Zero(4, 2));
}

TEST_CASE("identification free sets and validation") {
  ModelSpec spec{4, 2, 1};
  Identification id;
  id.rules = {{0, 0, 1}, {2, 1, -1}};
  id.validate(spec);
  auto free = id.free_indices(spec);
  CHECK(free[0] == std::vector<int>{0});
  CHECK(free[1].size() == 4);
  CHECK(free[2] == std::vector<int>{1});
  CHECK(id.signs(spec) == std::vector<int>{1, 0, -1, 0});
  Identification dup;
  dup.rules = {{0, 0, 1}, {0, 1, 1}};
  CHECK_THROWS_AS(dup.validate(spec), DomainError);
  Identification bad_sign;
  bad_sign.rules = {{0, 0, 2}};
  CHECK_THROWS_AS(bad_sign.validate(spec), DomainError);
}
