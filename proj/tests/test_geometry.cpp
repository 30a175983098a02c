#include <catch2/catch_amalgamated.hpp>

#include "detlab/geometry.hpp"
#include "detlab/rng.hpp"
#include "mc_oracle.hpp"

using namespace detlab;
using Catch::Matchers::WithinAbs;

TEST_CASE("giou hand cases") {
  BBox b{0.3, 0.7, 0.2, 0.4};
  REQUIRE(giou(b, b) == 1.0);

  BBox outer{0.5, 0.5, 1.0, 1.0};
  BBox inner{0.5, 0.5, 0.5, 0.5};
  REQUIRE_THAT(giou(outer, inner), WithinAbs(0.25, 1e-12));

  BBox left{0.5, 0.5, 1.0, 1.0};
  BBox right{10.5, 0.5, 1.0, 1.0};
  REQUIRE_THAT(giou(left, right), WithinAbs(-9.0 / 11.0, 1e-12));
}

TEST_CASE("giou rejects nonpositive extents") {
  BBox ok{0.5, 0.5, 0.2, 0.2};
  REQUIRE_THROWS_AS(giou(ok, BBox{0.5, 0.5, 0.0, 0.2}), std::domain_error);
  REQUIRE_THROWS_AS(giou(BBox{0.5, 0.5, -0.1, 0.2}, ok), std::domain_error);
}

TEST_CASE("giou symmetry and iou dominance on random pairs") {
  Rng rng(17);
  for (int k = 0; k < 1000; ++k) {
    BBox a = mcoracle::random_box(rng);
    BBox b = mcoracle::random_box(rng);
    REQUIRE_THAT(giou(a, b), WithinAbs(giou(b, a), 1e-12));
    REQUIRE(giou(a, b) <= iou(a, b) + 1e-15);
    REQUIRE(giou(a, b) > -1.0);
    REQUIRE(giou(a, b) <= 1.0);
  }
}

TEST_CASE("giou equals iou exactly when the enclosure is the union") {
  // containment: union = outer box = enclosure
  BBox outer{0.4, 0.4, 0.6, 0.6};
  BBox inner{0.45, 0.35, 0.2, 0.3};
  REQUIRE_THAT(giou(outer, inner), WithinAbs(iou(outer, inner), 1e-12));

  // generic overlap: strictly below iou
  BBox a{0.3, 0.3, 0.3, 0.3};
  BBox c{0.5, 0.5, 0.3, 0.3};
  REQUIRE(giou(a, c) < iou(a, c) - 1e-6);
}

TEST_CASE("giou of one means identical boxes") {
  BBox a{0.5, 0.5, 0.3, 0.2};
  for (double eps : {1e-6, 1e-3, 0.1}) {
    BBox moved = a;
    moved.cx += eps;
    REQUIRE(giou(a, moved) < 1.0);
    BBox grown = a;
    grown.w += eps;
    REQUIRE(giou(a, grown) < 1.0);
  }
}

TEST_CASE("giou agrees with the Monte-Carlo area estimator") {
  Rng rng(21);
  for (int k = 0; k < 20; ++k) {
    BBox a = mcoracle::random_box(rng);
    BBox b = mcoracle::random_box(rng);
    Rng mc = rng.fork(1000 + k);
    double est = mcoracle::giou_mc(a, b, 200000, mc);
    REQUIRE_THAT(giou(a, b), WithinAbs(est, 1e-2));
  }
}

TEST_CASE("relation metric hand cases") {
  BBox b{0.5, 0.5, 0.25, 0.3};
  RelationMetric same = relation_metric(b, b);
  REQUIRE_THAT(same[0], WithinAbs(std::log(1e-3), 1e-12));
  REQUIRE_THAT(same[1], WithinAbs(std::log(1e-3), 1e-12));
  REQUIRE(same[2] == 0.0);
  REQUIRE(same[3] == 0.0);
  REQUIRE(same[4] == 1.0);

  BBox qi{0.0, 0.0, 2.0, 2.0};
  BBox qj{2.0, 0.0, 1.0, 1.0};
  RelationMetric r = relation_metric(qi, qj);
  REQUIRE_THAT(r[0], WithinAbs(0.0, 1e-12));
  REQUIRE_THAT(r[1], WithinAbs(std::log(1e-3), 1e-12));
  REQUIRE_THAT(r[2], WithinAbs(std::log(2.0), 1e-12));
  REQUIRE_THAT(r[3], WithinAbs(std::log(2.0), 1e-12));
  REQUIRE_THAT(r[4], WithinAbs(-2.0 / 7.0, 1e-12));
}

TEST_CASE("relation metric swap identities") {
  Rng rng(5);
  for (int k = 0; k < 200; ++k) {
    BBox a = mcoracle::random_box(rng);
    BBox b = mcoracle::random_box(rng);
    // keep offsets above the guard so no clamping hides the algebra
    if (std::fabs(a.cx - b.cx) < 2e-3 || std::fabs(a.cy - b.cy) < 2e-3) continue;
    RelationMetric rij = relation_metric(a, b);
    RelationMetric rji = relation_metric(b, a);
    REQUIRE_THAT(rij[2], WithinAbs(-rji[2], 1e-12));
    REQUIRE_THAT(rij[3], WithinAbs(-rji[3], 1e-12));
    // offsets renormalize: difference is the log extent ratio
    REQUIRE_THAT(rij[0] - rji[0], WithinAbs(std::log(b.w / a.w), 1e-10));
    REQUIRE_THAT(rij[1] - rji[1], WithinAbs(std::log(b.h / a.h), 1e-10));
    REQUIRE(rij[4] == rji[4]);
  }
}

TEST_CASE("multi scale metric blocks") {
  BBox b{0.5, 0.5, 0.2, 0.2};
  BBox c{0.7, 0.4, 0.3, 0.1};

  for (int l = 1; l <= 6; ++l) {
    MultiScaleMetric m = multi_scale_metric(b, c, l, 6);
    for (int k = 10; k < 15; ++k) REQUIRE(m[k] == 1.0);
  }

  MultiScaleMetric mid = multi_scale_metric(b, b, 3, 6);
  REQUIRE_THAT(mid[5], WithinAbs(std::log(1e-3) / 2.0, 1e-12));
  REQUIRE_THAT(mid[6], WithinAbs(std::log(1e-3) / 2.0, 1e-12));
  REQUIRE(mid[7] == 0.0);
  REQUIRE(mid[8] == 0.0);
  REQUIRE(mid[9] == 1.0);

  MultiScaleMetric last = multi_scale_metric(b, c, 6, 6);
  RelationMetric raw = relation_metric(b, c);
  for (int k = 0; k < 4; ++k) REQUIRE_THAT(last[5 + k], WithinAbs(raw[k] / 3.0, 1e-12));
  REQUIRE(last[9] == raw[4]);

  // damped magnitudes shrink as the layer index grows
  double prev = 1e300;
  for (int l = 1; l <= 6; ++l) {
    MultiScaleMetric m = multi_scale_metric(b, c, l, 6);
    double mag = std::fabs(m[5]) + std::fabs(m[6]) + std::fabs(m[7]) + std::fabs(m[8]);
    REQUIRE(mag < prev);
    prev = mag;
  }

  REQUIRE_THROWS_AS(multi_scale_metric(b, c, 0, 6), std::invalid_argument);
  REQUIRE_THROWS_AS(multi_scale_metric(b, c, 7, 6), std::invalid_argument);
}

TEST_CASE("sinusoidal embedding") {
  std::vector<double> zero{0.0};
  std::vector<double> e = sinusoidal_embed(zero);
  REQUIRE(e.size() == 16);
  for (int j = 0; j < 8; ++j) {
    REQUIRE(e[2 * j] == 0.0);
    REQUIRE(e[2 * j + 1] == 1.0);
  }

  // v*s = pi/2 at the base frequency
  const double pi = std::acos(-1.0);
  std::vector<double> v{pi / 200.0};
  std::vector<double> f = sinusoidal_embed(v);
  REQUIRE_THAT(f[0], WithinAbs(1.0, 1e-12));
  REQUIRE_THAT(f[1], WithinAbs(0.0, 1e-12));

  Rng rng(9);
  for (int k = 0; k < 50; ++k) {
    MultiScaleMetric m = multi_scale_metric(mcoracle::random_box(rng),
                                            mcoracle::random_box(rng), 1 + k % 6, 6);
    std::vector<double> emb = sinusoidal_embed(m);
    REQUIRE(emb.size() == 240);
    for (double x : emb) {
      REQUIRE(x >= -1.0);
      REQUIRE(x <= 1.0);
    }
  }
}
