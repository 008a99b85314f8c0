#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "helpers.hpp"
#include "neuropipe/optimize.hpp"
#include "neuropipe/registration.hpp"
#include "neuropipe/resample.hpp"

using namespace neuropipe;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg = kPi / 180.0;

Volume line_volume(const std::vector<double>& values) {
  Volume v = make_volume(Eigen::Array3i(static_cast<int>(values.size()), 1, 1),
                         Eigen::Array3d(1, 1, 1), Eigen::Matrix4d::Identity(),
                         DataType::Float64);
  for (std::size_t i = 0; i < values.size(); ++i)
    v.data[static_cast<std::int64_t>(i)] = values[i];
  return v;
}

// Independent ncc: textbook two-pass Pearson over the in-mask voxels.
double oracle_ncc(const Volume& a, const Volume& b,
                  const std::optional<BinaryMask>& mask) {
  double sa = 0, sb = 0;
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < a.data.size(); ++i) {
    if (mask && !mask->bits[static_cast<std::size_t>(i)])
      continue;
    sa += a.data[i];
    sb += b.data[i];
    ++n;
  }
  const double ma = sa / n, mb = sb / n;
  double va = 0, vb = 0, cov = 0;
  for (std::int64_t i = 0; i < a.data.size(); ++i) {
    if (mask && !mask->bits[static_cast<std::size_t>(i)])
      continue;
    va += (a.data[i] - ma) * (a.data[i] - ma);
    vb += (b.data[i] - mb) * (b.data[i] - mb);
    cov += (a.data[i] - ma) * (b.data[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

} // namespace

TEST_CASE("metric names round trip") {
  CHECK(metric_from_name("ncc") == SimilarityMetric::Ncc);
  CHECK(metric_from_name("msd") == SimilarityMetric::Msd);
  CHECK(metric_name(SimilarityMetric::Ncc) == std::string("ncc"));
  CHECK(metric_name(SimilarityMetric::Msd) == std::string("msd"));
  CHECK_THROWS_AS(metric_from_name("mi"), UsageError);
}

TEST_CASE("config validation") {
  RegistrationConfig cfg;
  CHECK_NOTHROW(validate(cfg));

  cfg.pyramid_levels = {};
  CHECK_THROWS_AS(validate(cfg), UsageError);
  cfg.pyramid_levels = {4, 2};
  CHECK_THROWS_AS(validate(cfg), UsageError);
  cfg.pyramid_levels = {4, 4, 1};
  CHECK_THROWS_AS(validate(cfg), UsageError);
  cfg.pyramid_levels = {2, 4, 1};
  CHECK_THROWS_AS(validate(cfg), UsageError);
  cfg.pyramid_levels = {4, 0, 1};
  CHECK_THROWS_AS(validate(cfg), UsageError);
  cfg.pyramid_levels = {1};
  CHECK_NOTHROW(validate(cfg));

  cfg = RegistrationConfig{};
  cfg.max_iterations_per_level = 0;
  CHECK_THROWS_AS(validate(cfg), UsageError);
  cfg = RegistrationConfig{};
  cfg.translation_bounds_mm = 0.0;
  CHECK_THROWS_AS(validate(cfg), UsageError);
  cfg = RegistrationConfig{};
  cfg.rotation_bounds_rad = -0.1;
  CHECK_THROWS_AS(validate(cfg), UsageError);
  cfg = RegistrationConfig{};
  cfg.convergence_tol = 0.0;
  CHECK_THROWS_AS(validate(cfg), UsageError);
}

TEST_CASE("similarity hand cases") {
  Volume a = line_volume({1, 2, 3, 4});
  Volume b = line_volume({1, 2, 3, 8});

  // Self-similarity saturates ncc; msd of the hand pair is (8-4)^2 / 4.
  CHECK(similarity(a, a, std::nullopt, SimilarityMetric::Ncc) == 1.0);
  CHECK(similarity(a, a, std::nullopt, SimilarityMetric::Msd) == 0.0);
  CHECK(similarity(a, b, std::nullopt, SimilarityMetric::Msd) == 4.0);

  Volume zero_mean = line_volume({-3, -1, 1, 3});
  Volume negated = line_volume({3, 1, -1, -3});
  CHECK(similarity(zero_mean, negated, std::nullopt, SimilarityMetric::Ncc) ==
        -1.0);

  // A mask hiding the discrepant voxel leaves a perfect match.
  BinaryMask m = make_mask(a.dims, a.spacing, a.affine);
  m.bits = {1, 1, 1, 0};
  CHECK(similarity(a, b, m, SimilarityMetric::Msd) == 0.0);
  CHECK(similarity(a, b, m, SimilarityMetric::Ncc) == 1.0);
}

TEST_CASE("similarity matches a two-pass oracle on random volumes") {
  std::mt19937_64 rng(411);
  std::uniform_real_distribution<double> val(-10.0, 10.0);
  for (int trial = 0; trial < 30; ++trial) {
    Eigen::Array3i dims(5, 4, 3);
    Volume a = make_volume(dims, Eigen::Array3d(1, 1, 1),
                           Eigen::Matrix4d::Identity(), DataType::Float64);
    Volume b = a;
    for (std::int64_t i = 0; i < a.data.size(); ++i) {
      a.data[i] = val(rng);
      b.data[i] = val(rng);
    }
    std::optional<BinaryMask> mask;
    if (trial % 2 == 1) {
      BinaryMask m = testutil::random_mask(rng, dims, a.spacing, 0.5);
      if (m.count() < 2)
        continue;
      mask = m;
    }
    const double got = similarity(a, b, mask, SimilarityMetric::Ncc);
    CHECK(got == doctest::Approx(oracle_ncc(a, b, mask)).epsilon(1e-12));

    double msd = 0;
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < a.data.size(); ++i) {
      if (mask && !mask->bits[static_cast<std::size_t>(i)])
        continue;
      msd += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
      ++n;
    }
    CHECK(similarity(a, b, mask, SimilarityMetric::Msd) ==
          doctest::Approx(msd / n).epsilon(1e-12));
  }
}

TEST_CASE("ncc ignores affine intensity rescaling") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> val(0.0, 100.0);
  Volume a = make_volume(Eigen::Array3i(6, 6, 6), Eigen::Array3d(1, 1, 1),
                         Eigen::Matrix4d::Identity(), DataType::Float64);
  Volume b = a;
  for (std::int64_t i = 0; i < a.data.size(); ++i) {
    a.data[i] = val(rng);
    b.data[i] = val(rng);
  }
  const double base = similarity(a, b, std::nullopt, SimilarityMetric::Ncc);
  for (double slope : {0.5, 3.0, 1e3}) {
    Volume scaled = b;
    scaled.data = slope * b.data + 17.0;
    CHECK(std::abs(similarity(a, scaled, std::nullopt,
                              SimilarityMetric::Ncc) -
                   base) < 1e-9);
    Volume scaled_fixed = a;
    scaled_fixed.data = slope * a.data - 4.5;
    CHECK(std::abs(similarity(scaled_fixed, b, std::nullopt,
                              SimilarityMetric::Ncc) -
                   base) < 1e-9);
  }
}

TEST_CASE("similarity degenerate and geometry errors") {
  Volume a = line_volume({1, 2, 3, 4});
  Volume constant = line_volume({5, 5, 5, 5});

  CHECK_THROWS_AS(similarity(a, constant, std::nullopt, SimilarityMetric::Ncc),
                  DegenerateInputError);
  CHECK_THROWS_AS(similarity(constant, a, std::nullopt, SimilarityMetric::Ncc),
                  DegenerateInputError);
  // msd is fine on a constant image.
  CHECK(similarity(a, constant, std::nullopt, SimilarityMetric::Msd) ==
        doctest::Approx((16 + 9 + 4 + 1) / 4.0));

  BinaryMask one = make_mask(a.dims, a.spacing, a.affine);
  one.bits = {0, 1, 0, 0};
  CHECK_THROWS_AS(similarity(a, a, one, SimilarityMetric::Msd),
                  DegenerateInputError);

  Volume other_grid = make_volume(Eigen::Array3i(2, 2, 1),
                                  Eigen::Array3d(1, 1, 1),
                                  Eigen::Matrix4d::Identity(), DataType::Float64);
  CHECK_THROWS_AS(similarity(a, other_grid, std::nullopt,
                             SimilarityMetric::Msd),
                  GeometryError);

  BinaryMask offgrid = make_mask(a.dims, a.spacing, a.affine);
  offgrid.affine(0, 3) += 2.0;
  CHECK_THROWS_AS(similarity(a, a, offgrid, SimilarityMetric::Msd),
                  GeometryError);
}

TEST_CASE("otsu threshold splits a clean bimodal image") {
  Volume v = make_volume(Eigen::Array3i(10, 10, 1), Eigen::Array3d(1, 1, 1),
                         Eigen::Matrix4d::Identity(), DataType::Float64);
  for (std::int64_t i = 0; i < v.data.size(); ++i)
    v.data[i] = i < 60 ? 10.0 : 100.0;
  // Both clusters land in single histogram bins (0 and 255); the best
  // split is the first empty bin after the low cluster.
  const double thr = otsu_threshold(v);
  CHECK(thr == doctest::Approx(10.0 + 90.0 / 256.0).epsilon(1e-12));
  CHECK(thr > 10.0);
  CHECK(thr < 100.0);

  BinaryMask fg = otsu_mask(v);
  CHECK(fg.count() == 40);
  for (std::int64_t i = 0; i < v.data.size(); ++i)
    CHECK(fg.bits[static_cast<std::size_t>(i)] == (v.data[i] > thr ? 1 : 0));
}

TEST_CASE("otsu threshold rejects a constant image") {
  Volume v = make_volume(Eigen::Array3i(4, 4, 4), Eigen::Array3d(1, 1, 1),
                         Eigen::Matrix4d::Identity(), DataType::Float64);
  v.data.setConstant(3.0);
  CHECK_THROWS_AS(otsu_threshold(v), DegenerateInputError);
  CHECK_THROWS_AS(otsu_mask(v), DegenerateInputError);
  CHECK_THROWS_AS(weighted_centroid_world(v), DegenerateInputError);
}

TEST_CASE("weighted centroid ignores background and weights by intensity") {
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  affine(0, 0) = 2.0; // 2 mm along x
  affine(0, 3) = 10.0;
  affine(1, 3) = -3.0;
  affine(2, 3) = 7.0;
  Volume v = make_volume(Eigen::Array3i(8, 1, 1), Eigen::Array3d(2, 1, 1),
                         affine, DataType::Float64);
  v.data.setZero();
  v.at(2, 0, 0) = 2.0;
  v.at(5, 0, 0) = 4.0;

  // Otsu separates {0} from {2, 4}; centroid index is (2*2 + 4*5) / 6 = 4.
  const Eigen::Vector3d c = weighted_centroid_world(v);
  CHECK(c.x() == doctest::Approx(10.0 + 2.0 * 4.0).epsilon(1e-12));
  CHECK(c.y() == doctest::Approx(-3.0).epsilon(1e-12));
  CHECK(c.z() == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("downsample_by matches a scatter oracle") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> val(-5.0, 5.0);
  for (int factor : {2, 3}) {
    Eigen::Array3i dims(7, 5, 4); // deliberately not multiples of the factor
    Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
    affine(0, 0) = 1.5;
    affine(1, 1) = 1.5;
    affine(2, 2) = 1.5;
    affine(1, 3) = -8.0;
    Volume v = make_volume(dims, Eigen::Array3d(1.5, 1.5, 1.5), affine,
                           DataType::Float32);
    for (std::int64_t i = 0; i < v.data.size(); ++i)
      v.data[i] = testutil::round_f32(val(rng));

    Volume out = downsample_by(v, factor);
    for (int a = 0; a < 3; ++a) {
      CHECK(out.dims[a] == (dims[a] + factor - 1) / factor);
      CHECK(out.spacing[a] == doctest::Approx(1.5 * factor));
    }
    CHECK(out.dtype == v.dtype);

    // Scatter each input voxel into its block, then divide.
    std::map<std::tuple<int, int, int>, std::pair<double, int>> blocks;
    for (int k = 0; k < dims[2]; ++k)
      for (int j = 0; j < dims[1]; ++j)
        for (int i = 0; i < dims[0]; ++i) {
          auto& slot = blocks[{i / factor, j / factor, k / factor}];
          slot.first += v.at(i, j, k);
          slot.second += 1;
        }
    for (auto& [idx, slot] : blocks) {
      auto [i, j, k] = idx;
      CHECK(out.at(i, j, k) ==
            doctest::Approx(slot.first / slot.second).epsilon(1e-12));
    }

    // The level voxel center sits at input index f*m + (f-1)/2.
    const double off = (factor - 1) / 2.0;
    for (int m : {0, 1}) {
      const Eigen::Vector3d got = out.index_to_world({double(m), 0.0, 0.0});
      const Eigen::Vector3d want =
          v.index_to_world({factor * m + off, off, off});
      CHECK((got - want).norm() < 1e-12);
    }
  }
}

TEST_CASE("downsample_by trivial and error cases") {
  Volume v = make_volume(Eigen::Array3i(5, 5, 5), Eigen::Array3d(1, 1, 1),
                         Eigen::Matrix4d::Identity(), DataType::Float64);
  v.data.setConstant(7.0);

  CHECK(downsample_by(v, 1) == v);
  Volume half = downsample_by(v, 2);
  CHECK((half.dims == Eigen::Array3i(3, 3, 3)).all());
  for (std::int64_t i = 0; i < half.data.size(); ++i)
    CHECK(half.data[i] == 7.0); // block averages of a constant are exact

  CHECK_THROWS_AS(downsample_by(v, 0), UsageError);
  CHECK_THROWS_AS(downsample_by(v, -2), UsageError);
}

TEST_CASE("nelder_mead minimizes a quadratic deterministically") {
  const Eigen::Vector3d target(1.5, -2.0, 0.75);
  const auto objective = [&](const Eigen::VectorXd& x) {
    return (x - target.matrix()).squaredNorm();
  };
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd steps = Eigen::VectorXd::Ones(3);
  NelderMeadOptions opts;
  opts.max_iterations = 500;
  opts.tolerance = 1e-12;

  NelderMeadResult r = nelder_mead(objective, x0, steps, opts);
  CHECK(r.converged);
  CHECK(r.value < 1e-9);
  CHECK((r.x - target.matrix()).norm() < 1e-4);
  CHECK(r.iterations <= opts.max_iterations);
  REQUIRE(static_cast<int>(r.best_trace.size()) == r.iterations);
  for (std::size_t i = 1; i < r.best_trace.size(); ++i)
    CHECK(r.best_trace[i] <= r.best_trace[i - 1]);
  CHECK(r.best_trace.back() == r.value);

  NelderMeadResult again = nelder_mead(objective, x0, steps, opts);
  CHECK(again.x == r.x);
  CHECK(again.value == r.value);
  CHECK(again.iterations == r.iterations);
}

TEST_CASE("nelder_mead respects infinite vetoes") {
  // Quadratic centered outside the feasible box; the solution must stay
  // inside it.
  const auto objective = [](const Eigen::VectorXd& x) {
    for (int i = 0; i < x.size(); ++i)
      if (std::abs(x[i]) > 0.5)
        return std::numeric_limits<double>::infinity();
    return (x[0] - 2.0) * (x[0] - 2.0) + x[1] * x[1];
  };
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(2);
  Eigen::VectorXd steps = Eigen::VectorXd::Constant(2, 0.25);
  NelderMeadResult r = nelder_mead(objective, x0, steps);
  CHECK(std::isfinite(r.value));
  CHECK(std::abs(r.x[0]) <= 0.5);
  CHECK(std::abs(r.x[1]) <= 0.5);
  CHECK(r.x[0] > 0.4); // pushed against the active bound

  const auto wall = [](const Eigen::VectorXd&) {
    return std::numeric_limits<double>::infinity();
  };
  CHECK_THROWS_AS(nelder_mead(wall, x0, steps), UsageError);
}

TEST_CASE("nelder_mead iteration cap") {
  const auto rosenbrock = [](const Eigen::VectorXd& x) {
    const double a = 1.0 - x[0], b = x[1] - x[0] * x[0];
    return a * a + 100.0 * b * b;
  };
  Eigen::VectorXd x0(2);
  x0 << -1.2, 1.0;
  Eigen::VectorXd steps = Eigen::VectorXd::Constant(2, 0.5);
  NelderMeadOptions opts;
  opts.max_iterations = 5;
  NelderMeadResult r = nelder_mead(rosenbrock, x0, steps, opts);
  CHECK(r.iterations == 5);
  CHECK_FALSE(r.converged);
}

TEST_CASE("self-registration returns the identity") {
  GridSpec g = testutil::cube_grid(20, 2.0);
  Volume v = testutil::sample_field(testutil::default_field(g), g,
                                    DataType::Float64);
  RegistrationResult r = register_rigid(v, v);
  CHECK(r.transform.translation().norm() < 1e-3);
  CHECK(rotation_angle_between(r.transform, RigidTransform::identity()) <
        1e-4);
  CHECK(r.final_metric == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r.iterations.size() == 3);
  CHECK(std::isfinite(r.final_metric));
}

TEST_CASE("registration recovers a known translation") {
  GridSpec g = testutil::cube_grid(24, 2.0);
  testutil::PhantomField field = testutil::default_field(g);
  Volume fixed = testutil::sample_field(field, g, DataType::Float64);

  const RigidTransform known =
      RigidTransform::translate(Eigen::Vector3d(3.0, -2.0, 1.0));
  Volume moving = testutil::sample_field(testutil::transformed(field, known),
                                         g, DataType::Float64);

  RegistrationResult r = register_rigid(fixed, moving);
  const RigidTransform expected = invert(known);
  const Eigen::Vector3d dt = r.transform.translation() - expected.translation();
  CHECK(std::abs(dt.x()) < 0.5);
  CHECK(std::abs(dt.y()) < 0.5);
  CHECK(std::abs(dt.z()) < 0.5);
  CHECK(rotation_angle_between(r.transform, expected) < 0.5 * kDeg);
}

TEST_CASE("registration recovers a known rotation about the grid center") {
  GridSpec g = testutil::cube_grid(24, 2.0);
  testutil::PhantomField field = testutil::default_field(g);
  Volume fixed = testutil::sample_field(field, g, DataType::Float64);

  const Eigen::Vector3d center =
      g.index_to_world(((g.dims.cast<double>() - 1.0) / 2.0).matrix());
  const RigidTransform known = euler_to_transform(
      Eigen::Vector3d(5.0 * kDeg, 0.0, 0.0), Eigen::Vector3d::Zero(), center);
  Volume moving = testutil::sample_field(testutil::transformed(field, known),
                                         g, DataType::Float64);

  RegistrationResult r = register_rigid(fixed, moving);
  const RigidTransform expected = invert(known);
  const Eigen::Vector3d dt = r.transform.translation() - expected.translation();
  CHECK(std::abs(dt.x()) < 0.5);
  CHECK(std::abs(dt.y()) < 0.5);
  CHECK(std::abs(dt.z()) < 0.5);
  CHECK(rotation_angle_between(r.transform, expected) < 0.5 * kDeg);
}

TEST_CASE("registration recovers a combined motion under msd") {
  GridSpec g = testutil::cube_grid(20, 2.0);
  testutil::PhantomField field = testutil::default_field(g);
  Volume fixed = testutil::sample_field(field, g, DataType::Float64);

  const Eigen::Vector3d center =
      g.index_to_world(((g.dims.cast<double>() - 1.0) / 2.0).matrix());
  const RigidTransform known =
      euler_to_transform(Eigen::Vector3d(3.0 * kDeg, -2.0 * kDeg, 0.0),
                         Eigen::Vector3d(2.0, 1.0, -1.5), center);
  Volume moving = testutil::sample_field(testutil::transformed(field, known),
                                         g, DataType::Float64);

  RegistrationConfig cfg;
  cfg.metric = SimilarityMetric::Msd;
  RegistrationResult r = register_rigid(fixed, moving, cfg);
  const RigidTransform expected = invert(known);
  const Eigen::Vector3d dt = r.transform.translation() - expected.translation();
  CHECK(dt.cwiseAbs().maxCoeff() < 0.5);
  CHECK(rotation_angle_between(r.transform, expected) < 0.5 * kDeg);
  CHECK(r.final_metric >= 0.0);
}

TEST_CASE("registration is deterministic") {
  GridSpec g = testutil::cube_grid(16, 2.0);
  testutil::PhantomField field = testutil::default_field(g);
  Volume fixed = testutil::sample_field(field, g, DataType::Float64);
  const RigidTransform known =
      RigidTransform::translate(Eigen::Vector3d(1.5, 0.5, -1.0));
  Volume moving = testutil::sample_field(testutil::transformed(field, known),
                                         g, DataType::Float64);

  RegistrationResult a = register_rigid(fixed, moving);
  RegistrationResult b = register_rigid(fixed, moving);
  CHECK(a.transform.matrix() == b.transform.matrix());
  CHECK(a.final_metric == b.final_metric);
  CHECK(a.iterations == b.iterations);
  CHECK(a.converged == b.converged);
}

TEST_CASE("forward and backward registrations invert each other") {
  GridSpec g = testutil::cube_grid(20, 2.0);
  testutil::PhantomField field = testutil::default_field(g);
  Volume a = testutil::sample_field(field, g, DataType::Float64);
  const Eigen::Vector3d center =
      g.index_to_world(((g.dims.cast<double>() - 1.0) / 2.0).matrix());
  const RigidTransform known = euler_to_transform(
      Eigen::Vector3d(4.0 * kDeg, 0.0, 2.0 * kDeg),
      Eigen::Vector3d(2.0, -1.0, 1.0), center);
  Volume b = testutil::sample_field(testutil::transformed(field, known), g,
                                    DataType::Float64);

  const RigidTransform ab = register_rigid(a, b).transform;
  const RigidTransform ba = register_rigid(b, a).transform;
  const RigidTransform round = compose(ab, ba);
  CHECK(round.translation().norm() < 1.0);
  CHECK(rotation_angle_between(round, RigidTransform::identity()) <
        1.0 * kDeg);
}

TEST_CASE("registration rejects unusable inputs") {
  GridSpec g = testutil::cube_grid(12, 2.0);
  Volume v = testutil::sample_field(testutil::default_field(g), g,
                                    DataType::Float64);

  Volume labels = v;
  labels.dtype = DataType::Int16;
  CHECK_THROWS_AS(register_rigid(v, labels), UsageError);
  CHECK_THROWS_AS(register_rigid(labels, v), UsageError);

  Volume sheared = v;
  sheared.affine(0, 1) = 0.05;
  CHECK_THROWS_AS(register_rigid(v, sheared), GeometryError);
}

TEST_CASE("registration on a constant image fails carrying the identity") {
  GridSpec g = testutil::cube_grid(10, 2.0);
  Volume v = testutil::sample_field(testutil::default_field(g), g,
                                    DataType::Float64);
  Volume flat = v;
  flat.data.setConstant(1.0);

  try {
    register_rigid(v, flat);
    FAIL("expected RegistrationError");
  } catch (const RegistrationError& e) {
    CHECK(std::string(e.what()).find("initialization failed") !=
          std::string::npos);
    CHECK(e.initial_transform().matrix() ==
          RigidTransform::identity().matrix());
  }
  CHECK_THROWS_AS(register_rigid(flat, v), RegistrationError);
}

TEST_CASE("iteration cap forces converged=false") {
  GridSpec g = testutil::cube_grid(14, 2.0);
  testutil::PhantomField field = testutil::default_field(g);
  Volume fixed = testutil::sample_field(field, g, DataType::Float64);
  Volume moving = testutil::sample_field(
      testutil::transformed(field,
                            RigidTransform::translate({4.0, -3.0, 2.0})),
      g, DataType::Float64);

  RegistrationConfig cfg;
  cfg.max_iterations_per_level = 2;
  RegistrationResult r = register_rigid(fixed, moving, cfg);
  CHECK_FALSE(r.converged);
  // Each level runs at most 3 restart rounds of at most cap iterations.
  for (int it : r.iterations)
    CHECK(it <= 6);
}

TEST_CASE("skull-strip guard masks without touching geometry") {
  GridSpec g = testutil::cube_grid(8, 1.0);
  Volume v = volume_on_grid(g, DataType::Float64);
  for (std::int64_t i = 0; i < v.data.size(); ++i)
    v.data[i] = static_cast<double>(i % 13) + 1.0;

  BinaryMask all = make_mask(v.dims, v.spacing, v.affine);
  std::fill(all.bits.begin(), all.bits.end(), 1);
  CHECK(intermediate_skullstrip_guard(v, all) == v);

  BinaryMask none = make_mask(v.dims, v.spacing, v.affine);
  CHECK_THROWS_AS(intermediate_skullstrip_guard(v, none),
                  DegenerateInputError);

  BinaryMask half = make_mask(v.dims, v.spacing, v.affine);
  for (int k = 0; k < v.dims[2]; ++k)
    for (int j = 0; j < v.dims[1]; ++j)
      for (int i = 0; i < v.dims[0]; ++i)
        half.set(i, j, k, i < 4);
  Volume guarded = intermediate_skullstrip_guard(v, half);
  CHECK((guarded.dims == v.dims).all());
  for (int k = 0; k < v.dims[2]; ++k)
    for (int j = 0; j < v.dims[1]; ++j)
      for (int i = 0; i < v.dims[0]; ++i)
        CHECK(guarded.at(i, j, k) == (i < 4 ? v.at(i, j, k) : 0.0));
}
