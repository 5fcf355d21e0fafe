#include <doctest.h>

#include <fstream>
#include <random>

#include "fid_oracle.hpp"
#include "galip/errors.hpp"
#include "galip/evaluation.hpp"
#include "test_util.hpp"

using namespace galip;
using namespace galip::eval;

TEST_SUITE("evaluation") {
  TEST_CASE("feature_stats: hand arithmetic, identical samples, order") {
    const auto s = feature_stats(torch::tensor({{0.0}, {2.0}}));
    CHECK(s.count == 2);
    CHECK(s.mean[0] == 1.0);
    CHECK(s.cov(0, 0) == 2.0);

    const auto same = feature_stats(torch::ones({5, 3}) * 0.7);
    CHECK(same.cov.cwiseAbs().maxCoeff() == 0.0);

    auto f = testutil::randn({40, 6}, 1, torch::kDouble);
    auto perm = torch::randperm(40, testutil::gen(2), torch::kLong);
    const auto a = feature_stats(f);
    const auto b = feature_stats(f.index_select(0, perm));
    CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((a.cov - b.cov).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((a.cov - a.cov.transpose()).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(feature_stats(torch::ones({1, 3})), InvalidArgument);
  }

  TEST_CASE("feature_stats through an extractor in batches") {
    auto imgs = testutil::randn({10, 3, 2, 2}, 3);
    Extractor mean_pixel = [](const torch::Tensor& x) { return x.mean({2, 3}); };
    const auto batched = feature_stats(imgs, mean_pixel, 3);
    const auto direct = feature_stats(imgs.mean({2, 3}));
    CHECK((batched.mean - direct.mean).cwiseAbs().maxCoeff() <= 1e-6);
  }

  TEST_CASE("frechet_distance: identical, 1-d closed form, symmetry, errors") {
    std::mt19937_64 rng(4);
    const auto a = testutil::random_stats(5, rng);
    CHECK(std::abs(frechet_distance(a, a)) <= 1e-8);

    FeatureStats x{Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.0), 10};
    FeatureStats y{Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Constant(1, 1, 1.0), 10};
    CHECK(frechet_distance(x, y) == doctest::Approx(1.0).epsilon(1e-12));
    y.cov(0, 0) = 4.0;
    // 1 + 1 + 4 - 2 * 2
    CHECK(frechet_distance(x, y) == doctest::Approx(2.0).epsilon(1e-12));

    const auto b = testutil::random_stats(5, rng);
    CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-8);
    CHECK_THROWS_AS(frechet_distance(a, testutil::random_stats(4, rng)), InvalidArgument);
  }

  TEST_CASE("frechet_distance matches the brute-force oracle on random 3-d Gaussians") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 20; ++i) {
      const auto a = testutil::random_stats(3, rng);
      const auto b = testutil::random_stats(3, rng);
      const double oracle = testutil::brute_force_frechet(a.mean, a.cov, b.mean, b.cov);
      CHECK(std::abs(frechet_distance(a, b) - oracle) <= 1e-6);
    }
  }

  TEST_CASE("rank-deficient covariances stay non-negative") {
    std::mt19937_64 rng(6);
    for (int i = 0; i < 10; ++i) {
      const auto f = testutil::randn({3, 8}, 10 + i, torch::kDouble);  // rank 2 in 8-d
      const auto a = feature_stats(f);
      CHECK(frechet_distance_unclamped(a, a) >= -1e-6);
      CHECK(frechet_distance(a, a) >= 0.0);
    }
  }

  TEST_CASE("distance grows with pixel noise through the backbone extractor") {
    const auto& bb = testutil::tiny_backbone();
    const auto extractor = clip_feature_extractor(bb);
    const auto clean = testutil::randn({64, 3, 32, 32}, 20).clamp(-1, 1) * 0.5;
    const auto ref = feature_stats(clean, extractor);
    double last = 0.0;
    for (double amp : {0.1, 0.3, 0.6}) {
      const auto noisy = (clean + amp * testutil::randn({64, 3, 32, 32}, 21)).clamp(-1, 1);
      const double d = frechet_distance(ref, feature_stats(noisy, extractor));
      CHECK(d > last);
      last = d;
    }
  }

  TEST_CASE("clipsim_score: identity direction, pair order, length check") {
    const auto& bb = testutil::tiny_backbone();
    const auto imgs = testutil::randn({4, 3, 32, 32}, 30).clamp(-1, 1);
    torch::Tensor enc;
    {
      torch::NoGradGuard no_grad;
      enc = bb.encode_image(Backbone::normalize(imgs));
    }
    CHECK(clipsim_score(imgs, enc, bb) == doctest::Approx(1.0).epsilon(1e-6));
    const auto texts = testutil::randn({4, 32}, 31);
    const auto perm = torch::tensor({2, 0, 3, 1}, torch::kLong);
    CHECK(clipsim_score(imgs, texts, bb) ==
          doctest::Approx(clipsim_score(imgs.index_select(0, perm), texts.index_select(0, perm), bb)).epsilon(1e-6));
    CHECK_THROWS_AS(clipsim_score(imgs, texts.slice(0, 0, 3), bb), InvalidArgument);
  }

  TEST_CASE("metric report layout") {
    MetricReport r;
    r.values["fid"] = 12.5;
    r.checkpoint_step = 40;
    r.split = "test";
    r.extractor_id = "clip-image:tiny-random";
    testutil::TempDir dir;
    r.write(dir / "sub/report.json");
    std::ifstream in(dir / "sub/report.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("metrics").at("fid") == 12.5);
    CHECK(j.at("metadata").at("checkpoint_step") == 40);
    CHECK(j.at("metadata").at("split") == "test");
    CHECK(j.at("metadata").at("extractor") == "clip-image:tiny-random");
  }
}
