#include <doctest.h>

#include "fixtures.hpp"
#include "galip/image_io.hpp"
#include "galip/serving.hpp"

#include <httplib.h>

using namespace galip;
using namespace galip::serving;
using nlohmann::json;

namespace {

// One checkpoint shared by the suite.
const std::filesystem::path& checkpoint() {
  static testutil::TempDir dir;
  static const auto path = [] {
    auto p = dir / "tiny.safetensors";
    testutil::write_tiny_checkpoint(p, 2, 3);
    return p;
  }();
  return path;
}

std::shared_ptr<GenerationService> service(uint64_t salt = 1) {
  return std::make_shared<GenerationService>(
      std::make_shared<GeneratorBundle>(load_generator_bundle(checkpoint())), 1024, salt);
}

int status_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.status();
  }
  return 200;
}

}  // namespace

TEST_SUITE("serving") {
  TEST_CASE("interp_embedding corners and blend") {
    std::array<torch::Tensor, 4> e{testutil::randn({6}, 1), testutil::randn({6}, 2), testutil::randn({6}, 3),
                                   testutil::randn({6}, 4)};
    CHECK(torch::equal(interp_embedding(e, 0, 0), e[0]));
    CHECK(torch::equal(interp_embedding(e, 1, 0), e[1]));
    CHECK(torch::equal(interp_embedding(e, 0, 1), e[2]));
    CHECK(torch::equal(interp_embedding(e, 1, 1), e[3]));
    const auto mid = interp_embedding(e, 0.5, 0.5);
    CHECK(torch::allclose(mid, (e[0] + e[1] + e[2] + e[3]) / 4, 1e-6, 1e-6));
    const auto edge = interp_embedding(e, 0.25, 0);
    CHECK(torch::allclose(edge, 0.75 * e[0] + 0.25 * e[1], 1e-6, 1e-6));
    CHECK_THROWS_AS(interp_embedding(e, -0.1, 0), InvalidArgument);
    CHECK_THROWS_AS(interp_embedding(e, 0, 1.5), InvalidArgument);
  }

  TEST_CASE("anchor cache: stable ids, LRU bound, salt") {
    AnchorCache cache(3, 9);
    const auto a = testutil::randn({4}, 1);
    const auto id = cache.put(a);
    CHECK(id.size() == 16);
    CHECK(cache.put(a.clone()) == id);
    CHECK(cache.size() == 1);
    CHECK(torch::equal(*cache.get(id), a));
    CHECK(cache.created(id).has_value());
    const auto b = cache.put(testutil::randn({4}, 2));
    cache.put(testutil::randn({4}, 3));
    cache.get(id);  // refresh a; b is now least recent
    cache.put(testutil::randn({4}, 4));
    CHECK(cache.size() == 3);
    CHECK(cache.get(id).has_value());
    CHECK_FALSE(cache.get(b).has_value());
    CHECK(AnchorCache(3, 10).put(a) != id);
    CHECK_THROWS_AS(AnchorCache(0), InvalidArgument);
  }

  TEST_CASE("noise rows do not depend on the batch") {
    const auto r = noise_row(5, 3, 16, torch::kFloat);
    CHECK(r.sizes() == torch::IntArrayRef{1, 16});
    CHECK(torch::equal(r, noise_row(5, 3, 16, torch::kFloat)));
    CHECK_FALSE(torch::equal(r, noise_row(5, 2, 16, torch::kFloat)));
    CHECK_FALSE(torch::equal(r, noise_row(6, 3, 16, torch::kFloat)));
  }

  TEST_CASE("generate: determinism, count, per-image independence") {
    auto svc = service();
    const auto a = svc->handle_generate({{"prompt", "a red circle"}, {"seed", 11}, {"count", 3}});
    const auto b = svc->handle_generate({{"prompt", "a red circle"}, {"seed", 11}, {"count", 1}});
    CHECK(a.at("images").size() == 3);
    CHECK(a.at("similarities").size() == 3);
    CHECK(a.at("images")[0] == b.at("images")[0]);
    CHECK(a.at("images")[0] != a.at("images")[1]);
    CHECK(a.at("anchor_id") == b.at("anchor_id"));
    CHECK(a.at("checkpoint_id") == "tiny.safetensors@2");
    CHECK(a.at("backbone_id").get<std::string>().find("random:7") != std::string::npos);
    const auto img = decode_image(base64_decode(a.at("images")[0].get<std::string>()));
    CHECK(img.width == 32);
    CHECK(img.height == 32);
    const auto drawn = svc->handle_generate({{"prompt", "x"}});
    CHECK(drawn.at("seed").get<uint64_t>() < (uint64_t{1} << 53));
  }

  TEST_CASE("request validation maps to status codes") {
    auto svc = service();
    CHECK(status_of([&] { svc->handle_generate({{"prompt", "x"}, {"count", 17}}); }) == 400);
    CHECK(status_of([&] { svc->handle_generate({{"prompt", ""}}); }) == 400);
    CHECK(status_of([&] { svc->handle_generate({{"count", 2}}); }) == 400);
    CHECK(status_of([&] { svc->handle_generate({{"prompt", "x"}, {"seed", -1}}); }) == 400);
    CHECK(status_of([&] { svc->handle_grid({{"corners", {"a", "b", "c"}}, {"rows", 2}, {"cols", 2}}); }) == 400);
    CHECK(status_of([&] { svc->handle_grid({{"corners", {"a", "b", "c", "d"}}, {"rows", 1}, {"cols", 2}}); }) == 400);
    CHECK(status_of([&] { svc->handle_grid({{"corners", {"a", "b", "c", "d"}}, {"rows", 2}, {"cols", 17}}); }) == 400);
    CHECK(status_of([&] {
            svc->handle_grid({{"corners", {{{"anchor", "0123456789abcdef"}}, "b", "c", "d"}}, {"rows", 2}, {"cols", 2}});
          }) == 404);
    CHECK(status_of([&] { svc->interpolate({{"prompt_a", "a"}, {"prompt_b", "b"}, {"steps", 65}}); }) == 400);
    try {
      svc->handle_generate({{"prompt", "x"}, {"count", 17}});
    } catch (const ServiceError& e) {
      CHECK(std::string(e.what()).find("16") != std::string::npos);
    }

    GenerationService empty;
    CHECK(empty.healthz().at("status") != "ok");
    CHECK(status_of([&] { empty.handle_generate({{"prompt", "x"}}); }) == 503);
  }

  TEST_CASE("grid: geometry, corners equal single generations, promotion") {
    auto svc = service();
    const std::vector<std::string> prompts{"a red circle", "a blue square", "a green triangle", "a yellow circle"};
    const auto grid = svc->handle_grid({{"corners", prompts}, {"rows", 3}, {"cols", 4}, {"seed", 5}});
    CHECK(grid.at("share_noise") == true);
    const auto& cells = grid.at("cells");
    REQUIRE(cells.size() == 12);
    CHECK(cells[5].at("row") == 1);
    CHECK(cells[5].at("col") == 1);
    CHECK(cells[5].at("u").get<double>() == doctest::Approx(1.0 / 3));
    CHECK(cells[5].at("v").get<double>() == doctest::Approx(0.5));
    const size_t corner_cells[4] = {0, 3, 8, 11};
    for (size_t i = 0; i < 4; ++i) {
      const auto single = svc->handle_generate({{"prompt", prompts[i]}, {"seed", 5}});
      CHECK(cells[corner_cells[i]].at("image") == single.at("images")[0]);
      CHECK(grid.at("corner_anchor_ids")[i] == single.at("anchor_id"));
    }

    const auto promoted = cells[5].at("anchor_id").get<std::string>();
    const auto again = svc->handle_grid(
        {{"corners", {{{"anchor", promoted}}, "a", "b", "c"}}, {"rows", 2}, {"cols", 2}, {"seed", 5}});
    CHECK(again.at("cells")[0].at("image") == cells[5].at("image"));
    CHECK(again.at("corner_anchor_ids")[0] == promoted);

    const auto independent =
        svc->handle_grid({{"corners", prompts}, {"rows", 2}, {"cols", 2}, {"seed", 5}, {"share_noise", false}});
    CHECK(independent.at("cells")[0].at("image") == cells[0].at("image"));
    CHECK(independent.at("cells")[1].at("image") != cells[3].at("image"));
  }

  TEST_CASE("interpolate frames") {
    auto svc = service();
    const auto r = svc->interpolate({{"prompt_a", "a red circle"}, {"prompt_b", "a blue square"}, {"steps", 5}, {"seed", 2}});
    const auto& frames = r.at("frames");
    REQUIRE(frames.size() == 5);
    CHECK(frames[0].at("t") == 0.0);
    CHECK(frames[4].at("t") == 1.0);
    CHECK(frames[2].at("t").get<double>() == doctest::Approx(0.5));
    const auto a = svc->handle_generate({{"prompt", "a red circle"}, {"seed", 2}});
    const auto b = svc->handle_generate({{"prompt", "a blue square"}, {"seed", 2}});
    CHECK(frames[0].at("image") == a.at("images")[0]);
    CHECK(frames[4].at("image") == b.at("images")[0]);
  }

  TEST_CASE("snapshot swap keeps serving") {
    auto svc = service();
    const auto before = svc->handle_generate({{"prompt", "p"}, {"seed", 1}});
    testutil::TempDir dir;
    testutil::write_tiny_checkpoint(dir / "other.safetensors", 1, 9);
    svc->swap_snapshot(std::make_shared<GeneratorBundle>(load_generator_bundle(dir / "other.safetensors")));
    const auto after = svc->handle_generate({{"prompt", "p"}, {"seed", 1}});
    CHECK(after.at("checkpoint_id") == "other.safetensors@1");
    CHECK(after.at("images")[0] != before.at("images")[0]);
  }

  TEST_CASE("HTTP routes, status codes and CORS") {
    HttpServer server(service());
    const int port = server.bind("127.0.0.1", 0);
    server.start();
    httplib::Client client("127.0.0.1", port);

    auto health = client.Get("/healthz");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(json::parse(health->body).at("status") == "ok");

    const std::string body = R"({"prompt": "a red circle", "seed": 4, "count": 2})";
    auto r1 = client.Post("/generate", body, "application/json");
    auto r2 = client.Post("/generate", body, "application/json");
    REQUIRE(r1);
    REQUIRE(r2);
    CHECK(r1->status == 200);
    CHECK(r1->body == r2->body);
    CHECK(r1->get_header_value("Access-Control-Allow-Origin") == "*");

    auto bad = client.Post("/generate", "{not json", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    auto too_many = client.Post("/generate", R"({"prompt": "x", "count": 17})", "application/json");
    REQUIRE(too_many);
    CHECK(too_many->status == 400);
    CHECK(json::parse(too_many->body).at("error").get<std::string>().find("16") != std::string::npos);
    auto unknown = client.Post("/grid", R"({"corners": [{"anchor": "ffff"}, "a", "b", "c"], "rows": 2, "cols": 2})",
                               "application/json");
    REQUIRE(unknown);
    CHECK(unknown->status == 404);
    CHECK(json::parse(unknown->body).at("error").get<std::string>().find("ffff") != std::string::npos);
    server.stop();

    HttpServer idle(std::make_shared<GenerationService>());
    const int idle_port = idle.bind("127.0.0.1", 0);
    idle.start();
    httplib::Client c2("127.0.0.1", idle_port);
    auto h = c2.Get("/healthz");
    REQUIRE(h);
    CHECK(h->status == 503);
    auto g = c2.Post("/generate", R"({"prompt": "x"})", "application/json");
    REQUIRE(g);
    CHECK(g->status == 503);
    idle.stop();
  }
}
