#include <doctest.h>

#include "galip/errors.hpp"
#include "galip/generator.hpp"
#include "test_util.hpp"

using namespace galip;

namespace {

const BackboneConfig kTiny = BackboneConfig::tiny();

MateGenerator tiny_generator(uint64_t seed = 3, GeneratorConfig cfg = GeneratorConfig::tiny()) {
  return MateGenerator(cfg, kTiny, seed);
}

torch::Tensor leaky(const torch::Tensor& x) { return torch::where(x >= 0, x, 0.2 * x); }

}  // namespace

TEST_SUITE("generator") {
  TEST_CASE("condition puts text first") {
    auto text = torch::full({2, 3}, 1.0);
    auto noise = torch::full({2, 4}, 2.0);
    auto c = make_condition(text, noise);
    CHECK(c.sizes() == torch::IntArrayRef{2, 7});
    CHECK(c[0][0].item<double>() == 1.0);
    CHECK(c[0][6].item<double>() == 2.0);
    CHECK_THROWS_AS(make_condition(torch::zeros({2, 3}), torch::zeros({3, 4})), InvalidArgument);
  }

  TEST_CASE("orthogonal init yields orthonormal rows or columns") {
    auto gen = testutil::gen(1);
    auto tall = torch::empty({12, 5});
    orthogonal_init(tall, gen);
    CHECK(torch::allclose(tall.t().mm(tall), torch::eye(5), 1e-5, 1e-5));
    auto wide = torch::empty({4, 3, 3, 3});
    orthogonal_init(wide, gen);
    auto flat = wide.view({4, -1});
    CHECK(torch::allclose(flat.mm(flat.t()), torch::eye(4), 1e-5, 1e-5));
  }

  TEST_CASE("DFBlock with zeroed modulation nets is rectify + convolution") {
    torch::manual_seed(0);
    DFBlock block(6, 5, 10);
    auto x = testutil::randn({2, 6, 4, 4}, 2);
    auto cond = testutil::randn({2, 10}, 3);
    {
      torch::NoGradGuard no_grad;
      for (auto* a : {&block->affine0, &block->affine1}) {
        (*a)->gamma_fc2->weight.zero_();
        (*a)->gamma_fc2->bias.zero_();
        (*a)->beta_fc2->weight.zero_();
        (*a)->beta_fc2->bias.zero_();
      }
    }
    auto expected = block->conv(leaky(leaky(x)));
    CHECK(torch::allclose(block(x, cond), expected, 1e-6, 1e-6));
  }

  TEST_CASE("zero condition with nonzero biases scales each channel uniformly") {
    torch::manual_seed(1);
    Affine affine(4, 6);
    {
      torch::NoGradGuard no_grad;
      for (auto* l : {&affine->gamma_fc1, &affine->gamma_fc2, &affine->beta_fc1, &affine->beta_fc2}) {
        (*l)->weight.normal_();
        (*l)->bias.normal_();
      }
    }
    auto x = testutil::randn({1, 4, 3, 3}, 4);
    auto cond = torch::zeros({1, 6});
    auto y = affine(x, cond);
    // gamma(0) = W2 relu(b1) + b2, beta(0) likewise
    auto g = affine->gamma_fc2->weight.mv(torch::relu(affine->gamma_fc1->bias)) + affine->gamma_fc2->bias;
    auto b = affine->beta_fc2->weight.mv(torch::relu(affine->beta_fc1->bias)) + affine->beta_fc2->bias;
    for (int64_t c = 0; c < 4; ++c) {
      auto expected = x[0][c] * (1 + g[c]) + b[c];
      CHECK(torch::allclose(y[0][c], expected, 1e-5, 1e-6));
    }
    CHECK_THROWS_AS(affine(testutil::randn({1, 5, 3, 3}, 5), cond), InvalidArgument);
  }

  TEST_CASE("different conditions give different DFBlock outputs") {
    torch::manual_seed(2);
    DFBlock block(4, 4, 6);
    {
      torch::NoGradGuard no_grad;
      for (auto& p : block->parameters()) p.normal_(0, 0.3);
    }
    auto x = testutil::randn({1, 4, 3, 3}, 6);
    CHECK_FALSE(torch::allclose(block(x, testutil::randn({1, 6}, 7)), block(x, testutil::randn({1, 6}, 8))));
  }

  TEST_CASE("config validation") {
    auto cfg = GeneratorConfig::tiny();
    CHECK_NOTHROW(cfg.validate(kTiny));
    cfg.generation_blocks = 3;  // 4 -> 32 needs three doublings plus the first block
    CHECK_THROWS_AS(cfg.validate(kTiny), InvalidArgument);
    cfg = GeneratorConfig::tiny();
    cfg.fusion_blocks = 0;
    CHECK_THROWS_AS(cfg.validate(kTiny), InvalidArgument);
    cfg = GeneratorConfig::tiny();
    cfg.prompt_last_layer = 5;
    CHECK_THROWS_AS(cfg.validate(kTiny), InvalidArgument);
    CHECK(GeneratorConfig{}.noise_dim == 100);
    CHECK(GeneratorConfig{}.prompt_layers() == 9);
    CHECK(GeneratorConfig{}.block_channels(0) == 512);
    CHECK(GeneratorConfig{}.block_channels(5) == 32);
  }

  TEST_CASE("predict_bridge: tiny shape and determinism across instances") {
    auto a = tiny_generator(5);
    auto b = tiny_generator(5);
    auto noise = testutil::randn({2, 16}, 9);
    auto text = testutil::randn({2, 32}, 10);
    auto ba = a->predict_bridge(noise, text);
    CHECK(ba.sizes() == torch::IntArrayRef{2, 16, 4, 4});
    CHECK(torch::equal(ba, b->predict_bridge(noise, text)));
    CHECK_THROWS_AS(a->predict_bridge(testutil::randn({2, 15}, 1), text), InvalidArgument);
  }

  TEST_CASE("predict_prompts: shape, disabled flag, determinism") {
    auto g = tiny_generator();
    auto noise = testutil::randn({2, 16}, 11);
    auto text = testutil::randn({2, 32}, 12);
    auto p = g->predict_prompts(noise, text);
    CHECK(p.tokens.sizes() == torch::IntArrayRef{2, 3, 8, 32});
    CHECK(p.first_layer == 1);
    CHECK(torch::equal(p.tokens, g->predict_prompts(noise, text).tokens));

    auto cfg = GeneratorConfig::tiny();
    cfg.enable_prompt_predictor = false;
    auto off = tiny_generator(3, cfg);
    CHECK(off->predict_prompts(noise, text).empty());
  }

  TEST_CASE("project_to_tokens: shape, zero projection, row-major order") {
    auto bb = kTiny;
    bb.image_size = 56;  // grid 7
    auto cfg = GeneratorConfig::tiny();
    MateGenerator g(cfg, bb, 1);
    auto bridge = torch::zeros({1, 16, 7, 7});
    bridge[0][4][2][3] = 1.0;
    {
      torch::NoGradGuard no_grad;
      g->token_proj->bias.zero_();
    }
    auto tokens = g->project_to_tokens(bridge);
    CHECK(tokens.sizes() == torch::IntArrayRef{1, 49, 32});
    auto nonzero = tokens[0].abs().sum(1).nonzero().flatten();
    REQUIRE(nonzero.numel() == 1);
    CHECK(nonzero[0].item<int64_t>() == 17);

    {
      torch::NoGradGuard no_grad;
      g->token_proj->weight.zero_();
    }
    CHECK(g->project_to_tokens(testutil::randn({2, 16, 7, 7}, 1)).abs().max().item<double>() == 0.0);
  }

  TEST_CASE("synthesize_image: tiny shape and tanh bound under large weights") {
    auto g = tiny_generator();
    {
      torch::NoGradGuard no_grad;
      for (auto& p : g->parameters()) p.normal_(0, 0.5);
    }
    auto noise = testutil::randn({2, 16}, 13);
    auto text = testutil::randn({2, 32}, 14);
    auto img = g->synthesize_image(testutil::randn({2, 32, 4, 4}, 15), testutil::randn({2, 16, 4, 4}, 16),
                                   make_condition(text, noise));
    CHECK(img.sizes() == torch::IntArrayRef{2, 3, 32, 32});
    CHECK(img.abs().max().item<double>() <= 1.0);
    CHECK_THROWS_AS(g->synthesize_image(testutil::randn({2, 32, 4, 4}, 1), testutil::randn({2, 16, 3, 3}, 1),
                                        make_condition(text, noise)),
                    InvalidArgument);
  }

  TEST_CASE("generate is single-pass and distinguishes noise") {
    const auto& bb = testutil::tiny_backbone();
    auto g = tiny_generator();
    {
      torch::NoGradGuard no_grad;
      for (auto& item : g->named_parameters())
        if (item.key().find("_fc2.") != std::string::npos) item.value().normal_(0, 0.1);
    }
    g->reset_stage_counts();
    auto noise = testutil::randn({16, 16}, 17);
    auto text = testutil::randn({1, 32}, 18).expand({16, 32});
    torch::NoGradGuard no_grad;
    auto imgs = g->generate(noise, text, bb);
    const auto c = g->stage_counts();
    CHECK(c.predict_bridge == 1);
    CHECK(c.predict_prompts == 1);
    CHECK(c.project_to_tokens == 1);
    CHECK(c.forward_prompted == 1);
    CHECK(c.synthesize_image == 1);
    CHECK(imgs.sizes() == torch::IntArrayRef{16, 3, 32, 32});
    auto flat = imgs.flatten(1);
    auto d = torch::cdist(flat.unsqueeze(0), flat.unsqueeze(0))[0];
    d = d + torch::eye(16) * 1e9;
    CHECK(d.min().item<double>() > 0);
    CHECK(torch::equal(imgs, g->generate(noise, text, bb)));
  }

  TEST_CASE("ablations shrink the model and still produce valid images") {
    const auto& bb = testutil::tiny_backbone();
    auto full = tiny_generator();
    auto cfg = GeneratorConfig::tiny();
    cfg.enable_prompt_predictor = false;
    cfg.enable_bridge_path = false;
    auto reduced = tiny_generator(3, cfg);
    auto count = [](torch::nn::Module& m) {
      int64_t n = 0;
      for (const auto& p : m.parameters()) n += p.numel();
      return n;
    };
    CHECK(count(*reduced) < count(*full));
    CHECK(reduced->bridge_const.defined());

    torch::NoGradGuard no_grad;
    auto noise = testutil::randn({2, 16}, 19);
    auto text = testutil::randn({2, 32}, 20);
    auto img = reduced->generate(noise, text, bb);
    CHECK(img.sizes() == torch::IntArrayRef{2, 3, 32, 32});
    CHECK(img.abs().max().item<double>() <= 1.0);
    CHECK(torch::isfinite(img).all().item<bool>());

    cfg = GeneratorConfig::tiny();
    cfg.enable_clip_generator = false;
    auto no_clip = tiny_generator(3, cfg);
    no_clip->reset_stage_counts();
    CHECK(no_clip->generate(noise, text, bb).sizes() == torch::IntArrayRef{2, 3, 32, 32});
    CHECK(no_clip->stage_counts().forward_prompted == 0);
    CHECK_FALSE(no_clip->token_proj);
  }

  TEST_CASE("every generator parameter group receives gradient; the backbone none") {
    const auto& bb = testutil::tiny_backbone();
    auto g = tiny_generator();
    auto noise = testutil::randn({2, 16}, 21);
    auto text = testutil::randn({2, 32}, 22);
    auto loss = g->generate(noise, text, bb).pow(2).mean();
    loss.backward();
    std::map<std::string, double> groups;
    for (const auto& item : g->named_parameters()) {
      const auto group = item.key().substr(0, item.key().find('.'));
      const auto& grad = item.value().grad();
      groups[group] += grad.defined() ? grad.abs().sum().item<double>() : 0.0;
    }
    for (std::string name : {"bridge_fc", "fusion", "prompt_fc", "token_proj", "concept_proj", "blocks", "to_rgb"}) {
      REQUIRE_MESSAGE(groups.count(name) == 1, name);
      CHECK_MESSAGE(groups[name] > 0, name);
    }
    for (const auto& [n, p] : bb.named_parameters()) CHECK_FALSE(p.grad().defined());
  }

  TEST_CASE("output change shrinks with the text perturbation") {
    const auto& bb = testutil::tiny_backbone();
    auto g = tiny_generator();
    torch::NoGradGuard no_grad;
    double big = 0, small = 0;
    for (int trial = 0; trial < 32; ++trial) {
      auto noise = testutil::randn({1, 16}, 100 + trial);
      auto text = testutil::randn({1, 32}, 200 + trial);
      auto delta = testutil::randn({1, 32}, 300 + trial) * 0.5;
      auto base = g->generate(noise, text, bb);
      big += (g->generate(noise, text + delta, bb) - base).abs().mean().item<double>();
      small += (g->generate(noise, text + delta / 10, bb) - base).abs().mean().item<double>();
    }
    CHECK(small <= 0.5 * big);
  }
}
