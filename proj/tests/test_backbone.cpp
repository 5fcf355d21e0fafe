#include <doctest.h>

#include <set>

#include "galip/backbone.hpp"
#include "galip/errors.hpp"
#include "galip/safetensors.hpp"
#include "galip/tokenizer.hpp"
#include "test_util.hpp"

using namespace galip;

namespace {

torch::Tensor param(const Backbone& b, const std::string& name) {
  for (const auto& [n, t] : b.named_parameters())
    if (n == name) return t;
  FAIL("no parameter " << name);
  return {};
}

// Patch tokens computed straight from the stored convolution weight.
torch::Tensor patch_tokens(const Backbone& b, const torch::Tensor& images) {
  const auto& c = b.config();
  auto x = torch::conv2d(Backbone::normalize(images), param(b, "visual.conv1.weight"), {}, c.patch_size);
  return x.flatten(2).transpose(1, 2);
}

}  // namespace

TEST_SUITE("backbone") {
  TEST_CASE("tiny-random loads deterministically and is frozen") {
    const auto a = load_backbone("tiny-random", BackboneConfig::tiny(), 7);
    const auto b = load_backbone("tiny-random", BackboneConfig::tiny(), 7);
    const auto c = load_backbone("tiny-random", BackboneConfig::tiny(), 8);
    const auto pa = a.named_parameters();
    const auto pb = b.named_parameters();
    const auto pc = c.named_parameters();
    REQUIRE(pa.size() == pb.size());
    bool any_differs = false;
    for (size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].first == pb[i].first);
      CHECK(torch::equal(pa[i].second, pb[i].second));
      CHECK_FALSE(pa[i].second.requires_grad());
      any_differs = any_differs || !torch::equal(pa[i].second, pc[i].second);
    }
    CHECK(any_differs);
    CHECK(a.source_id() == "random:7");
  }

  TEST_CASE("parameter names follow the CLIP state-dict layout") {
    const auto& b = testutil::tiny_backbone();
    std::set<std::string> names;
    for (const auto& [n, t] : b.named_parameters()) names.insert(n);
    for (std::string n : {"visual.conv1.weight", "visual.class_embedding", "visual.positional_embedding",
                          "visual.ln_pre.weight", "visual.transformer.resblocks.0.attn.in_proj_weight",
                          "visual.transformer.resblocks.3.mlp.c_proj.bias", "visual.ln_post.bias", "visual.proj",
                          "token_embedding.weight", "positional_embedding", "transformer.resblocks.1.ln_2.weight",
                          "ln_final.weight", "text_projection"})
      CHECK_MESSAGE(names.count(n) == 1, n);
    const auto& c = b.config();
    CHECK(param(b, "visual.positional_embedding").sizes() == torch::IntArrayRef{c.tokens() + 1, c.width});
    CHECK(param(b, "visual.proj").sizes() == torch::IntArrayRef{c.width, c.text_embed_dim});
    CHECK(param(b, "text_projection").sizes() == torch::IntArrayRef{c.text_width, c.text_embed_dim});
  }

  TEST_CASE("weight file round trip, shape mismatch and missing file") {
    testutil::TempDir dir;
    const auto& b = testutil::tiny_backbone();
    save_backbone(b, dir / "w.safetensors");
    const auto loaded = load_backbone((dir / "w.safetensors").string(), BackboneConfig::tiny());
    const auto pa = b.named_parameters();
    const auto pb = loaded.named_parameters();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i].second, pb[i].second));

    auto file = safetensors::load(dir / "w.safetensors");
    file.tensors["visual.transformer.resblocks.1.mlp.c_fc.weight"] =
        file.tensors["visual.transformer.resblocks.1.mlp.c_fc.weight"].slice(0, 0, 10).clone();
    safetensors::save(dir / "bad.safetensors", file);
    try {
      load_backbone((dir / "bad.safetensors").string(), BackboneConfig::tiny());
      FAIL("expected ShapeMismatch");
    } catch (const ShapeMismatch& e) {
      CHECK(e.name() == "visual.transformer.resblocks.1.mlp.c_fc.weight");
    }

    file = safetensors::load(dir / "w.safetensors");
    file.tensors.erase("ln_final.bias");
    safetensors::save(dir / "missing.safetensors", file);
    CHECK_THROWS_AS(load_backbone((dir / "missing.safetensors").string(), BackboneConfig::tiny()), MissingKey);
    CHECK_THROWS_AS(load_backbone((dir / "absent.safetensors").string(), BackboneConfig::tiny()), FileNotFound);
  }

  TEST_CASE("config invariants") {
    auto c = BackboneConfig::tiny();
    CHECK_NOTHROW(c.validate());
    CHECK(c.grid() == 4);
    CHECK(BackboneConfig::vit_b32().grid() == 7);
    c.image_size = 30;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
  }

  TEST_CASE("encode_text: determinism, shape, distinct captions") {
    const auto& b = testutil::tiny_backbone();
    HashTokenizer tok(512, 16, 7);
    const auto e1 = b.encode_text(tok.tokenize("a red bird"));
    const auto e1b = b.encode_text(tok.tokenize("a red bird"));
    const auto e2 = b.encode_text(tok.tokenize("a small blue square on the grass"));
    CHECK(e1.sizes() == torch::IntArrayRef{1, 32});
    CHECK(torch::equal(e1, e1b));
    CHECK(torch::isfinite(e1).all().item<bool>());
    const double cos = torch::cosine_similarity(e1, e2, 1).item<double>();
    CHECK(cos < 1.0 - 1e-6);
  }

  TEST_CASE("encode_text reads the end token and ignores padding") {
    const auto& b = testutil::tiny_backbone();
    HashTokenizer tok(512, 16, 7);
    auto t = tok.tokenize("a red bird");
    auto padded = t;
    padded.ids[static_cast<size_t>(t.valid_length)] = 17;  // garbage after the end marker
    CHECK(torch::allclose(b.encode_text(t), b.encode_text(padded), 0, 1e-6));
  }

  TEST_CASE("encode_image: determinism, batch shape, wrong resolution") {
    const auto& b = testutil::tiny_backbone();
    const auto imgs = testutil::randn({3, 3, 32, 32}, 4).clamp(-1, 1);
    const auto a = b.encode_image(Backbone::normalize(imgs));
    CHECK(a.sizes() == torch::IntArrayRef{3, 32});
    CHECK(torch::equal(a, b.encode_image(Backbone::normalize(imgs))));
    CHECK_THROWS_AS(b.encode_image(torch::zeros({1, 3, 24, 24})), InvalidArgument);
  }

  TEST_CASE("optional: one-pixel shift on pretrained weights") {
    const char* weights = std::getenv("GALIP_CLIP_WEIGHTS");
    if (!weights) {
      MESSAGE("GALIP_CLIP_WEIGHTS not set; skipping pretrained checks");
      return;
    }
    const auto b = load_backbone(weights, BackboneConfig::vit_b32());
    CHECK(b.config().grid() == 7);
    CHECK(b.config().width == 768);
    // smooth test pattern, shifted by one pixel
    auto ys = torch::linspace(-1, 1, 224).view({1, 1, 224, 1});
    auto xs = torch::linspace(-1, 1, 224).view({1, 1, 1, 224});
    auto img = torch::cat({torch::sin(3 * xs + 2 * ys), torch::cos(4 * ys + 0 * xs), torch::sin(5 * xs * ys)}, 1);
    auto shifted = torch::roll(img, 1, 3);
    torch::NoGradGuard no_grad;
    const auto ea = b.encode_image(Backbone::normalize(img));
    const auto eb = b.encode_image(Backbone::normalize(shifted));
    const double cos = torch::cosine_similarity(ea, eb, 1).item<double>();
    CHECK(cos < 1.0);
    CHECK(cos > 0.5);
  }

  TEST_CASE("forward_collect shapes, determinism and layer monotonicity") {
    const auto& b = testutil::tiny_backbone();
    const auto imgs = Backbone::normalize(testutil::randn({2, 3, 32, 32}, 5).clamp(-1, 1));
    const auto one = b.forward_collect(imgs, {1});
    REQUIRE(one.size() == 1);
    CHECK(one.levels[0].sizes() == torch::IntArrayRef{2, 32, 4, 4});

    const auto p23 = b.forward_collect(imgs, {2, 3});
    const auto p234 = b.forward_collect(imgs, {2, 3, 4});
    CHECK(p234.layers == std::vector<int64_t>{2, 3, 4});
    for (size_t i = 0; i < 2; ++i) CHECK(torch::equal(p23.levels[i], p234.levels[i]));
    const auto again = b.forward_collect(imgs, {2, 3, 4});
    for (size_t i = 0; i < 3; ++i) CHECK(torch::equal(again.levels[i], p234.levels[i]));

    CHECK_THROWS_AS(b.forward_collect(imgs, {0}), InvalidArgument);
    CHECK_THROWS_AS(b.forward_collect(imgs, {5}), InvalidArgument);
    CHECK_THROWS_AS(b.forward_collect(imgs, {3, 2}), InvalidArgument);
  }

  TEST_CASE("gradients flow to the input image and match finite differences") {
    const auto& b = testutil::tiny_backbone_double();
    const auto x0 = testutil::randn({1, 3, 32, 32}, 7, torch::kDouble).clamp(-1, 1);
    const auto w = testutil::randn({1, 32, 4, 4}, 8, torch::kDouble);
    auto f = [&](const torch::Tensor& x) {
      const auto pyr = b.forward_collect(Backbone::normalize(x), {1, 3});
      return (pyr.levels[0] * w).sum() + pyr.levels[1].pow(2).mean();
    };
    auto x = x0.clone().requires_grad_(true);
    auto g = torch::autograd::grad({f(x)}, {x})[0];
    CHECK(g.abs().sum().item<double>() > 0);
    CHECK(testutil::gradient_check(f, x0, 24) <= 1e-3);
    for (const auto& [n, p] : b.named_parameters()) CHECK_FALSE(p.grad().defined());
  }

  TEST_CASE("forward_prompted without prompts matches the image path") {
    auto cfg = BackboneConfig::tiny();
    cfg.norm_visual_concepts = false;
    const auto b = load_backbone("tiny-random", cfg, 7);
    const auto imgs = testutil::randn({2, 3, 32, 32}, 9).clamp(-1, 1);
    const auto tokens = patch_tokens(b, imgs);
    const auto out = b.forward_prompted(tokens, PromptStack{});
    const auto ref = b.forward_collect(Backbone::normalize(imgs), {cfg.depth}).levels[0];
    CHECK(out.sizes() == torch::IntArrayRef{2, 32, 4, 4});
    CHECK(torch::allclose(out, ref, 1e-5, 1e-6));
  }

  TEST_CASE("zero-valued prompts still take part in attention") {
    const auto& b = testutil::tiny_backbone();
    const auto tokens = testutil::randn({1, 16, 32}, 10);
    const auto none = b.forward_prompted(tokens, PromptStack{});
    PromptStack zeros{torch::zeros({1, 3, 8, 32}), 1};
    const auto prompted = b.forward_prompted(tokens, zeros);
    CHECK(prompted.sizes() == none.sizes());
    CHECK_FALSE(torch::allclose(prompted, none));
  }

  TEST_CASE("deep prompting refreshes slots per layer") {
    const auto& b = testutil::tiny_backbone();
    const auto tokens = testutil::randn({1, 16, 32}, 11);
    auto p = testutil::randn({1, 3, 8, 32}, 12);
    const auto base = b.forward_prompted(tokens, PromptStack{p, 1});
    // last-layer prompts matter, and so does where the stack starts
    auto p2 = p.clone();
    p2.select(1, 2).add_(1.0);
    CHECK_FALSE(torch::allclose(b.forward_prompted(tokens, PromptStack{p2, 1}), base));
    CHECK_FALSE(torch::allclose(b.forward_prompted(tokens, PromptStack{p, 2}), base));
  }

  TEST_CASE("forward_prompted validates widths and ranges") {
    const auto& b = testutil::tiny_backbone();
    const auto tokens = testutil::randn({1, 16, 32}, 13);
    CHECK_THROWS_AS(b.forward_prompted(tokens, PromptStack{torch::zeros({1, 2, 8, 16}), 1}), InvalidArgument);
    CHECK_THROWS_AS(b.forward_prompted(tokens, PromptStack{torch::zeros({1, 4, 8, 32}), 2}), InvalidArgument);
    CHECK_THROWS_AS(b.forward_prompted(testutil::randn({1, 9, 32}, 1), PromptStack{}), InvalidArgument);
  }

  TEST_CASE("final layer norm on visual concepts is switchable") {
    auto cfg = BackboneConfig::tiny();
    const auto with = load_backbone("tiny-random", cfg, 7);
    cfg.norm_visual_concepts = false;
    const auto without = load_backbone("tiny-random", cfg, 7);
    const auto tokens = testutil::randn({1, 16, 32}, 14);
    const auto a = with.forward_prompted(tokens, PromptStack{});
    const auto b = without.forward_prompted(tokens, PromptStack{});
    CHECK_FALSE(torch::allclose(a, b));
  }
}
