#include "galip/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "galip/errors.hpp"
#include "galip/safetensors.hpp"

namespace galip {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// TrainConfig

TrainConfig TrainConfig::full() { return TrainConfig{}; }

TrainConfig TrainConfig::tiny() {
  TrainConfig c;
  c.backbone_source = "tiny-random";
  c.backbone = BackboneConfig::tiny();
  c.generator = GeneratorConfig::tiny();
  c.discriminator = DiscriminatorConfig::tiny();
  c.batch_size = 8;
  c.max_steps = 2000;
  c.checkpoint_every = 500;
  return c;
}

void TrainConfig::validate() const {
  backbone.validate();
  generator.validate(backbone);
  discriminator.validate(backbone);
  objective.validate();
  if (!(lr_generator > 0.0) || !(lr_discriminator > 0.0)) throw InvalidArgument("learning rates must be positive");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
    throw InvalidArgument("Adam betas must lie in [0, 1)");
  if (batch_size < 2) throw InvalidArgument("batch_size must be >= 2 (mismatched pairs need two captions)");
  if (max_steps < 0 || checkpoint_every < 0) throw InvalidArgument("step counts must be non-negative");
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"backbone_source", c.backbone_source},
       {"backbone_seed", c.backbone_seed},
       {"vocab_path", c.vocab_path},
       {"backbone", c.backbone},
       {"generator", c.generator},
       {"discriminator", c.discriminator},
       {"objective", c.objective},
       {"batch_size", c.batch_size},
       {"lr_generator", c.lr_generator},
       {"lr_discriminator", c.lr_discriminator},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"max_steps", c.max_steps},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"train_split", c.train_split},
       {"double_precision", c.double_precision}};
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("backbone_source", c.backbone_source);
  get("backbone_seed", c.backbone_seed);
  get("vocab_path", c.vocab_path);
  get("backbone", c.backbone);
  get("generator", c.generator);
  get("discriminator", c.discriminator);
  get("objective", c.objective);
  get("batch_size", c.batch_size);
  get("lr_generator", c.lr_generator);
  get("lr_discriminator", c.lr_discriminator);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("max_steps", c.max_steps);
  get("seed", c.seed);
  get("checkpoint_every", c.checkpoint_every);
  get("train_split", c.train_split);
  get("double_precision", c.double_precision);
}

// ---------------------------------------------------------------------------
// Flat config documents

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw InvalidArgument("config key '" + key + "': expected a boolean, got '" + v + "'");
}

int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const auto out = std::stoll(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw InvalidArgument("config key '" + key + "': expected an integer, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const auto out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw InvalidArgument("config key '" + key + "': expected a number, got '" + v + "'");
}

std::vector<int64_t> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
  return out;
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"backbone", [](auto& c, auto&, auto& v) { c.backbone_source = v; }},
      {"backbone_seed", [](auto& c, auto& k, auto& v) { c.backbone_seed = static_cast<uint64_t>(parse_int(k, v)); }},
      {"vocab", [](auto& c, auto&, auto& v) { c.vocab_path = v; }},
      {"image_size", [](auto& c, auto& k, auto& v) { c.backbone.image_size = parse_int(k, v); }},
      {"patch_size", [](auto& c, auto& k, auto& v) { c.backbone.patch_size = parse_int(k, v); }},
      {"depth", [](auto& c, auto& k, auto& v) { c.backbone.depth = parse_int(k, v); }},
      {"width", [](auto& c, auto& k, auto& v) { c.backbone.width = parse_int(k, v); }},
      {"heads", [](auto& c, auto& k, auto& v) { c.backbone.heads = parse_int(k, v); }},
      {"text_embed_dim", [](auto& c, auto& k, auto& v) { c.backbone.text_embed_dim = parse_int(k, v); }},
      {"text_width", [](auto& c, auto& k, auto& v) { c.backbone.text_width = parse_int(k, v); }},
      {"text_depth", [](auto& c, auto& k, auto& v) { c.backbone.text_depth = parse_int(k, v); }},
      {"text_heads", [](auto& c, auto& k, auto& v) { c.backbone.text_heads = parse_int(k, v); }},
      {"vocab_size", [](auto& c, auto& k, auto& v) { c.backbone.vocab_size = parse_int(k, v); }},
      {"context_length", [](auto& c, auto& k, auto& v) { c.backbone.context_length = parse_int(k, v); }},
      {"norm_visual_concepts",
       [](auto& c, auto& k, auto& v) { c.backbone.norm_visual_concepts = parse_bool(k, v); }},
      {"noise_dim", [](auto& c, auto& k, auto& v) { c.generator.noise_dim = parse_int(k, v); }},
      {"bridge_channels", [](auto& c, auto& k, auto& v) { c.generator.bridge_channels = parse_int(k, v); }},
      {"fusion_blocks", [](auto& c, auto& k, auto& v) { c.generator.fusion_blocks = parse_int(k, v); }},
      {"generation_blocks", [](auto& c, auto& k, auto& v) { c.generator.generation_blocks = parse_int(k, v); }},
      {"prompt_layers",
       [](auto& c, auto& k, auto& v) {
         const auto dash = v.find('-');
         if (dash == std::string::npos) throw InvalidArgument("config key 'prompt_layers': expected first-last");
         c.generator.prompt_first_layer = parse_int(k, trim(v.substr(0, dash)));
         c.generator.prompt_last_layer = parse_int(k, trim(v.substr(dash + 1)));
       }},
      {"prompts_per_layer", [](auto& c, auto& k, auto& v) { c.generator.prompts_per_layer = parse_int(k, v); }},
      {"base_channels", [](auto& c, auto& k, auto& v) { c.generator.base_channels = parse_int(k, v); }},
      {"min_channels", [](auto& c, auto& k, auto& v) { c.generator.min_channels = parse_int(k, v); }},
      {"enable_pp", [](auto& c, auto& k, auto& v) { c.generator.enable_prompt_predictor = parse_bool(k, v); }},
      {"enable_bfp", [](auto& c, auto& k, auto& v) { c.generator.enable_bridge_path = parse_bool(k, v); }},
      {"enable_cg", [](auto& c, auto& k, auto& v) { c.generator.enable_clip_generator = parse_bool(k, v); }},
      {"enable_cd",
       [](auto& c, auto& k, auto& v) { c.discriminator.enable_clip_discriminator = parse_bool(k, v); }},
      {"collected_layers", [](auto& c, auto& k, auto& v) { c.discriminator.collected_layers = parse_int_list(k, v); }},
      {"extraction_channels",
       [](auto& c, auto& k, auto& v) { c.discriminator.extraction_channels = parse_int(k, v); }},
      {"assessor_channels", [](auto& c, auto& k, auto& v) { c.discriminator.assessor_channels = parse_int(k, v); }},
      {"k", [](auto& c, auto& k, auto& v) { c.objective.k = parse_double(k, v); }},
      {"p", [](auto& c, auto& k, auto& v) { c.objective.p = parse_double(k, v); }},
      {"lambda", [](auto& c, auto& k, auto& v) { c.objective.lambda = parse_double(k, v); }},
      {"per_level_norm", [](auto& c, auto& k, auto& v) { c.objective.per_level_norm = parse_bool(k, v); }},
      {"batch_size", [](auto& c, auto& k, auto& v) { c.batch_size = parse_int(k, v); }},
      {"lr_generator", [](auto& c, auto& k, auto& v) { c.lr_generator = parse_double(k, v); }},
      {"lr_discriminator", [](auto& c, auto& k, auto& v) { c.lr_discriminator = parse_double(k, v); }},
      {"adam_beta1", [](auto& c, auto& k, auto& v) { c.adam_beta1 = parse_double(k, v); }},
      {"adam_beta2", [](auto& c, auto& k, auto& v) { c.adam_beta2 = parse_double(k, v); }},
      {"max_steps", [](auto& c, auto& k, auto& v) { c.max_steps = parse_int(k, v); }},
      {"seed", [](auto& c, auto& k, auto& v) { c.seed = static_cast<uint64_t>(parse_int(k, v)); }},
      {"checkpoint_every", [](auto& c, auto& k, auto& v) { c.checkpoint_every = parse_int(k, v); }},
      {"train_split", [](auto& c, auto&, auto& v) { c.train_split = v; }},
      {"double_precision", [](auto& c, auto& k, auto& v) { c.double_precision = parse_bool(k, v); }},
  };
  return table;
}

}  // namespace

TrainConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  int64_t line_no = 0;
  std::string preset = "full";
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument("config line " + std::to_string(line_no) + ": expected 'key = value'");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key == "preset") {
      preset = value;
      continue;
    }
    entries.emplace_back(std::move(key), std::move(value));
  }
  TrainConfig config;
  if (preset == "tiny") {
    config = TrainConfig::tiny();
  } else if (preset == "full" || preset == "default") {
    config = TrainConfig::full();
  } else {
    throw InvalidArgument("config: unknown preset '" + preset + "'");
  }
  for (const auto& [key, value] : entries) {
    bool found = false;
    for (const auto& [name, set] : setters()) {
      if (name == key) {
        set(config, key, value);
        found = true;
        break;
      }
    }
    if (!found) throw InvalidArgument("config: unknown key '" + key + "'");
  }
  config.validate();
  return config;
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFound(path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const TrainConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  auto list = [](const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "# frozen backbone\n"
     << "backbone = " << c.backbone_source << "\n"
     << "backbone_seed = " << c.backbone_seed << "\n"
     << "vocab = " << c.vocab_path << "\n"
     << "image_size = " << c.backbone.image_size << "\n"
     << "patch_size = " << c.backbone.patch_size << "\n"
     << "depth = " << c.backbone.depth << "\n"
     << "width = " << c.backbone.width << "\n"
     << "heads = " << c.backbone.heads << "\n"
     << "text_embed_dim = " << c.backbone.text_embed_dim << "\n"
     << "text_width = " << c.backbone.text_width << "\n"
     << "text_depth = " << c.backbone.text_depth << "\n"
     << "text_heads = " << c.backbone.text_heads << "\n"
     << "vocab_size = " << c.backbone.vocab_size << "\n"
     << "context_length = " << c.backbone.context_length << "\n"
     << "norm_visual_concepts = " << b(c.backbone.norm_visual_concepts) << "\n"
     << "\n# generator\n"
     << "noise_dim = " << c.generator.noise_dim << "\n"
     << "bridge_channels = " << c.generator.bridge_channels << "\n"
     << "fusion_blocks = " << c.generator.fusion_blocks << "\n"
     << "generation_blocks = " << c.generator.generation_blocks << "\n"
     << "prompt_layers = " << c.generator.prompt_first_layer << "-" << c.generator.prompt_last_layer << "\n"
     << "prompts_per_layer = " << c.generator.prompts_per_layer << "\n"
     << "base_channels = " << c.generator.base_channels << "\n"
     << "min_channels = " << c.generator.min_channels << "\n"
     << "enable_pp = " << b(c.generator.enable_prompt_predictor) << "\n"
     << "enable_bfp = " << b(c.generator.enable_bridge_path) << "\n"
     << "enable_cg = " << b(c.generator.enable_clip_generator) << "\n"
     << "\n# discriminator\n"
     << "enable_cd = " << b(c.discriminator.enable_clip_discriminator) << "\n"
     << "collected_layers = " << list(c.discriminator.collected_layers) << "\n"
     << "extraction_channels = " << c.discriminator.extraction_channels << "\n"
     << "assessor_channels = " << c.discriminator.assessor_channels << "\n"
     << "\n# objective\n"
     << "k = " << c.objective.k << "\n"
     << "p = " << c.objective.p << "\n"
     << "lambda = " << c.objective.lambda << "\n"
     << "per_level_norm = " << b(c.objective.per_level_norm) << "\n"
     << "\n# optimisation\n"
     << "batch_size = " << c.batch_size << "\n"
     << "lr_generator = " << c.lr_generator << "\n"
     << "lr_discriminator = " << c.lr_discriminator << "\n"
     << "adam_beta1 = " << c.adam_beta1 << "\n"
     << "adam_beta2 = " << c.adam_beta2 << "\n"
     << "max_steps = " << c.max_steps << "\n"
     << "seed = " << c.seed << "\n"
     << "checkpoint_every = " << c.checkpoint_every << "\n"
     << "train_split = " << c.train_split << "\n"
     << "double_precision = " << b(c.double_precision) << "\n";
  return os.str();
}

std::unique_ptr<Tokenizer> make_tokenizer(const TrainConfig& config) {
  if (config.vocab_path.empty())
    return std::make_unique<HashTokenizer>(config.backbone.vocab_size, config.backbone.context_length,
                                           config.backbone_seed);
  return BpeTokenizer::from_file(config.vocab_path, config.backbone.context_length);
}

torch::Tensor make_mismatch(const torch::Tensor& texts) {
  if (texts.dim() < 1 || texts.size(0) < 2) throw InvalidArgument("make_mismatch: need at least two embeddings");
  return torch::roll(texts, -1, 0);
}

json StepMetrics::to_json() const {
  return {{"step", step},         {"loss_d", loss_d},         {"hinge", hinge},
          {"magp", magp},         {"loss_g", loss_g},         {"clipsim_train", similarity},
          {"real_logit", real_logit}, {"fake_logit", fake_logit}, {"mismatch_logit", mismatch_logit},
          {"grad_norm", grad_norm}, {"timestamp", timestamp},   {"step_seconds", step_seconds}};
}

// ---------------------------------------------------------------------------
// Trainer

struct Trainer::Snapshot {
  std::vector<torch::Tensor> params;
  std::vector<std::optional<torch::optim::AdamParamState>> states;
  torch::Tensor rng;
};

namespace {

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, double lr, double b1, double b2) {
  return torch::optim::Adam(std::move(params), torch::optim::AdamOptions(lr).betas({b1, b2}));
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

}  // namespace

Trainer::Trainer(TrainConfig config, std::shared_ptr<const Backbone> backbone)
    : config_(std::move(config)),
      backbone_(std::move(backbone)),
      noise_gen_(at::make_generator<at::CPUGeneratorImpl>(config_.seed)) {
  config_.validate();
  generator_ = MateGenerator(config_.generator, backbone_->config(), config_.seed * 2 + 1);
  discriminator_ = MateDiscriminator(config_.discriminator, backbone_->config(), config_.seed * 2 + 2);
  const auto dtype = config_.double_precision ? torch::kDouble : torch::kFloat;
  generator_->to(dtype);
  discriminator_->to(dtype);
  opt_g_ = std::make_unique<torch::optim::Adam>(
      make_adam(generator_->parameters(), config_.lr_generator, config_.adam_beta1, config_.adam_beta2));
  opt_d_ = std::make_unique<torch::optim::Adam>(
      make_adam(discriminator_->parameters(), config_.lr_discriminator, config_.adam_beta1, config_.adam_beta2));
}

torch::Tensor Trainer::sample_noise(int64_t count) {
  const auto dtype = config_.double_precision ? torch::kDouble : torch::kFloat;
  return torch::randn({count, config_.generator.noise_dim}, noise_gen_, torch::TensorOptions().dtype(dtype));
}

Trainer::Snapshot Trainer::snapshot_discriminator() const {
  Snapshot snap;
  for (const auto& p : discriminator_->parameters()) {
    snap.params.push_back(p.detach().clone());
    auto it = opt_d_->state().find(p.unsafeGetTensorImpl());
    if (it == opt_d_->state().end()) {
      snap.states.emplace_back(std::nullopt);
    } else {
      const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
      torch::optim::AdamParamState copy;
      copy.step(s.step());
      copy.exp_avg(s.exp_avg().clone());
      copy.exp_avg_sq(s.exp_avg_sq().clone());
      snap.states.emplace_back(std::move(copy));
    }
  }
  snap.rng = noise_gen_.get_state();
  return snap;
}

void Trainer::restore_discriminator(const Snapshot& snap) {
  torch::NoGradGuard no_grad;
  auto params = discriminator_->parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    params[i].copy_(snap.params[i]);
    auto key = params[i].unsafeGetTensorImpl();
    if (snap.states[i]) {
      auto s = std::make_unique<torch::optim::AdamParamState>();
      s->step(snap.states[i]->step());
      s->exp_avg(snap.states[i]->exp_avg().clone());
      s->exp_avg_sq(snap.states[i]->exp_avg_sq().clone());
      opt_d_->state()[key] = std::move(s);
    } else {
      opt_d_->state().erase(key);
    }
  }
  noise_gen_.set_state(snap.rng);
}

StepMetrics Trainer::train_step(const torch::Tensor& images_in, const torch::Tensor& texts_in) {
  const auto t0 = now_seconds();
  const auto dtype = config_.double_precision ? torch::kDouble : torch::kFloat;
  const auto B = images_in.size(0);
  if (texts_in.size(0) != B) throw InvalidArgument("train_step: image and text batch sizes differ");
  const auto images = images_in.to(dtype);
  const auto texts = texts_in.detach().to(dtype);
  const auto mismatched = make_mismatch(texts);
  const auto& backbone = *backbone_;
  const auto snap = snapshot_discriminator();

  StepMetrics m;
  m.step = step_ + 1;

  // Discriminator: hinge over real / fake / mismatched pairs plus MAGP on
  // the real pairs. The real pyramid and text are leaves so the penalty
  // differentiates the logit with respect to them.
  auto noise = sample_noise(B);
  auto fake = generator_->generate(noise, texts, backbone);

  FeaturePyramid real_pyr;
  FeaturePyramid fake_pyr;
  {
    torch::NoGradGuard no_grad;
    real_pyr = discriminator_->collect(images, backbone);
    fake_pyr = discriminator_->collect(fake.detach(), backbone);
  }
  for (auto& level : real_pyr.levels) level.requires_grad_(true);
  auto text_leaf = texts.clone().requires_grad_(true);

  auto real_logits = discriminator_->logits(real_pyr, text_leaf);
  auto mis_logits = discriminator_->logits(real_pyr.detached(), mismatched);
  auto fake_logits = discriminator_->logits(fake_pyr, texts);
  auto hinge = hinge_d_loss({real_logits, fake_logits, mis_logits});
  auto penalty = magp_from_logits(real_logits, real_pyr, text_leaf, config_.objective);
  auto loss_d = hinge + penalty.penalty;

  if (!std::isfinite(hinge.item<double>())) {
    restore_discriminator(snap);
    throw NonFiniteLoss("hinge");
  }
  if (!std::isfinite(penalty.penalty.item<double>())) {
    restore_discriminator(snap);
    throw NonFiniteLoss("magp");
  }
  opt_d_->zero_grad();
  loss_d.backward();
  opt_d_->step();

  m.hinge = hinge.item<double>();
  m.magp = penalty.penalty.item<double>();
  m.loss_d = loss_d.item<double>();
  m.real_logit = real_logits.mean().item<double>();
  m.fake_logit = fake_logits.mean().item<double>();
  m.mismatch_logit = mis_logits.mean().item<double>();
  m.grad_norm = penalty.grad_norm.item<double>();

  // Generator: adversarial term through the updated discriminator and the
  // frozen backbone, plus the similarity reward.
  set_requires_grad(*discriminator_, false);
  torch::Tensor loss_g;
  torch::Tensor similarity;
  try {
    auto logits = discriminator_->discriminate(fake, texts, backbone);
    similarity = clip_similarity(fake, texts, backbone);
    loss_g = generator_loss(logits, similarity, config_.objective);
  } catch (...) {
    set_requires_grad(*discriminator_, true);
    restore_discriminator(snap);
    throw;
  }
  set_requires_grad(*discriminator_, true);
  if (!std::isfinite(loss_g.item<double>())) {
    restore_discriminator(snap);
    throw NonFiniteLoss(std::isfinite(similarity.item<double>()) ? "generator adversarial" : "similarity");
  }
  opt_g_->zero_grad();
  loss_g.backward();
  opt_g_->step();

  m.loss_g = loss_g.item<double>();
  m.similarity = similarity.item<double>();
  ++d_updates_;
  ++g_updates_;
  ++step_;
  m.timestamp = now_seconds();
  m.step_seconds = m.timestamp - t0;
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kFormat = "galip-checkpoint-v1";

void put_optimizer(safetensors::TensorFile& file, const std::string& prefix, const torch::nn::Module& module,
                   const torch::optim::Adam& opt) {
  for (auto& item : module.named_parameters()) {
    auto it = opt.state().find(item.value().unsafeGetTensorImpl());
    if (it == opt.state().end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    file.tensors[prefix + item.key() + ".exp_avg"] = s.exp_avg();
    file.tensors[prefix + item.key() + ".exp_avg_sq"] = s.exp_avg_sq();
    file.tensors[prefix + item.key() + ".step"] = torch::tensor({s.step()}, torch::kLong);
  }
}

const torch::Tensor& require(const safetensors::TensorFile& file, const std::string& key) {
  auto it = file.tensors.find(key);
  if (it == file.tensors.end()) throw MissingKey(key, "not present in checkpoint");
  return it->second;
}

const std::string& require_meta(const safetensors::TensorFile& file, const std::string& key) {
  auto it = file.metadata.find(key);
  if (it == file.metadata.end()) throw MissingKey(key, "not present in checkpoint metadata");
  return it->second;
}

void load_parameters(const safetensors::TensorFile& file, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& item : module.named_parameters()) {
    const auto key = prefix + item.key();
    const auto& t = require(file, key);
    if (t.sizes() != item.value().sizes()) throw ShapeMismatch(key, "checkpoint tensor has a different shape");
    item.value().copy_(t.to(item.value().scalar_type()));
  }
}

void load_optimizer(const safetensors::TensorFile& file, const std::string& prefix, torch::nn::Module& module,
                    torch::optim::Adam& opt, bool expect_state) {
  for (auto& item : module.named_parameters()) {
    const auto base = prefix + item.key();
    auto key = item.value().unsafeGetTensorImpl();
    if (!expect_state && file.tensors.find(base + ".step") == file.tensors.end()) {
      opt.state().erase(key);
      continue;
    }
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(require(file, base + ".step").item<int64_t>());
    s->exp_avg(require(file, base + ".exp_avg").to(item.value().scalar_type()).clone());
    s->exp_avg_sq(require(file, base + ".exp_avg_sq").to(item.value().scalar_type()).clone());
    opt.state()[key] = std::move(s);
  }
}

}  // namespace

void Trainer::save_checkpoint(const fs::path& path, const std::map<std::string, std::string>& extra) const {
  safetensors::TensorFile file;
  for (const auto& item : generator_->named_parameters()) file.tensors["generator." + item.key()] = item.value();
  for (const auto& item : discriminator_->named_parameters())
    file.tensors["discriminator." + item.key()] = item.value();
  put_optimizer(file, "optim_g.", *generator_, *opt_g_);
  put_optimizer(file, "optim_d.", *discriminator_, *opt_d_);
  file.tensors["rng.noise"] = noise_gen_.get_state();
  file.metadata = extra;
  file.metadata["format"] = kFormat;
  file.metadata["train_config"] = json(config_).dump();
  file.metadata["generator_config"] = json(config_.generator).dump();
  file.metadata["discriminator_config"] = json(config_.discriminator).dump();
  file.metadata["backbone_id"] = backbone_->source_id();
  file.metadata["step"] = std::to_string(step_);
  file.metadata["d_updates"] = std::to_string(d_updates_);
  file.metadata["g_updates"] = std::to_string(g_updates_);
  safetensors::save(path, file);
}

std::map<std::string, std::string> Trainer::load_checkpoint(const fs::path& path) {
  const auto file = safetensors::load(path);
  if (require_meta(file, "format") != kFormat) throw InvalidArgument("not a training checkpoint: " + path.string());
  const auto stored = json::parse(require_meta(file, "train_config")).get<TrainConfig>();
  if (json(stored.generator) != json(config_.generator) || json(stored.discriminator) != json(config_.discriminator) ||
      json(stored.backbone) != json(config_.backbone))
    throw InvalidArgument("checkpoint architecture differs from the trainer configuration");

  const auto step = std::stoll(require_meta(file, "step"));
  load_parameters(file, "generator.", *generator_);
  load_parameters(file, "discriminator.", *discriminator_);
  load_optimizer(file, "optim_g.", *generator_, *opt_g_, step > 0);
  load_optimizer(file, "optim_d.", *discriminator_, *opt_d_, step > 0);
  noise_gen_.set_state(require(file, "rng.noise"));
  step_ = step;
  d_updates_ = std::stoll(require_meta(file, "d_updates"));
  g_updates_ = std::stoll(require_meta(file, "g_updates"));
  return file.metadata;
}

std::shared_ptr<Backbone> make_backbone(const TrainConfig& config) {
  auto backbone = std::make_shared<Backbone>(load_backbone(config.backbone_source, config.backbone, config.backbone_seed));
  backbone->to(config.double_precision ? torch::kDouble : torch::kFloat);
  return backbone;
}

torch::Tensor encode_captions(const Backbone& backbone, const torch::Tensor& ids, const torch::Tensor& lengths) {
  torch::NoGradGuard no_grad;
  return backbone.encode_text(ids, lengths);
}

GeneratorBundle load_generator_bundle(const fs::path& checkpoint) {
  const auto file = safetensors::load(checkpoint);
  GeneratorBundle bundle;
  bundle.config = json::parse(require_meta(file, "train_config")).get<TrainConfig>();
  bundle.step = std::stoll(require_meta(file, "step"));
  bundle.backbone = make_backbone(bundle.config);
  bundle.tokenizer = make_tokenizer(bundle.config);
  bundle.generator = MateGenerator(bundle.config.generator, bundle.config.backbone, 0);
  bundle.generator->to(bundle.config.double_precision ? torch::kDouble : torch::kFloat);
  load_parameters(file, "generator.", *bundle.generator);
  bundle.generator->eval();
  for (auto& p : bundle.generator->parameters()) p.set_requires_grad(false);
  bundle.checkpoint_id = checkpoint.filename().string() + "@" + std::to_string(bundle.step);
  return bundle;
}

// ---------------------------------------------------------------------------
// Run loop

void run_training(const TrainConfig& config, const RunOptions& options) {
  config.validate();
  fs::create_directories(options.out_dir / "checkpoints");
  {
    std::ofstream snap(options.out_dir / "config.txt", std::ios::trunc);
    snap << format_config(config);
  }
  const auto manifest = data::load_manifest(options.manifest);
  auto backbone = make_backbone(config);
  auto tokenizer = make_tokenizer(config);
  Trainer trainer(config, backbone);
  data::BatchIterator batches(manifest, config.train_split, config.batch_size, config.seed, *tokenizer,
                              config.backbone.image_size);
  if (options.resume) {
    const auto meta = trainer.load_checkpoint(*options.resume);
    if (auto it = meta.find("data_state"); it != meta.end()) batches.restore(it->second);
  }

  std::ofstream metrics(options.out_dir / "metrics.jsonl", std::ios::app);
  auto save = [&] {
    char name[64];
    std::snprintf(name, sizeof(name), "step_%08lld.safetensors", static_cast<long long>(trainer.step()));
    trainer.save_checkpoint(options.out_dir / "checkpoints" / name, {{"data_state", batches.state()}});
  };
  while (trainer.step() < config.max_steps) {
    auto batch = batches.next();
    auto texts = encode_captions(*backbone, batch.token_ids, batch.token_lengths);
    const auto m = trainer.train_step(batch.images, texts);
    metrics << m.to_json().dump() << "\n" << std::flush;
    if (options.on_step) options.on_step(m);
    if (config.checkpoint_every > 0 && trainer.step() % config.checkpoint_every == 0) save();
  }
  if (config.checkpoint_every == 0 || trainer.step() % config.checkpoint_every != 0) save();
}

}  // namespace galip
