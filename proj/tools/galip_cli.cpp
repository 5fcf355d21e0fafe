#include <csignal>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "galip/data.hpp"
#include "galip/eval_run.hpp"
#include "galip/image_io.hpp"
#include "galip/serving.hpp"
#include "galip/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

galip::serving::HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int run_train(const std::string& config_path, const std::string& data, const std::string& out,
              const std::string& resume, int64_t max_steps, bool quiet) {
  auto config = galip::load_config(config_path);
  if (max_steps >= 0) config.max_steps = max_steps;
  galip::RunOptions opts;
  opts.manifest = data;
  opts.out_dir = out;
  if (!resume.empty()) opts.resume = fs::path(resume);
  if (!quiet) {
    opts.on_step = [](const galip::StepMetrics& m) {
      if (m.step % 50 == 0 || m.step == 1)
        std::fprintf(stderr, "step %lld  L_D %.4f  MAGP %.4f  L_G %.4f  sim %.4f  (%.2fs)\n",
                     static_cast<long long>(m.step), m.loss_d, m.magp, m.loss_g, m.similarity, m.step_seconds);
    };
  }
  galip::run_training(config, opts);
  return 0;
}

int run_generate(const std::string& ckpt, const std::string& prompt, uint64_t seed, int64_t n, const std::string& out) {
  auto service = galip::serving::GenerationService::from_checkpoint(ckpt);
  const auto response = service->handle_generate({{"prompt", prompt}, {"seed", seed}, {"count", n}});
  fs::create_directories(out);
  const auto& images = response.at("images");
  for (size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "image_%02zu.png", i);
    const auto bytes = galip::base64_decode(images[i].get<std::string>());
    std::ofstream file(fs::path(out) / name, std::ios::binary);
    file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  json summary = response;
  summary.erase("images");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_grid(const std::string& ckpt, const std::vector<std::string>& corners, int64_t rows, int64_t cols,
             uint64_t seed, bool independent_noise, const std::string& out) {
  using namespace galip::serving;
  auto service = GenerationService::from_checkpoint(ckpt);
  auto snap = service->snapshot();
  const auto dtype = snap->backbone->dtype();
  std::array<torch::Tensor, 4> e;
  for (size_t i = 0; i < 4; ++i) e[i] = service->embed_prompt(corners[i]);
  std::vector<torch::Tensor> embeddings;
  std::vector<torch::Tensor> noises;
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      const double u = static_cast<double>(c) / static_cast<double>(cols - 1);
      const double v = static_cast<double>(r) / static_cast<double>(rows - 1);
      embeddings.push_back(interp_embedding(e, u, v).unsqueeze(0));
      noises.push_back(noise_row(seed, independent_noise ? r * cols + c : 0, snap->config.generator.noise_dim, dtype));
    }
  }
  const auto images = service->render(torch::cat(embeddings, 0), torch::cat(noises, 0));
  galip::write_png(out, galip::tile_images(images, rows, cols));
  std::cout << "wrote " << out << " (" << rows << "x" << cols << ")\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, const galip::eval::EvalOptions& options,
             const std::string& out) {
  auto bundle = galip::load_generator_bundle(ckpt);
  const auto manifest = galip::data::load_manifest(data);
  const auto report = galip::eval::evaluate_checkpoint(bundle, manifest, options);
  if (!out.empty()) report.write(out);
  std::cout << report.to_json().dump(2) << "\n";
  return 0;
}

int run_convert(const std::string& format, const std::string& in, const std::string& out,
                const std::string& image_dir, const std::string& split) {
  galip::data::DatasetManifest manifest;
  if (format == "coco") {
    if (image_dir.empty()) throw galip::InvalidArgument("convert --format coco needs --images");
    manifest = galip::data::convert_coco(in, image_dir, split);
  } else if (format == "folder") {
    manifest = galip::data::convert_folder(in);
  } else {
    throw galip::InvalidArgument("unknown format '" + format + "'");
  }
  galip::data::save_manifest(out, manifest);
  std::cout << "wrote " << manifest.records.size() << " records to " << out << "\n";
  return 0;
}

int run_serve(const std::string& ckpt, const std::string& host, int port, size_t anchors) {
  using namespace galip::serving;
  std::shared_ptr<GenerationService> service;
  if (fs::exists(ckpt)) {
    service = GenerationService::from_checkpoint(ckpt, anchors);
  } else {
    std::cerr << "checkpoint not found: " << ckpt << "; generation endpoints answer 503\n";
    service = std::make_shared<GenerationService>(nullptr, anchors);
  }
  HttpServer server(service);
  const int bound = server.bind(host, port);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "listening on http://" << host << ":" << bound << "\n";
  server.listen();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GALIP text-to-image GAN: training, sampling, evaluation and serving"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a generator/discriminator pair");
  std::string config_path, data, out, resume;
  int64_t max_steps = -1;
  bool quiet = false;
  train->add_option("--config", config_path, "flat key = value config file")->required()->check(CLI::ExistingFile);
  train->add_option("--data", data, "dataset manifest (JSONL)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "run directory")->required();
  train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--max-steps", max_steps, "override max_steps");
  train->add_flag("--quiet", quiet, "no progress lines");

  auto* generate = app.add_subcommand("generate", "sample images for one prompt");
  std::string ckpt, prompt;
  uint64_t seed = 0;
  int64_t count = 1;
  generate->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  generate->add_option("--prompt", prompt)->required();
  generate->add_option("--seed", seed);
  generate->add_option("--n", count)->check(CLI::Range(int64_t{1}, galip::serving::kMaxCount));
  generate->add_option("--out", out)->required();

  auto* grid = app.add_subcommand("grid", "four-corner interpolation sheet");
  std::vector<std::string> corners;
  int64_t rows = 4, cols = 4;
  bool independent_noise = false;
  grid->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  grid->add_option("--corners", corners, "top-left, top-right, bottom-left, bottom-right prompts")
      ->required()
      ->expected(4);
  grid->add_option("--rows", rows)->check(CLI::Range(galip::serving::kMinGridSide, galip::serving::kMaxGridSide));
  grid->add_option("--cols", cols)->check(CLI::Range(galip::serving::kMinGridSide, galip::serving::kMaxGridSide));
  grid->add_option("--seed", seed);
  grid->add_flag("--independent-noise", independent_noise, "draw a separate noise vector per cell");
  grid->add_option("--out", out, "output PNG")->required();

  auto* eval = app.add_subcommand("eval", "compute fid or clipsim for a checkpoint");
  galip::eval::EvalOptions eval_opts;
  std::string report_path;
  eval->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data)->required()->check(CLI::ExistingFile);
  eval->add_option("--metric", eval_opts.metric)->required()->check(CLI::IsMember({"fid", "clipsim"}));
  eval->add_option("--split", eval_opts.split);
  eval->add_option("--samples", eval_opts.samples);
  eval->add_option("--seed", eval_opts.seed);
  eval->add_option("--out", report_path, "metric report JSON");

  auto* convert = app.add_subcommand("convert", "build a dataset manifest");
  std::string format, in, image_dir, split = "train";
  convert->add_option("--format", format)->required()->check(CLI::IsMember({"coco", "folder"}));
  convert->add_option("--in", in, "annotation file (coco) or dataset folder")->required()->check(CLI::ExistingPath);
  convert->add_option("--images", image_dir, "image directory (coco)");
  convert->add_option("--split", split, "split tag (coco)");
  convert->add_option("--out", out, "manifest path")->required();

  auto* serve = app.add_subcommand("serve", "HTTP generation service");
  std::string host = "127.0.0.1";
  int port = 8080;
  size_t anchors = 1024;
  serve->add_option("--ckpt", ckpt)->required();
  serve->add_option("--port", port);
  serve->add_option("--host", host);
  serve->add_option("--anchors", anchors, "anchor cache capacity");

  auto* toy = app.add_subcommand("toy", "write the synthetic shapes dataset");
  int64_t toy_count = 256, toy_size = 32;
  toy->add_option("--out", out)->required();
  toy->add_option("--count", toy_count);
  toy->add_option("--size", toy_size);
  toy->add_option("--seed", seed);

  auto* config_cmd = app.add_subcommand("config", "print a config preset");
  std::string preset = "full";
  config_cmd->add_option("--preset", preset)->check(CLI::IsMember({"full", "tiny"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return run_train(config_path, data, out, resume, max_steps, quiet);
    if (*generate) return run_generate(ckpt, prompt, seed, count, out);
    if (*grid) return run_grid(ckpt, corners, rows, cols, seed, independent_noise, out);
    if (*eval) return run_eval(ckpt, data, eval_opts, report_path);
    if (*convert) return run_convert(format, in, out, image_dir, split);
    if (*serve) return run_serve(ckpt, host, port, anchors);
    if (*toy) {
      const auto manifest = galip::data::make_toy_dataset(out, toy_count, toy_size, seed);
      std::cout << "wrote " << manifest.records.size() << " images to " << out << "\n";
      return 0;
    }
    if (*config_cmd) {
      auto cfg = preset == "tiny" ? galip::TrainConfig::tiny() : galip::TrainConfig::full();
      std::cout << "preset = " << preset << "\n" << galip::format_config(cfg);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
