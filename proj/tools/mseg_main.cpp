#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "mseg/analyzer.hpp"
#include "mseg/gradcheck.hpp"
#include "mseg/image_io.hpp"
#include "mseg/toy_train.hpp"

namespace fs = std::filesystem;
using namespace mseg;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

void echo_config(const CLI::App& sub) {
  std::cout << "# mseg " << sub.get_name() << "\n";
  std::istringstream lines(sub.config_to_str(true, false));
  for (std::string line; std::getline(lines, line);) {
    if (!line.empty()) std::cout << "#   " << line << "\n";
  }
}

std::vector<std::pair<std::string, fs::path>> list_images(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
  std::vector<std::pair<std::string, fs::path>> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.emplace_back(e.path().stem().string(), e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

Tensor4f prob_from_image(const ImageBuffer& img) {
  Tensor4f t(1, 1, img.height, img.width);
  for (Index y = 0; y < img.height; ++y) {
    for (Index x = 0; x < img.width; ++x) t(0, 0, y, x) = static_cast<float>(img.at(y, x, 0)) / 255.0f;
  }
  return t;
}

InferenceModel load_inference(const std::string& weights, const std::string& preset_name) {
  const WeightStore store = load_weights(weights);
  const ModelCfg cfg = preset_name.empty() ? detect_preset(store) : load_model_cfg(preset_name);
  return prepare_inference(build_mseg(cfg), store);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Polyp segmentation engine: HarDNet-68 encoder, RFB and dense aggregation decoder"};
  app.require_subcommand(1);

  std::string preset_name = "hardnet68-mseg";
  std::string weights_path;
  std::string json_path;
  std::string in_path;
  std::string out_path;
  std::string pred_dir;
  std::string gt_dir;
  Index size = 352;
  double thresh = 0.5;
  int warmup = 3;
  int iters = 20;
  int threads = 1;
  std::uint64_t seed = 0;
  std::string policy = "adam";
  std::string scale = "tiny";
  Index samples = 500;
  Index epochs = 30;
  Index batch = 4;
  double lr = -1;
  double clip = 0.5;

  auto* summary = app.add_subcommand("summary", "Per-layer params, MACs and memory traffic");
  summary->add_option("--preset", preset_name, "Shipped preset name or preset file")->capture_default_str();
  summary->add_option("--size", size, "Square input size")->capture_default_str();
  summary->add_option("--json", json_path, "Also write the summary as JSON");

  auto* infer = app.add_subcommand("infer", "Segment one image");
  infer->add_option("--weights", weights_path, "MSEG-W1 weight file")->required();
  infer->add_option("--in", in_path, "Input image (binary PPM)")->required();
  infer->add_option("--out", out_path, "Output mask (binary PGM, 0/255)")->required();
  infer->add_option("--size", size, "Network input size")->capture_default_str();
  infer->add_option("--thresh", thresh, "Binarization threshold")->capture_default_str();
  infer->add_option("--preset", preset_name, "Preset (detected from the weights when omitted)");

  auto* eval = app.add_subcommand("eval", "Score predicted masks against ground truth");
  eval->add_option("--pred", pred_dir, "Directory of predicted masks (PGM probability or binary)")->required();
  eval->add_option("--gt", gt_dir, "Directory of ground-truth masks (PGM)")->required();
  eval->add_option("--thresh", thresh, "Binarization threshold")->capture_default_str();
  eval->add_option("--json", json_path, "JSON report path (printed to stdout when omitted)");

  auto* bench_cmd = app.add_subcommand("bench", "Forward-pass latency and throughput");
  bench_cmd->add_option("--weights", weights_path, "MSEG-W1 weight file (random weights for --preset when omitted)");
  bench_cmd->add_option("--preset", preset_name, "Preset used without --weights")->capture_default_str();
  bench_cmd->add_option("--size", size, "Square input size")->capture_default_str();
  bench_cmd->add_option("--warmup", warmup, "Warmup iterations")->capture_default_str();
  bench_cmd->add_option("--iters", iters, "Measured iterations (>= 10)")->capture_default_str();
  bench_cmd->add_option("--threads", threads, "Intra-op threads")->capture_default_str();
  bench_cmd->add_option("--seed", seed, "Seed of the random input")->capture_default_str();
  bench_cmd->add_option("--json", json_path, "Also write the report as JSON");

  auto* grad = app.add_subcommand("gradcheck", "Autodiff versus finite differences, per op kind");
  grad->add_option("--seed", seed, "Random seed")->capture_default_str();
  grad->add_option("--json", json_path, "Also write results as JSON");

  auto* train = app.add_subcommand("train-toy", "Train on synthetic blobs");
  train->add_option("--policy", policy, "sgd (lr 1e-2, flips) or adam (lr 1e-4)")->capture_default_str();
  train->add_option("--scale", scale, "Model preset: tiny or small")->capture_default_str();
  train->add_option("--samples", samples, "Dataset size (80/20 split)")->capture_default_str();
  train->add_option("--epochs", epochs, "Epochs")->capture_default_str();
  train->add_option("--seed", seed, "Seed for data and weights")->capture_default_str();
  train->add_option("--size", size, "Image size")->capture_default_str();
  train->add_option("--batch", batch, "Batch size")->capture_default_str();
  train->add_option("--lr", lr, "Learning rate override");
  train->add_option("--clip", clip, "Gradient clamp per element, 0 to disable")->capture_default_str();
  train->add_option("--thresh", thresh, "Binarization threshold")->capture_default_str();
  train->add_option("--out", out_path, "Trained MSEG-W1 weight file")->required();
  train->add_option("--json", json_path, "Also write curves and report as JSON");
  // Sizes other than the CLI default are common for toy runs.
  train->callback([&] {
    if (train->count("--size") == 0) size = 96;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (summary->parsed()) {
      echo_config(*summary);
      const ModelCfg cfg = load_model_cfg(preset_name);
      const Model model = build_mseg(cfg);
      const Summary s = summarize(model.graph, Shape4{1, 3, size, size});
      std::cout << format_table(s);
      write_json(json_path, to_json(s));
    } else if (infer->parsed()) {
      echo_config(*infer);
      const InferenceModel model = load_inference(weights_path, infer->count("--preset") ? preset_name : "");
      const ImageBuffer img = load_image(in_path);
      const Tensor4f x = preprocess(img, size, size);
      Tensor4f prob = forward_mseg(model.graph, model.weights, x);
      if (prob.h() != img.height || prob.w() != img.width) prob = upsample_bilinear(prob, img.height, img.width, false);
      const Tensor4f mask = binarize(prob, thresh);
      const auto bytes = write_mask(mask);
      std::ofstream out(out_path, std::ios::binary);
      if (!out) throw IoError("cannot write '" + out_path + "'");
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      std::printf("preset %s, mask %lldx%lld, prob min %.4f mean %.4f max %.4f, foreground %.4f\n",
                  model.cfg.name.c_str(), static_cast<long long>(img.width), static_cast<long long>(img.height),
                  prob.array().minCoeff(), prob.array().mean(), prob.array().maxCoeff(), mask.array().mean());
    } else if (eval->parsed()) {
      echo_config(*eval);
      std::vector<std::pair<std::string, Tensor4f>> preds;
      std::vector<std::pair<std::string, Tensor4f>> gts;
      for (const auto& [id, path] : list_images(pred_dir)) preds.emplace_back(id, prob_from_image(load_image(path)));
      for (const auto& [id, path] : list_images(gt_dir)) gts.emplace_back(id, mask_from_image(load_image(path)));
      const MetricReport report = evaluate_dataset(preds, gts, thresh);
      std::cout << format_table(report);
      if (json_path.empty()) {
        std::cout << to_json(report).dump(2) << "\n";
      } else {
        write_json(json_path, to_json(report));
      }
    } else if (bench_cmd->parsed()) {
      echo_config(*bench_cmd);
      InferenceModel model;
      if (weights_path.empty()) {
        const Model m = build_mseg(load_model_cfg(preset_name));
        model = prepare_inference(m, init_weights(m.graph, seed));
      } else {
        model = load_inference(weights_path, bench_cmd->count("--preset") ? preset_name : "");
      }
      std::cout << "model      " << model.cfg.name << "\n";
      const BenchReport r = bench(model, size, warmup, iters, threads, seed);
      std::cout << format_table(r);
      write_json(json_path, to_json(r));
    } else if (grad->parsed()) {
      echo_config(*grad);
      const auto results = run_gradchecks(seed);
      std::cout << format_table(results);
      write_json(json_path, to_json(results));
      const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
      if (!ok) {
        std::cerr << "error: gradcheck failed\n";
        return kNumeric;
      }
    } else if (train->parsed()) {
      echo_config(*train);
      TrainCfg cfg;
      cfg.policy = parse_policy(policy);
      cfg.scale = scale;
      cfg.epochs = epochs;
      cfg.batch_size = batch;
      cfg.seed = seed;
      cfg.learning_rate = lr;
      cfg.grad_clip = clip;
      cfg.threshold = thresh;
      std::printf("# dataset seed %llu, %lld samples of %lldx%lld, lr %g\n", static_cast<unsigned long long>(seed),
                  static_cast<long long>(samples), static_cast<long long>(size), static_cast<long long>(size),
                  cfg.resolved_lr());
      const BlobDataset data = gen_blobs(seed, samples, size);
      const TrainResult r = train_toy(cfg, data, [](const EpochLog& log) {
        std::printf("epoch %4lld  loss %.6f  %.1fs\n", static_cast<long long>(log.epoch), log.train_loss, log.seconds);
        std::fflush(stdout);
      });
      save_weights(r.weights, out_path);
      std::cout << format_table(r.held_out);
      nlohmann::ordered_json j;
      j["policy"] = std::string(to_string(cfg.policy));
      j["scale"] = scale;
      j["samples"] = samples;
      j["train_samples"] = r.train_count;
      j["size"] = size;
      j["batch"] = batch;
      j["learning_rate"] = cfg.resolved_lr();
      j["grad_clip"] = clip;
      j["seed"] = seed;
      j["dataset_hash"] = data.hash();
      j["steps"] = r.steps;
      nlohmann::ordered_json curve = nlohmann::ordered_json::array();
      for (const auto& e : r.epochs) curve.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}});
      j["curve"] = std::move(curve);
      j["held_out"] = to_json(r.held_out);
      write_json(json_path, j);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
