// urwkv: data generation, training, evaluation, prediction, ablation,
// kernel benchmarking and gradient checking for the segmentation model.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "urwkv/urwkv.hpp"

namespace fs = std::filesystem;
using namespace urwkv;

namespace {

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::trunc);
  check(static_cast<bool>(f), ErrorKind::io, "cannot write " + p.string());
  return f;
}

struct RunArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string variant;
  long long seed = -1, epochs = -1, batch_size = -1, patience = -1, threads = -1, freeze = -1;
};

void add_run_options(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("--config", a.config_path, "key = value config file");
  cmd->add_option("--override", a.overrides, "key=value, repeatable; applied after --config");
  cmd->add_option("--variant", a.variant, "base or dagger");
  cmd->add_option("--seed", a.seed, "RNG seed");
  cmd->add_option("--epochs", a.epochs, "maximum epochs");
  cmd->add_option("--batch-size", a.batch_size, "batch size");
  cmd->add_option("--patience", a.patience, "early-stop patience in epochs");
  cmd->add_option("--freeze-epochs", a.freeze, "epochs with the encoder frozen");
  cmd->add_option("--threads", a.threads, "worker threads (0: default)");
}

RunConfig resolve(const RunArgs& a) {
  RunConfig rc = a.config_path.empty() ? RunConfig{} : load_run_config(a.config_path);
  for (const auto& kv : a.overrides) apply_override(rc, kv);
  if (!a.variant.empty()) apply_override(rc, "variant=" + a.variant);
  if (a.seed >= 0) rc.train.seed = static_cast<std::uint64_t>(a.seed);
  if (a.epochs >= 0) rc.train.epochs = static_cast<std::size_t>(a.epochs);
  if (a.batch_size >= 0) rc.train.batch_size = static_cast<std::size_t>(a.batch_size);
  if (a.patience >= 0) rc.train.patience = static_cast<std::size_t>(a.patience);
  if (a.freeze >= 0) rc.train.freeze_epochs = static_cast<std::size_t>(a.freeze);
  if (a.threads >= 0) rc.train.threads = static_cast<std::size_t>(a.threads);
  validate(rc.model);
  return rc;
}

void write_report_csv(std::ostream& os, const MetricReport& r) {
  os << "class,dsc,iou\n";
  for (std::size_t c = 0; c < r.dsc.size(); ++c) os << c << ',' << fmt(r.dsc[c]) << ',' << fmt(r.iou[c]) << '\n';
  os << "mean," << fmt(r.mean_dsc) << ',' << fmt(r.mean_iou) << '\n';
}

int cmd_gen_data(const std::string& out, std::size_t count, std::size_t size, std::uint64_t seed, double noise,
                 bool no_hair) {
  SynthOptions opt;
  opt.noise_sigma = noise;
  opt.hair = !no_hair;
  const auto samples = gen_synthetic(count, size, size, seed, opt);
  write_dataset(out, samples);
  const std::size_t n_train = (count * 8 + 9) / 10;
  if (count == 0) std::cerr << "warning: count is 0, wrote an empty manifest\n";
  std::cout << "wrote " << count << " pairs to " << out << " (train " << n_train << ", test " << count - n_train
            << ")\n";
  return 0;
}

int cmd_train(const RunArgs& a, const std::string& data, const std::string& out) {
  const RunConfig rc = resolve(a);
  const Dataset ds = load_dataset(data, rc.model.image_size);
  check(!ds.train.empty(), ErrorKind::not_found, "dataset " + data + " has no training samples");
  fs::create_directories(out);
  open_out(fs::path(out) / "config.txt") << to_text(rc);
  Model model(rc.model, rc.train.seed);
  std::ofstream log = open_out(fs::path(out) / "train_log.csv");
  log << "epoch,loss,dsc,iou\n";
  TrainHooks hooks;
  hooks.checkpoint_path = (fs::path(out) / "best.ckpt").string();
  hooks.on_epoch = [&](const EpochLog& e) {
    log << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.dsc) << ',' << fmt(e.iou) << '\n' << std::flush;
    std::cout << "epoch " << e.epoch << " loss " << e.loss << " dsc " << e.dsc << " iou " << e.iou << std::endl;
  };
  const TrainResult r = train(model, ds, rc.train, hooks);
  std::cout << "best epoch " << r.best_epoch << " dsc " << fmt(r.best_dsc) << " iou " << fmt(r.best_iou)
            << (r.early_stopped ? " (early stop)" : "") << "\n";
  return 0;
}

std::vector<Sample> pick_split(const Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "test") return ds.test;
  check(split == "all", ErrorKind::invalid_argument, "split must be train, test or all");
  std::vector<Sample> all = ds.train;
  all.insert(all.end(), ds.test.begin(), ds.test.end());
  return all;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split, const std::string& out) {
  const LoadedModel lm = load_checkpoint(ckpt);
  const Dataset ds = load_dataset(data, lm.model.config().image_size);
  const MetricReport r = evaluate(lm.model, pick_split(ds, split));
  std::cout << "samples " << r.samples << " mean_dsc " << fmt(r.mean_dsc) << " mean_iou " << fmt(r.mean_iou) << "\n";
  for (std::size_t c = 0; c < r.dsc.size(); ++c)
    std::cout << "class " << c << " dsc " << fmt(r.dsc[c]) << " iou " << fmt(r.iou[c]) << "\n";
  if (!out.empty()) {
    std::ofstream f = open_out(out);
    write_report_csv(f, r);
  }
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& input, const std::string& out, bool probs) {
  const LoadedModel lm = load_checkpoint(ckpt);
  const ModelConfig& cfg = lm.model.config();
  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input)) {
      const std::string ext = e.path().extension().string();
      if (ext == ".png" || ext == ".pgm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    check(fs::exists(input), ErrorKind::not_found, "input not found: " + input);
    files.push_back(input);
  }
  fs::create_directories(out);
  const std::size_t n = cfg.classes;
  for (const fs::path& f : files) {
    const Image8 img = read_image(f.string());
    Sample s;
    s.image = Tensor({3, img.height, img.width});
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          s.image.at(c, y, x) = img.pixels[(y * img.width + x) * img.channels + (img.channels == 3 ? c : 0)] / 255.0;
    s.mask = Mask{img.height, img.width, std::vector<std::uint8_t>(img.height * img.width)};
    const Tensor resized = data_detail::resize_bilinear(s.image, cfg.image_size, cfg.image_size);
    const Tensor logits = lm.model.predict(resized.reshaped({1, 3, cfg.image_size, cfg.image_size}));
    Mask pred{cfg.image_size, cfg.image_size, argmax_labels(logits)};
    pred = data_detail::resize_nearest(pred, img.height, img.width);
    Image8 mask{img.width, img.height, 1, std::vector<std::uint8_t>(img.width * img.height)};
    for (std::size_t i = 0; i < mask.pixels.size(); ++i)
      mask.pixels[i] = static_cast<std::uint8_t>(pred.labels[i] * 255 / (n - 1));
    const std::string stem = f.stem().string();
    write_image((fs::path(out) / (stem + "_mask.png")).string(), mask);
    if (probs) {
      const std::size_t S = cfg.image_size, HW = S * S;
      for (std::size_t c = 0; c < n; ++c) {
        Tensor p({1, S, S});
        for (std::size_t x = 0; x < HW; ++x) {
          double m = logits[x], z = 0;
          for (std::size_t k = 1; k < n; ++k) m = std::max(m, logits[k * HW + x]);
          for (std::size_t k = 0; k < n; ++k) z += std::exp(logits[k * HW + x] - m);
          p[x] = std::exp(logits[c * HW + x] - m) / z;
        }
        const Image8 pi = to_image8(data_detail::resize_bilinear(p, img.height, img.width));
        write_image((fs::path(out) / (stem + "_prob_c" + std::to_string(c) + ".png")).string(), pi);
      }
    }
  }
  std::cout << "predicted " << files.size() << " image(s) into " << out << "\n";
  return 0;
}

int cmd_ablate(const RunArgs& a, const std::string& data, const std::string& out) {
  const RunConfig rc = resolve(a);
  const Dataset ds = load_dataset(data, rc.model.image_size);
  check(!ds.train.empty(), ErrorKind::not_found, "dataset " + data + " has no training samples");
  fs::create_directories(out);
  open_out(fs::path(out) / "config.txt") << to_text(rc);
  const auto rows = ablate(rc.model, ds, rc.train, [](const AblationRow& r) {
    std::cout << r.name << " dsc " << fmt(r.result.best_dsc) << " iou " << fmt(r.result.best_iou) << std::endl;
  });
  std::ofstream csv = open_out(fs::path(out) / "ablation.csv");
  std::ofstream md = open_out(fs::path(out) / "ablation.md");
  csv << "config,fawa,mscf,dsc,iou,best_epoch,epochs_run\n";
  md << "| Config | FAWA | MSCF | DSC | IoU |\n|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    csv << r.name << ',' << r.fawa << ',' << r.mscf << ',' << fmt(r.result.best_dsc) << ','
        << fmt(r.result.best_iou) << ',' << r.result.best_epoch << ',' << r.result.log.size() << '\n';
    char line[160];
    std::snprintf(line, sizeof line, "| %s | %s | %s | %.4f | %.4f |\n", r.name.c_str(), r.fawa ? "x" : "",
                  r.mscf ? "x" : "", r.result.best_dsc, r.result.best_iou);
    md << line;
  }
  std::cout << "wrote " << (fs::path(out) / "ablation.csv").string() << "\n";
  return 0;
}

int cmd_bench(const std::vector<std::size_t>& Ts, std::size_t C, std::size_t reps, std::uint64_t seed,
              const std::string& out) {
  const auto rows = wkv::bench(Ts, C, reps, seed);
  if (out.empty()) {
    wkv::write_bench_csv(std::cout, rows);
  } else {
    std::ofstream f = open_out(out);
    wkv::write_bench_csv(f, rows);
  }
  if (Ts.size() >= 2) {
    std::cerr << "loglog_slope naive " << wkv::loglog_slope(rows, wkv::Form::naive) << "\n";
    std::cerr << "loglog_slope scan " << wkv::loglog_slope(rows, wkv::Form::scan) << "\n";
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  bool ok = true;
  for (const auto& c : gradcheck_cases()) {
    const GradCheckReport r = c.run(seed);
    std::printf("%-26s %s max_rel %.3e (tol %.0e, %zu elements, worst %s)\n", r.name.c_str(),
                r.passed() ? "PASS" : "FAIL", r.max_rel_error, r.tolerance, r.elements, r.worst.c_str());
    ok = ok && r.passed();
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"urwkv: wavelet-enhanced RWKV U-Net segmentation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "write a synthetic image/mask dataset");
  std::string gen_out;
  std::size_t count = 250, size = 64;
  std::uint64_t gen_seed = 0;
  double noise = 0.05;
  bool no_hair = false;
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_option("--count", count, "number of pairs");
  gen->add_option("--size", size, "image side (multiple of 32)");
  gen->add_option("--seed", gen_seed, "RNG seed");
  gen->add_option("--noise", noise, "Gaussian noise sigma");
  gen->add_flag("--no-hair", no_hair, "omit hair-like arcs");

  RunArgs train_args, ablate_args;
  std::string data, out;
  auto* tr = app.add_subcommand("train", "train a model and write the log and best checkpoint");
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--out", out, "output directory")->required();
  add_run_options(tr, train_args);

  std::string ckpt, split = "test", eval_out;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  ev->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--split", split, "train, test or all");
  ev->add_option("--out", eval_out, "metrics CSV");

  std::string input;
  bool probs = false;
  auto* pr = app.add_subcommand("predict", "write argmax masks for images");
  pr->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  pr->add_option("--input", input, "image file or directory")->required();
  pr->add_option("--out", out, "output directory")->required();
  pr->add_flag("--probs", probs, "also write per-class probability images");

  auto* ab = app.add_subcommand("ablate", "train the FAWA/MSCF 2x2 grid");
  ab->add_option("--data", data, "dataset directory")->required();
  ab->add_option("--out", out, "output directory")->required();
  add_run_options(ab, ablate_args);

  std::vector<std::size_t> Ts{256, 512, 1024, 2048, 4096};
  std::size_t C = 32, reps = 3;
  std::uint64_t bench_seed = 0;
  std::string bench_out;
  auto* bw = app.add_subcommand("bench-wkv", "time the naive and scan WKV forms");
  bw->add_option("--T", Ts, "ascending token counts")->delimiter(',');
  bw->add_option("--C", C, "channels");
  bw->add_option("--reps", reps, "repetitions (best is kept)");
  bw->add_option("--seed", bench_seed, "RNG seed");
  bw->add_option("--out", bench_out, "CSV path (stdout when omitted)");

  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");
  gc->add_option("--seed", gc_seed, "RNG seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_gen_data(gen_out, count, size, gen_seed, noise, no_hair);
    if (*tr) return cmd_train(train_args, data, out);
    if (*ev) return cmd_eval(ckpt, data, split, eval_out);
    if (*pr) return cmd_predict(ckpt, input, out, probs);
    if (*ab) return cmd_ablate(ablate_args, data, out);
    if (*bw) return cmd_bench(Ts, C, reps, bench_seed, bench_out);
    if (*gc) return cmd_gradcheck(gc_seed);
  } catch (const Error& e) {
    std::cerr << "error[" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
