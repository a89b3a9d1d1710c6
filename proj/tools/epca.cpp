// epca: train, evaluate, verify and explain pyramid channel attention models.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "epca/app.hpp"
#include "epca/explain.hpp"
#include "epca/verify.hpp"

namespace fs = std::filesystem;
using namespace epca;

namespace {

std::string g_command_line;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write '" + path.string() + "'");
  out << text;
}

/// Config for commands run without --config: the command line is hashed.
RunConfig config_or_args(const std::string& path) {
  if (!path.empty()) return load_run_config(path);
  RunConfig c = parse_run_config("", "<command line>");
  c.text = g_command_line;
  return c;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ArgumentError("bad seed '" + item + "' in --seeds");
    }
  }
  require(!out.empty(), "--seeds is empty");
  return out;
}

/// Architecture for a checkpoint: an explicit arch.json, the arch.json next
/// to the checkpoint, or the config.
ArchSpec arch_for(const std::string& ckpt, const std::string& arch_json, const RunConfig* cfg) {
  if (!arch_json.empty()) return arch_from_json(slurp(arch_json));
  const fs::path sidecar = fs::path(ckpt).parent_path() / "arch.json";
  if (fs::exists(sidecar)) return arch_from_json(slurp(sidecar.string()));
  if (cfg) return cfg->arch;
  throw ArgumentError("no architecture for '" + ckpt + "': pass --arch or --config, or keep arch.json next to it");
}

int cmd_train(const std::string& config, std::optional<std::uint64_t> seed, std::string out) {
  RunConfig cfg = load_run_config(config);
  const std::uint64_t s = seed.value_or(cfg.train.seed);
  if (out.empty()) out = cfg.train.out_dir.empty() ? "runs/train" : cfg.train.out_dir;
  const LoadedData data = load_data(cfg.data);
  const ArchSpec arch = resolve_arch(cfg, data.train);
  std::cout << "training " << arch.name << " + " << arch.attention.describe() << " on " << data.train.size()
            << " images, seed " << s << "\n";
  ExperimentResult r = run_experiment(cfg, data, arch, s, out);
  for (const auto& e : r.history.history) std::cout << format_history_row(e) << "\n";
  std::cout << (data.test ? "test" : "training data") << " report\n" << r.test.table();
  spill(fs::path(out) / "eval.csv", r.test.csv());
  write_manifest(out, "train", cfg, s, {"arch.json", "history.csv", "last.epck", "eval.csv"});
  return 0;
}

int cmd_eval(const std::string& config, const std::string& ckpt, const std::string& arch_json, std::string out,
             const std::string& split) {
  RunConfig cfg = load_run_config(config);
  ArchSpec arch = arch_for(ckpt, arch_json, &cfg);
  const LoadedData data = load_data(cfg.data, arch.input);
  const Dataset& d = split == "train" || !data.test ? data.train : *data.test;
  Network<float> net(arch, 0);
  load_checkpoint(net, ckpt);
  const Predictions p = predict(net, d, cfg.eval.batch_size);
  std::optional<Scores> scores;
  if (p.num_classes == 2) scores = Scores{p.probs, 2};
  const EvalReport rep = evaluate(d.labels, p.labels, scores, arch.num_classes);
  std::cout << d.split << " split, " << d.size() << " images\n" << rep.table();
  if (out.empty()) out = fs::path(ckpt).parent_path().string();
  if (out.empty()) out = ".";
  spill(fs::path(out) / "eval.csv", rep.csv());
  write_manifest(out, "eval", cfg, 0, {"eval.csv"});
  return 0;
}

int cmd_gradcheck(double tol, std::uint64_t seed, const std::string& filter, const std::string& out) {
  const SuiteResult r = run_gradcheck_suite(seed, filter, tol);
  std::cout << r.table();
  if (!out.empty()) {
    spill(fs::path(out) / "gradcheck.txt", r.table());
    write_manifest(out, "gradcheck", config_or_args(""), seed, {"gradcheck.txt"});
  }
  return r.pass ? 0 : 1;
}

int cmd_summary(const std::string& config, const std::string& preset_name, const std::string& attention,
                const std::string& sizes, const std::string& out) {
  RunConfig cfg = config_or_args(config);
  if (config.empty() || !preset_name.empty()) {
    const auto keep_input = cfg.arch.input;
    const auto keep_classes = cfg.arch.num_classes;
    const auto keep_attention = cfg.arch.attention;
    cfg.arch = preset(preset_name.empty() ? "mini-resnet20" : preset_name);
    if (config.empty() && cfg.arch.name == "mini-resnet20") cfg.arch.input = keep_input;
    if (!config.empty()) {
      cfg.arch.input = keep_input;
      cfg.arch.num_classes = keep_classes;
      cfg.arch.attention = keep_attention;
    }
  }
  if (!attention.empty()) cfg.arch.attention.kind = parse_attention_kind(attention);
  if (!sizes.empty()) cfg.arch.attention.epca.sizes = parse_sizes(sizes);
  cfg.arch.validate();
  Network<float> net(cfg.arch, 0);
  const ModelSummary s = net.summary();
  std::cout << cfg.arch.name << " + " << cfg.arch.attention.describe() << ", input " << cfg.arch.input[0] << "x"
            << cfg.arch.input[1] << "x" << cfg.arch.input[2] << "\n"
            << s.table();
  if (!out.empty()) {
    spill(fs::path(out) / "summary.txt", s.table());
    spill(fs::path(out) / "arch.json", arch_to_json(cfg.arch));
    write_manifest(out, "summary", cfg, 0, {"summary.txt", "arch.json"});
  }
  return 0;
}

int cmd_ablate(const std::string& name, const std::string& config, const std::string& sizes,
               const std::string& seeds, const std::string& out) {
  RunConfig cfg = load_run_config(config);
  const auto seed_list = parse_seeds(seeds);
  const LoadedData data = load_data(cfg.data);
  const AblationTable t =
      name == "ablate-sizes" ? ablate_sizes(cfg, data, sizes, seed_list) : ablate_fusion(cfg, data, seed_list);
  std::cout << t.table();
  const std::string file = name == "ablate-sizes" ? "ablate_sizes.csv" : "ablate_fusion.csv";
  spill(fs::path(out) / file, t.csv());
  write_manifest(out, name, cfg, seed_list.front(), {file});
  return 0;
}

int cmd_gradcam(const std::string& ckpt, const std::string& image, int klass, std::string layer,
                const std::string& config, const std::string& arch_json, const std::string& out) {
  RunConfig cfg = config_or_args(config);
  const ArchSpec arch = arch_for(ckpt, arch_json, config.empty() ? nullptr : &cfg);
  if (layer.empty()) layer = cfg.explain.layer;
  Network<float> net(arch, 0);
  load_checkpoint(net, ckpt);
  TensorF img = read_pnm(image);
  if (img.shape()[0] != arch.input[0]) img = convert_channels(img, static_cast<int>(arch.input[0]));
  if (img.shape()[1] != arch.input[1] || img.shape()[2] != arch.input[2])
    img = resize_bilinear(img, static_cast<int>(arch.input[1]), static_cast<int>(arch.input[2]));
  if (klass < 0) klass = cfg.explain.target_class;
  if (klass < 0) {
    Dataset one;
    one.images = {img};
    one.labels = {0};
    one.class_names.resize(static_cast<std::size_t>(arch.num_classes));
    klass = predict(net, one, 1).labels.front();
    std::cout << "predicted class " << klass << "\n";
  }
  const Heatmap map = grad_cam(net, img, klass, layer);
  fs::path target = out.empty() ? fs::path("gradcam.pgm") : fs::path(out);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  write_heatmap_pgm(target.string(), map);
  fs::path csv = target;
  csv.replace_extension(".csv");
  spill(csv, map.csv());
  std::cout << "wrote " << target.string() << " (" << map.height << "x" << map.width << ", class " << klass
            << ", layer " << layer << ")\n";
  const std::string dir = target.has_parent_path() ? target.parent_path().string() : ".";
  write_manifest(dir, "gradcam", cfg, 0, {target.filename().string(), csv.filename().string()});
  return 0;
}

int cmd_export_stats(const std::string& ckpt, const std::string& data_dir, const std::string& labels,
                     const std::string& config, const std::string& arch_json, const std::string& out) {
  RunConfig cfg = config_or_args(config);
  const ArchSpec arch = arch_for(ckpt, arch_json, config.empty() ? nullptr : &cfg);
  Network<float> net(arch, 0);
  load_checkpoint(net, ckpt);
  Dataset d;
  if (!data_dir.empty()) {
    IngestOptions o;
    o.channels = static_cast<int>(arch.input[0]);
    o.height = static_cast<int>(arch.input[1]);
    o.width = static_cast<int>(arch.input[2]);
    o.num_classes = arch.num_classes;
    const fs::path lp = fs::path(labels).is_absolute() ? fs::path(labels) : fs::path(data_dir) / labels;
    d = ingest(data_dir, lp.string(), o);
  } else {
    require(!config.empty(), "export-stats needs --data or --config");
    d = load_data(cfg.data, arch.input).train;
  }
  const auto files = export_scale_weight_stats(net, d, out);
  for (const auto& f : files) std::cout << "wrote " << f << "\n";
  std::vector<std::string> names;
  for (const auto& f : files) names.push_back(fs::path(f).filename().string());
  write_manifest(out, "export-stats", cfg, 0, names);
  return 0;
}

int cmd_synth(const std::string& out, int n, int size, std::uint64_t seed) {
  const Dataset d = synth_generate(n, size, seed);
  write_dataset(d, out);
  std::cout << "wrote " << d.size() << " images (" << n << " per class, " << size << "x" << size << ") to " << out
            << "\n";
  write_manifest(out, "synth", config_or_args(""), seed, {"labels.csv"});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) g_command_line += (i ? " " : "") + std::string(argv[i]);

  CLI::App app{"Pyramid channel attention: training, evaluation, verification and explanation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", software_version());

  std::string config, ckpt, arch_json, out, filter, preset_name, attention, sizes, image, layer, data_dir,
      split = "test", seeds = "0,1,2", labels = "labels.csv";
  std::optional<std::uint64_t> seed;
  std::uint64_t gc_seed = 0, synth_seed = 7;
  double tol = 1e-4;
  int klass = -1, n = 200, size = 64;

  auto* train = app.add_subcommand("train", "train a model from a run config");
  train->add_option("--config", config, "run config")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "overrides [train] seed");
  train->add_option("--out", out, "output directory (default: [train] out_dir or runs/train)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config, "run config")->required()->check(CLI::ExistingFile);
  eval->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--arch", arch_json, "arch.json (default: next to the checkpoint, else the config)");
  eval->add_option("--split", split, "test or train")->check(CLI::IsMember({"test", "train"}));
  eval->add_option("--out", out, "output directory (default: the checkpoint's directory)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op and module");
  gc->add_option("--tol", tol, "relative error tolerance")->capture_default_str();
  gc->add_option("--seed", gc_seed, "input seed")->capture_default_str();
  gc->add_option("--filter", filter, "only cases whose name contains this");
  gc->add_option("--out", out, "write the report and a manifest here");

  auto* summary = app.add_subcommand("summary", "parameter and FLOP audit");
  summary->add_option("--config", config, "run config")->check(CLI::ExistingFile);
  summary->add_option("--preset", preset_name, "mini-resnet20 or resnet50-shape");
  summary->add_option("--attention", attention, "none, epca, se or pyramid_head");
  summary->add_option("--sizes", sizes, "grid sizes, e.g. 1,3");
  summary->add_option("--out", out, "write the table, arch.json and a manifest here");

  auto* ab_sizes = app.add_subcommand("ablate-sizes", "accuracy grid over pyramid grid sizes");
  ab_sizes->add_option("--config", config, "run config")->required()->check(CLI::ExistingFile);
  ab_sizes->add_option("--sizes", sizes, "size sets separated by |")->required();
  ab_sizes->add_option("--seeds", seeds, "comma-separated seeds")->capture_default_str();
  ab_sizes->add_option("--out", out, "output directory")->required();

  auto* ab_fusion = app.add_subcommand("ablate-fusion", "fusion variants against channel-dependency heads");
  ab_fusion->add_option("--config", config, "run config")->required()->check(CLI::ExistingFile);
  ab_fusion->add_option("--seeds", seeds, "comma-separated seeds")->capture_default_str();
  ab_fusion->add_option("--out", out, "output directory")->required();

  auto* cam = app.add_subcommand("gradcam", "Grad-CAM heatmap for one image");
  cam->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  cam->add_option("--image", image, "PGM or PPM image")->required()->check(CLI::ExistingFile);
  cam->add_option("--class", klass, "target class (default: predicted)");
  cam->add_option("--layer", layer, "stem, stage<s> or stage<s>.block<b> (default: [explain] layer)");
  cam->add_option("--config", config, "run config")->check(CLI::ExistingFile);
  cam->add_option("--arch", arch_json, "arch.json (default: next to the checkpoint)");
  cam->add_option("--out", out, "heatmap PGM path (a CSV is written alongside)");

  auto* stats = app.add_subcommand("export-stats", "per-scale contribution statistics of the EPCA blocks");
  stats->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  stats->add_option("--data", data_dir, "image directory")->check(CLI::ExistingDirectory);
  stats->add_option("--labels", labels, "labels CSV, relative to --data")->capture_default_str();
  stats->add_option("--config", config, "run config (data and architecture)")->check(CLI::ExistingFile);
  stats->add_option("--arch", arch_json, "arch.json (default: next to the checkpoint)");
  stats->add_option("--out", out, "output directory")->required();

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset as PGM files and labels.csv");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--n", n, "images per class")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--size", size, "image side")->capture_default_str();
  synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (*train) return cmd_train(config, seed, out);
    if (*eval) return cmd_eval(config, ckpt, arch_json, out, split);
    if (*gc) return cmd_gradcheck(tol, gc_seed, filter, out);
    if (*summary) return cmd_summary(config, preset_name, attention, sizes, out);
    if (*ab_sizes) return cmd_ablate("ablate-sizes", config, sizes, seeds, out);
    if (*ab_fusion) return cmd_ablate("ablate-fusion", config, "", seeds, out);
    if (*cam) return cmd_gradcam(ckpt, image, klass, layer, config, arch_json, out);
    if (*stats) return cmd_export_stats(ckpt, data_dir, labels, config, arch_json, out);
    if (*synth) return cmd_synth(out, n, size, synth_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
