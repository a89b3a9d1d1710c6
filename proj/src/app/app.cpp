#include "epca/app.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <json.hpp>
#include <sstream>

#ifndef EPCA_VERSION
#define EPCA_VERSION "0.0.0"
#endif

namespace epca {

namespace fs = std::filesystem;
using nlohmann::json;

std::string software_version() { return EPCA_VERSION; }

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Line {
  std::string key, value;
  int number;
  std::string where;
};

[[noreturn]] void bad(const Line& l, const std::string& why) {
  throw ArgumentError(l.where + ":" + std::to_string(l.number) + ": " + why);
}

template <typename T>
T as_number(const Line& l) {
  T v{};
  const char* b = l.value.data();
  const char* e = b + l.value.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) bad(l, "'" + l.key + "' expects a number, got '" + l.value + "'");
  return v;
}

bool as_bool(const Line& l) {
  const auto& v = l.value;
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  bad(l, "'" + l.key + "' expects true/false, got '" + v + "'");
}

template <typename F>
auto wrap(const Line& l, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ArgumentError& e) {
    bad(l, e.what());
  }
}

const char* block_name(BlockKind b) { return b == BlockKind::bottleneck ? "bottleneck" : "basic"; }
BlockKind parse_block(const std::string& s) {
  if (s == "basic") return BlockKind::basic;
  if (s == "bottleneck") return BlockKind::bottleneck;
  throw ArgumentError("unknown block kind '" + s + "' (expected basic|bottleneck)");
}

const char* combine_name(ParallelCombine c) { return c == ParallelCombine::product ? "product" : "mean"; }
ParallelCombine parse_combine(const std::string& s) {
  if (s == "mean") return ParallelCombine::mean;
  if (s == "product") return ParallelCombine::product;
  throw ArgumentError("unknown parallel combine '" + s + "' (expected mean|product)");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  out << text;
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  cfg.source = source;
  cfg.text = text;
  std::string preset_name = "mini-resnet20";
  std::vector<Line> arch_lines;

  std::istringstream in(text);
  std::string raw, section;
  int number = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, raw)) {
    ++number;
    auto cut = raw.find_first_of("#;");
    std::string s = trim(cut == std::string::npos ? raw : raw.substr(0, cut));
    if (s.empty()) continue;
    Line l{"", "", number, source};
    if (s.front() == '[') {
      if (s.back() != ']') bad(l, "unterminated section header '" + s + "'");
      section = trim(s.substr(1, s.size() - 2));
      static const char* known[] = {"data", "arch", "attention", "train", "eval", "explain"};
      if (std::find(std::begin(known), std::end(known), section) == std::end(known))
        bad(l, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) bad(l, "expected 'key = value', got '" + s + "'");
    l.key = trim(s.substr(0, eq));
    l.value = trim(s.substr(eq + 1));
    if (section.empty()) bad(l, "key '" + l.key + "' appears before any section");
    const std::string full = section + "." + l.key;
    if (auto it = seen.find(full); it != seen.end())
      bad(l, "duplicate key '" + l.key + "' (first set on line " + std::to_string(it->second) + ")");
    seen[full] = number;

    auto& d = cfg.data;
    auto& t = cfg.train;
    auto& a = cfg.arch.attention;
    const auto& k = l.key;
    if (section == "data") {
      if (k == "source") {
        if (l.value != "synthetic" && l.value != "dir") bad(l, "source must be synthetic or dir");
        d.source = l.value;
      } else if (k == "n_per_class") d.n_per_class = as_number<int>(l);
      else if (k == "test_per_class") d.test_per_class = as_number<int>(l);
      else if (k == "size") d.size = as_number<int>(l);
      else if (k == "seed") d.seed = as_number<std::uint64_t>(l);
      else if (k == "noise") d.synth.noise = as_number<double>(l);
      else if (k == "texture_amplitude") d.synth.texture_amplitude = as_number<double>(l);
      else if (k == "patch_intensity") d.synth.patch_intensity = as_number<double>(l);
      else if (k == "dir") d.dir = l.value;
      else if (k == "labels") d.labels = l.value;
      else if (k == "test_dir") d.test_dir = l.value;
      else if (k == "test_labels") d.test_labels = l.value;
      else if (k == "height") d.ingest.height = as_number<int>(l);
      else if (k == "width") d.ingest.width = as_number<int>(l);
      else if (k == "channels") d.ingest.channels = as_number<int>(l);
      else if (k == "num_classes") d.ingest.num_classes = as_number<int>(l);
      else bad(l, "unknown key '" + k + "' in [data]");
    } else if (section == "arch") {
      if (k == "preset") preset_name = l.value;
      else if (k == "num_classes" || k == "stem_channels" || k == "block" || k == "input_channels" ||
               k == "input_size")
        arch_lines.push_back(l);
      else bad(l, "unknown key '" + k + "' in [arch]");
    } else if (section == "attention") {
      if (k == "kind") a.kind = wrap(l, [&] { return parse_attention_kind(l.value); });
      else if (k == "sizes") a.epca.sizes = wrap(l, [&] { return parse_sizes(l.value); });
      else if (k == "variant") a.epca.variant = wrap(l, [&] { return parse_variant(l.value); });
      else if (k == "dropout_rate") a.epca.dropout_rate = as_number<double>(l);
      else if (k == "bn_affine") a.epca.bn_affine = as_bool(l);
      else if (k == "combine") a.epca.combine = wrap(l, [&] { return parse_combine(l.value); });
      else if (k == "per_channel_weights") a.epca.per_channel_weights = as_bool(l);
      else if (k == "reduction") a.reduction = as_number<int>(l);
      else if (k == "head") a.head = wrap(l, [&] { return parse_head(l.value); });
      else bad(l, "unknown key '" + k + "' in [attention]");
    } else if (section == "train") {
      if (k == "lr_max") t.lr_max = as_number<double>(l);
      else if (k == "momentum") t.momentum = as_number<double>(l);
      else if (k == "weight_decay") t.weight_decay = as_number<double>(l);
      else if (k == "decay_exempt") t.decay_exempt = as_bool(l);
      else if (k == "batch_size") t.batch_size = as_number<int>(l);
      else if (k == "epochs") t.epochs = as_number<int>(l);
      else if (k == "t0") t.scheduler.t0 = as_number<int>(l);
      else if (k == "t_mult") t.scheduler.t_mult = as_number<int>(l);
      else if (k == "eta_min") t.scheduler.eta_min = as_number<double>(l);
      else if (k == "paradigm") t.paradigm = wrap(l, [&] { return parse_paradigm(l.value); });
      else if (k == "augment") t.augment.enabled = as_bool(l);
      else if (k == "hflip") t.augment.hflip = as_bool(l);
      else if (k == "rotation_deg") t.augment.rotation_deg = as_number<double>(l);
      else if (k == "seed") t.seed = as_number<std::uint64_t>(l);
      else if (k == "val_fraction") t.val_fraction = as_number<double>(l);
      else if (k == "stop_at_train_acc") t.stop_at_train_acc = as_number<double>(l);
      else if (k == "out_dir") t.out_dir = l.value;
      else if (k == "pretrained") cfg.pretrained = l.value;
      else bad(l, "unknown key '" + k + "' in [train]");
    } else if (section == "eval") {
      if (k == "ckpt") cfg.eval.ckpt = l.value;
      else if (k == "batch_size") cfg.eval.batch_size = as_number<int>(l);
      else bad(l, "unknown key '" + k + "' in [eval]");
    } else if (section == "explain") {
      if (k == "layer") cfg.explain.layer = l.value;
      else if (k == "class") cfg.explain.target_class = as_number<int>(l);
      else if (k == "image") cfg.explain.image = l.value;
      else bad(l, "unknown key '" + k + "' in [explain]");
    }
  }

  // Preset first, then the explicit [arch] overrides.
  const auto attention = cfg.arch.attention;
  cfg.arch = wrap(Line{"preset", preset_name, seen["arch.preset"], source}, [&] { return preset(preset_name); });
  cfg.arch.attention = attention;
  if (cfg.data.source == "synthetic") cfg.arch.input = {1, cfg.data.size, cfg.data.size};
  else
    cfg.arch.input = {cfg.data.ingest.channels > 0 ? cfg.data.ingest.channels : 3, cfg.data.ingest.height,
                      cfg.data.ingest.width};
  for (const auto& l : arch_lines) {
    if (l.key == "num_classes") {
      cfg.arch.num_classes = as_number<int>(l);
      cfg.num_classes_set = true;
    } else if (l.key == "stem_channels") cfg.arch.stem_channels = as_number<int>(l);
    else if (l.key == "block") cfg.arch.block = wrap(l, [&] { return parse_block(l.value); });
    else if (l.key == "input_channels") cfg.arch.input[0] = as_number<int>(l);
    else if (l.key == "input_size") cfg.arch.input[1] = cfg.arch.input[2] = as_number<int>(l);
  }
  if (!cfg.num_classes_set && cfg.data.source == "synthetic") cfg.arch.num_classes = 3;
  try {
    cfg.arch.attention.epca.validate();
    cfg.train.validate();
  } catch (const ArgumentError& e) {
    throw ArgumentError(source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(read_text(path), path); }

LoadedData load_data(const DataConfig& cfg, const Shape& image_shape) {
  LoadedData out;
  if (cfg.source == "synthetic") {
    out.train = synth_generate(cfg.n_per_class, cfg.size, cfg.seed, cfg.synth);
    if (cfg.test_per_class > 0) {
      out.test = synth_generate(cfg.test_per_class, cfg.size, cfg.seed ^ 0x9e3779b97f4a7c15ULL, cfg.synth);
      out.test->split = "test";
    }
    return out;
  }
  require(!cfg.dir.empty(), "[data] source = dir needs 'dir'");
  IngestOptions o = cfg.ingest;
  if (image_shape.size() == 3) {
    o.channels = static_cast<int>(image_shape[0]);
    o.height = static_cast<int>(image_shape[1]);
    o.width = static_cast<int>(image_shape[2]);
  }
  auto labels_path = [](const std::string& dir, const std::string& labels) {
    return fs::path(labels).is_absolute() ? labels : (fs::path(dir) / labels).string();
  };
  out.train = ingest(cfg.dir, labels_path(cfg.dir, cfg.labels), o);
  if (!cfg.test_dir.empty()) {
    if (o.num_classes == 0) o.num_classes = out.train.num_classes();
    if (o.channels == 0) o.channels = static_cast<int>(out.train.image_shape()[0]);
    out.test = ingest(cfg.test_dir, labels_path(cfg.test_dir, cfg.test_labels), o);
    out.test->split = "test";
  }
  return out;
}

ArchSpec resolve_arch(const RunConfig& cfg, const Dataset& d) {
  ArchSpec a = cfg.arch;
  a.input = d.image_shape();
  if (!cfg.num_classes_set) a.num_classes = d.num_classes();
  require(a.num_classes >= d.num_classes(), "[arch] num_classes is smaller than the dataset's class count");
  a.validate();
  return a;
}

std::string arch_to_json(const ArchSpec& s) {
  json j;
  j["name"] = s.name;
  j["stem_channels"] = s.stem_channels;
  j["stem_kernel"] = s.stem_kernel;
  j["stem_stride"] = s.stem_stride;
  j["stem_pool"] = s.stem_pool;
  j["block"] = block_name(s.block);
  j["stages"] = json::array();
  for (const auto& st : s.stages) j["stages"].push_back({st.channels, st.blocks, st.stride});
  j["num_classes"] = s.num_classes;
  j["input"] = s.input;
  const auto& a = s.attention;
  j["attention"] = {{"kind", attention_kind_name(a.kind)},
                    {"sizes", a.epca.sizes},
                    {"variant", variant_name(a.epca.variant)},
                    {"dropout_rate", a.epca.dropout_rate},
                    {"bn_affine", a.epca.bn_affine},
                    {"bn_eps", a.epca.bn_eps},
                    {"bn_momentum", a.epca.bn_momentum},
                    {"combine", combine_name(a.epca.combine)},
                    {"per_channel_weights", a.epca.per_channel_weights},
                    {"reduction", a.reduction},
                    {"head", head_name(a.head)}};
  return j.dump(2) + "\n";
}

ArchSpec arch_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ArchSpec s;
    s.name = j.at("name").get<std::string>();
    s.stem_channels = j.at("stem_channels").get<int>();
    s.stem_kernel = j.at("stem_kernel").get<int>();
    s.stem_stride = j.at("stem_stride").get<int>();
    s.stem_pool = j.at("stem_pool").get<bool>();
    s.block = parse_block(j.at("block").get<std::string>());
    s.stages.clear();
    for (const auto& st : j.at("stages")) s.stages.push_back({st.at(0).get<int>(), st.at(1).get<int>(), st.at(2).get<int>()});
    s.num_classes = j.at("num_classes").get<int>();
    s.input = j.at("input").get<Shape>();
    const auto& a = j.at("attention");
    s.attention.kind = parse_attention_kind(a.at("kind").get<std::string>());
    s.attention.epca.sizes = a.at("sizes").get<std::vector<int>>();
    s.attention.epca.variant = parse_variant(a.at("variant").get<std::string>());
    s.attention.epca.dropout_rate = a.at("dropout_rate").get<double>();
    s.attention.epca.bn_affine = a.at("bn_affine").get<bool>();
    s.attention.epca.bn_eps = a.at("bn_eps").get<double>();
    s.attention.epca.bn_momentum = a.at("bn_momentum").get<double>();
    s.attention.epca.combine = parse_combine(a.at("combine").get<std::string>());
    s.attention.epca.per_channel_weights = a.at("per_channel_weights").get<bool>();
    s.attention.reduction = a.at("reduction").get<int>();
    s.attention.head = parse_head(a.at("head").get<std::string>());
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw LoadError(std::string("bad architecture description: ") + e.what());
  }
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

void write_manifest(const std::string& dir, const std::string& command, const RunConfig& cfg, std::uint64_t seed,
                    const std::vector<std::string>& outputs) {
  json j;
  j["command"] = command;
  j["version"] = software_version();
  j["config_path"] = cfg.source;
  j["config_sha256"] = sha256_hex(cfg.text);
  j["seed"] = seed;
  j["outputs"] = outputs;
  fs::create_directories(dir);
  write_text((fs::path(dir) / "run-manifest.json").string(), j.dump(2) + "\n");
}

ExperimentResult run_experiment(const RunConfig& cfg, const LoadedData& data, const ArchSpec& arch, std::uint64_t seed,
                                const std::string& out_dir) {
  ExperimentResult r;
  r.label = arch.attention.describe();
  Network<float> net(arch, seed);
  if (!cfg.pretrained.empty()) load_checkpoint(net, cfg.pretrained, LoadMode::backbone_only);
  const ModelSummary s = net.summary();
  r.params = s.param_count;
  r.attention_params = s.attention_params;
  r.flops = s.flops;
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.out_dir = out_dir;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "arch.json").string(), arch_to_json(arch));
  }
  r.history = train(net, data.train, nullptr, tc);
  const Dataset& test = data.test ? *data.test : data.train;
  const Predictions p = predict(net, test, cfg.eval.batch_size);
  std::optional<Scores> scores;
  if (p.num_classes == 2) scores = Scores{p.probs, 2};
  r.test = evaluate(test.labels, p.labels, scores, arch.num_classes);
  return r;
}

double AblationRow::mean(double EvalReport::*field) const {
  double s = 0;
  for (const auto& r : runs) s += r.*field;
  return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
}

double AblationRow::mean_acc() const { return mean(&EvalReport::acc); }

std::string AblationTable::table() const {
  std::ostringstream os;
  char buf[256];
  os << title << "\n";
  std::snprintf(buf, sizeof(buf), "%-28s %4s %10s %8s %10s %8s %8s %8s %8s %5s\n", "model", "F", "params", "attn",
                "MFLOPs", "ACC", "Sen", "F1", "kappa", "runs");
  os << buf;
  for (const auto& r : rows) {
    double sd = 0;
    const double m = r.mean_acc();
    for (const auto& e : r.runs) sd += (e.acc - m) * (e.acc - m);
    sd = r.runs.size() > 1 ? std::sqrt(sd / static_cast<double>(r.runs.size() - 1)) : 0.0;
    std::snprintf(buf, sizeof(buf), "%-28s %4d %10lld %8lld %10.3f %8.4f %8.4f %8.4f %8.4f %5zu  (acc sd %.4f)\n",
                  r.label.c_str(), r.features, static_cast<long long>(r.params),
                  static_cast<long long>(r.attention_params), static_cast<double>(r.flops) / 1e6, m,
                  r.mean(&EvalReport::sen), r.mean(&EvalReport::f1), r.mean(&EvalReport::kappa), r.runs.size(), sd);
    os << buf;
  }
  os << "Metrics are test-set means over seeds; Sen and F1 are macro averages.\n";
  return os.str();
}

std::string AblationTable::csv() const {
  std::ostringstream os;
  os << "model,features,params,attention_params,flops,run,acc,sen,f1,kappa\n";
  char buf[256];
  for (const auto& r : rows) {
    auto line = [&](const std::string& run, double acc, double sen, double f1, double kappa) {
      std::snprintf(buf, sizeof(buf), "%s,%d,%lld,%lld,%lld,%s,%.6f,%.6f,%.6f,%.6f\n", r.label.c_str(), r.features,
                    static_cast<long long>(r.params), static_cast<long long>(r.attention_params),
                    static_cast<long long>(r.flops), run.c_str(), acc, sen, f1, kappa);
      os << buf;
    };
    for (std::size_t i = 0; i < r.runs.size(); ++i)
      line(std::to_string(i), r.runs[i].acc, r.runs[i].sen, r.runs[i].f1, r.runs[i].kappa);
    line("mean", r.mean_acc(), r.mean(&EvalReport::sen), r.mean(&EvalReport::f1), r.mean(&EvalReport::kappa));
  }
  return os.str();
}

namespace {

AblationRow run_row(const RunConfig& cfg, const LoadedData& data, const ArchSpec& arch,
                    const std::vector<std::uint64_t>& seeds, std::string label) {
  AblationRow row;
  row.label = std::move(label);
  row.features = arch.attention.kind == AttentionKind::none || arch.attention.kind == AttentionKind::se
                     ? 0
                     : arch.attention.epca.feature_count();
  for (auto seed : seeds) {
    auto r = run_experiment(cfg, data, arch, seed);
    row.params = r.params;
    row.attention_params = r.attention_params;
    row.flops = r.flops;
    row.runs.push_back(r.test);
  }
  return row;
}

}  // namespace

AblationTable ablate_sizes(const RunConfig& cfg, const LoadedData& data, const std::string& specs,
                           const std::vector<std::uint64_t>& seeds) {
  require(!seeds.empty(), "ablate-sizes needs at least one seed");
  AblationTable t;
  t.title = "Grid-size ablation (EPCA " + std::string(variant_name(cfg.arch.attention.epca.variant)) + " fusion)";
  std::vector<std::vector<int>> grids;
  std::stringstream ss(specs);
  std::string item;
  while (std::getline(ss, item, '|')) grids.push_back(parse_sizes(item));
  require(!grids.empty(), "ablate-sizes: no size sets given");
  for (const auto& g : grids) {
    ArchSpec a = resolve_arch(cfg, data.train);
    a.attention.kind = AttentionKind::epca;
    a.attention.epca.sizes = g;
    a.attention.epca.validate();
    t.rows.push_back(run_row(cfg, data, a, seeds, "{" + format_sizes(g) + "}"));
  }
  return t;
}

AblationTable ablate_fusion(const RunConfig& cfg, const LoadedData& data, const std::vector<std::uint64_t>& seeds) {
  require(!seeds.empty(), "ablate-fusion needs at least one seed");
  AblationTable t;
  t.title = "Fusion ablation (sizes {" + format_sizes(cfg.arch.attention.epca.sizes) + "})";
  const ArchSpec base = resolve_arch(cfg, data.train);
  {
    ArchSpec a = base;
    a.attention.kind = AttentionKind::none;
    t.rows.push_back(run_row(cfg, data, a, seeds, "plain"));
    a.attention.kind = AttentionKind::se;
    t.rows.push_back(run_row(cfg, data, a, seeds, "SE"));
  }
  for (auto v : {FusionVariant::linear, FusionVariant::dropout, FusionVariant::hierarchical, FusionVariant::parallel}) {
    ArchSpec a = base;
    a.attention.kind = AttentionKind::epca;
    a.attention.epca.variant = v;
    t.rows.push_back(run_row(cfg, data, a, seeds, std::string("EPCA-") + variant_name(v)));
  }
  for (auto h : {PyramidHead::mlp, PyramidHead::shared_mlp, PyramidHead::cic}) {
    ArchSpec a = base;
    a.attention.kind = AttentionKind::pyramid_head;
    a.attention.head = h;
    if (h == PyramidHead::cic && a.attention.epca.sizes.front() != 1) continue;
    t.rows.push_back(run_row(cfg, data, a, seeds, std::string("PP+") + head_name(h)));
  }
  return t;
}

}  // namespace epca
