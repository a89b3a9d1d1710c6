#include "epca/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "epca/error.hpp"
#include "epca/rng.hpp"

namespace epca {

Shape Dataset::image_shape() const {
  require(!images.empty(), "empty dataset");
  return images.front().shape();
}

void Dataset::validate() const {
  if (images.empty()) throw ArgumentError("empty dataset");
  require(labels.size() == images.size(), "dataset label count does not match image count");
  const auto shape = images.front().shape();
  require(shape.size() == 3, "dataset images must be [C, H, W]");
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i].shape() == shape, "image " + std::to_string(i) + " has shape " + to_string(images[i].shape()) +
                                            ", expected " + to_string(shape));
    require(labels[i] >= 0 && labels[i] < num_classes(),
            "label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(num_classes()) + ")");
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices, std::string split_tag) const {
  Dataset out;
  out.class_names = class_names;
  out.split = std::move(split_tag);
  for (auto i : indices) {
    require(i < size(), "subset index out of range");
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
    out.names.push_back(i < names.size() ? names[i] : std::to_string(i));
  }
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double fraction, std::uint64_t seed) {
  require(fraction >= 0.0 && fraction < 1.0, "split fraction must lie in [0, 1)");
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  const auto n_second = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(d.size())));
  std::vector<std::size_t> first(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_second));
  std::vector<std::size_t> second(idx.end() - static_cast<std::ptrdiff_t>(n_second), idx.end());
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {d.subset(first, "train"), d.subset(second, "val")};
}

TensorF stack_batch(const Dataset& d, std::span<const std::size_t> indices) {
  const auto shape = d.image_shape();
  const auto per = numel_of(shape);
  std::vector<float> data(indices.size() * static_cast<std::size_t>(per));
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto src = d.images.at(indices[b]).data();
    std::copy(src.begin(), src.end(), data.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return TensorF({static_cast<std::int64_t>(indices.size()), shape[0], shape[1], shape[2]}, std::move(data));
}

// ---------------------------------------------------------------------------

namespace {

struct PnmHeader {
  int channels, width, height, maxval;
  std::size_t offset;
};

PnmHeader parse_header(const std::vector<unsigned char>& b, const std::string& source) {
  auto fail = [&source](const std::string& why) { return LoadError(source + ": malformed PNM header: " + why); };
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '5' && b[1] != '6')) throw fail("expected P5 or P6 magic");
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    if (pos >= b.size() || !std::isdigit(b[pos])) throw fail(std::string("missing ") + what);
    long v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) {
      v = v * 10 + (b[pos++] - '0');
      if (v > 1 << 24) throw fail(std::string(what) + " too large");
    }
    return static_cast<int>(v);
  };
  PnmHeader h{};
  h.channels = b[1] == '5' ? 1 : 3;
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (h.width <= 0 || h.height <= 0) throw fail("zero image size");
  if (h.maxval <= 0 || h.maxval > 65535) throw fail("maxval must lie in [1, 65535]");
  if (pos >= b.size() || !std::isspace(b[pos])) throw fail("missing whitespace before raster");
  h.offset = pos + 1;
  return h;
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TensorF decode_pnm(const std::vector<unsigned char>& bytes, const std::string& source) {
  const auto h = parse_header(bytes, source);
  const std::size_t bps = h.maxval > 255 ? 2 : 1;
  const std::size_t count = static_cast<std::size_t>(h.width) * h.height * h.channels;
  if (bytes.size() < h.offset + count * bps)
    throw LoadError(source + ": raster truncated (" + std::to_string(bytes.size() - h.offset) + " of " +
                    std::to_string(count * bps) + " bytes)");
  TensorF out({h.channels, h.height, h.width});
  auto d = out.data();
  const auto plane = static_cast<std::size_t>(h.width) * h.height;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = h.offset + i * bps;
    const unsigned v = bps == 1 ? bytes[at] : (static_cast<unsigned>(bytes[at]) << 8) | bytes[at + 1];
    // interleaved samples -> planar channels
    const std::size_t c = i % h.channels, p = i / h.channels;
    d[c * plane + p] = static_cast<float>(static_cast<double>(std::min<unsigned>(v, h.maxval)) / h.maxval);
  }
  return out;
}

TensorF read_pnm(const std::string& path) {
  return decode_pnm(read_file(path), path);
}

std::vector<unsigned char> encode_pnm(const TensorF& image) {
  require_dims(image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3),
               "PNM export expects [1|3, H, W], got " + to_string(image.shape()));
  const auto c = image.dim(0), hgt = image.dim(1), w = image.dim(2);
  std::string header = std::string(c == 1 ? "P5" : "P6") + "\n" + std::to_string(w) + " " + std::to_string(hgt) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  const auto d = image.data();
  const auto plane = hgt * w;
  for (std::int64_t p = 0; p < plane; ++p)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double v = std::clamp(static_cast<double>(d[ch * plane + p]), 0.0, 1.0);
      out.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
  return out;
}

void write_pnm(const std::string& path, const TensorF& image) {
  const auto bytes = encode_pnm(image);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TensorF resize_bilinear(const TensorF& image, int height, int width) {
  require_dims(image.rank() == 3, "resize expects [C, H, W], got " + to_string(image.shape()));
  require(height > 0 && width > 0, "resize target must be positive");
  const auto c = image.dim(0), ih = image.dim(1), iw = image.dim(2);
  if (ih == height && iw == width) return image.detach();
  TensorF out({c, height, width});
  const auto src = image.data();
  auto dst = out.data();
  auto axis = [](std::int64_t in, int out_n, int o) {
    double s = (o + 0.5) * static_cast<double>(in) / out_n - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::int64_t>(std::floor(s));
    const auto i1 = std::min(i0 + 1, in - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  for (int y = 0; y < height; ++y) {
    const auto [y0, y1, fy] = axis(ih, height, y);
    for (int x = 0; x < width; ++x) {
      const auto [x0, x1, fx] = axis(iw, width, x);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const float* p = src.data() + ch * ih * iw;
        const double top = p[y0 * iw + x0] * (1 - fx) + p[y0 * iw + x1] * fx;
        const double bot = p[y1 * iw + x0] * (1 - fx) + p[y1 * iw + x1] * fx;
        dst[(ch * height + y) * width + x] = static_cast<float>(top * (1 - fy) + bot * fy);
      }
    }
  }
  return out;
}

TensorF convert_channels(const TensorF& image, int channels) {
  require(channels == 1 || channels == 3, "channel count must be 1 or 3");
  const auto c = image.dim(0);
  if (c == channels) return image.detach();
  const auto plane = image.dim(1) * image.dim(2);
  TensorF out({channels, image.dim(1), image.dim(2)});
  const auto s = image.data();
  auto d = out.data();
  for (std::int64_t p = 0; p < plane; ++p) {
    if (channels == 3) {
      for (int ch = 0; ch < 3; ++ch) d[ch * plane + p] = s[p];
    } else {
      d[p] = 0.299f * s[p] + 0.587f * s[plane + p] + 0.114f * s[2 * plane + p];
    }
  }
  return out;
}

Dataset ingest(const std::string& dir, const std::string& labels_csv, const IngestOptions& options) {
  require(options.height > 0 && options.width > 0, "ingest target size must be positive");
  std::ifstream is(labels_csv);
  if (!is) throw LoadError("cannot open labels file '" + labels_csv + "'");
  struct Row {
    std::string file;
    int label;
    int line;
  };
  std::vector<Row> rows;
  std::vector<std::string> errors;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      errors.push_back("line " + std::to_string(line_no) + ": expected 'filename,label'");
      continue;
    }
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    const auto file = trim(line.substr(0, comma));
    const auto lab = trim(line.substr(comma + 1));
    std::size_t used = 0;
    int label = 0;
    try {
      label = std::stoi(lab, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != lab.size()) {
      if (rows.empty() && errors.empty() && line_no == 1) continue;  // header
      errors.push_back("line " + std::to_string(line_no) + ": label '" + lab + "' is not an integer");
      continue;
    }
    rows.push_back({file, label, line_no});
  }
  if (rows.empty() && errors.empty()) throw LoadError("empty dataset: '" + labels_csv + "' lists no images");

  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.file < b.file; });
  int max_label = -1;
  for (const auto& r : rows) max_label = std::max(max_label, r.label);
  const int k = options.num_classes > 0 ? options.num_classes : max_label + 1;

  Dataset d;
  int channels = options.channels;
  for (const auto& r : rows) {
    const auto where = "line " + std::to_string(r.line) + " (" + r.file + "): ";
    if (r.label < 0 || r.label >= k) {
      errors.push_back(where + "label " + std::to_string(r.label) + " outside [0, " + std::to_string(k) + ")");
      continue;
    }
    const auto path = (std::filesystem::path(dir) / r.file).string();
    if (!std::filesystem::exists(path)) {
      errors.push_back(where + "missing file");
      continue;
    }
    try {
      auto img = read_pnm(path);
      if (channels == 0) channels = static_cast<int>(img.dim(0));
      img = resize_bilinear(convert_channels(img, channels), options.height, options.width);
      d.images.push_back(std::move(img));
      d.labels.push_back(r.label);
      d.names.push_back(r.file);
    } catch (const std::exception& e) {
      errors.push_back(where + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "ingest of '" + labels_csv + "' failed for " + std::to_string(errors.size()) + " row(s):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw LoadError(msg);
  }
  for (int i = 0; i < k; ++i) d.class_names.push_back("class" + std::to_string(i));
  d.validate();
  return d;
}

Dataset synth_generate(int n_per_class, int size, std::uint64_t seed, const SynthOptions& o) {
  require(size >= 32, "synthetic images need size >= 32");
  require(n_per_class >= 1, "n_per_class must be >= 1");
  Rng rng(seed);
  Dataset d;
  d.class_names = {"plain", "tessellated", "local_patch"};
  const double pi = std::numbers::pi;
  int index = 0;
  for (int i = 0; i < n_per_class; ++i)
    for (int label = 0; label < 3; ++label) {
      const double cx = size / 2.0 + rng.uniform(-0.05, 0.05) * size;
      const double cy = size / 2.0 + rng.uniform(-0.05, 0.05) * size;
      const double radius = size * rng.uniform(0.38, 0.44);
      // tessellation: two crossed gratings with random orientation and phase
      const double theta = rng.uniform(0.0, pi);
      const double freq = rng.uniform(0.22, 0.3) * 2.0 * pi;
      const double ph1 = rng.uniform(0.0, 2.0 * pi), ph2 = rng.uniform(0.0, 2.0 * pi);
      // local patch inside the disk
      const double pr = size * 0.07;
      const double pa = rng.uniform(0.0, 2.0 * pi), pd = rng.uniform(0.0, radius * 0.6);
      const double px = cx + pd * std::cos(pa), py = cy + pd * std::sin(pa);
      TensorF img({1, size, size});
      auto p = img.data();
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double r = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
          // smooth disk edge
          const double disk = 1.0 / (1.0 + std::exp((r - radius) / 1.5));
          double v = 0.1 + 0.35 * disk * (1.0 - 0.3 * (r / radius) * (r / radius));
          if (label == 1) {
            const double u = (x * std::cos(theta) + y * std::sin(theta)) * freq;
            const double w = (-x * std::sin(theta) + y * std::cos(theta)) * freq;
            v += o.texture_amplitude * disk * 0.5 * (std::sin(u + ph1) + std::sin(w + ph2));
          }
          if (label == 2) {
            const double q = std::hypot(x + 0.5 - px, y + 0.5 - py);
            v += o.patch_intensity * std::exp(-0.5 * (q / pr) * (q / pr));
          }
          v += rng.normal(0.0, o.noise);
          p[y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      d.images.push_back(std::move(img));
      d.labels.push_back(label);
      char name[32];
      std::snprintf(name, sizeof(name), "img_%05d.pgm", index++);
      d.names.emplace_back(name);
    }
  return d;
}

void write_dataset(const Dataset& d, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(std::filesystem::path(dir) / "labels.csv");
  if (!csv) throw std::runtime_error("cannot write labels.csv in '" + dir + "'");
  csv << "filename,label\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    write_pnm((std::filesystem::path(dir) / d.names[i]).string(), d.images[i]);
    csv << d.names[i] << "," << d.labels[i] << "\n";
  }
}

}  // namespace epca
