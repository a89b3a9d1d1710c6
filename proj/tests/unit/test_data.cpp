#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <string>

#include "epca/data.hpp"

using namespace epca;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("epca_test_data_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<unsigned char> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("PGM encode/decode round trip is exact on the 8-bit grid") {
  std::vector<float> v(4 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((i * 13) % 256) / 255.0f;
  TensorF img({1, 4, 5}, v);
  auto bytes = encode_pnm(img);
  CHECK(bytes[0] == 'P');
  CHECK(bytes[1] == '5');
  TensorF back = decode_pnm(bytes);
  CHECK(back.shape() == Shape{1, 4, 5});
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(back.data()[i] == v[i]);
}

TEST_CASE("PPM decode is planar") {
  std::string s = "P6\n2 1\n255\n";
  s += std::string{char(255), char(0), char(0), char(0), char(0), char(255)};
  TensorF img = decode_pnm(bytes_of(s));
  CHECK(img.shape() == Shape{3, 1, 2});
  CHECK(img.at({0, 0, 0}) == 1.0f);
  CHECK(img.at({2, 0, 0}) == 0.0f);
  CHECK(img.at({2, 0, 1}) == 1.0f);
  auto again = decode_pnm(encode_pnm(img));
  CHECK(again.to_vector() == img.to_vector());
}

TEST_CASE("PGM header comments and 16-bit rasters") {
  std::string s = "P5 # comment\n# another\n2 1\n65535\n";
  s += std::string{char(0xFF), char(0xFF), char(0x80), char(0x00)};
  TensorF img = decode_pnm(bytes_of(s));
  CHECK(img.at({0, 0, 0}) == 1.0f);
  CHECK(img.at({0, 0, 1}) == doctest::Approx(32768.0 / 65535.0));
}

TEST_CASE("malformed PNM is rejected") {
  CHECK_THROWS_AS(decode_pnm(bytes_of("P3\n1 1\n255\n0")), LoadError);
  CHECK_THROWS_AS(decode_pnm(bytes_of("P5\n1\n")), LoadError);
  CHECK_THROWS_AS(decode_pnm(bytes_of("P5\n0 1\n255\n")), LoadError);
  CHECK_THROWS_AS(decode_pnm(bytes_of("P5\n2 2\n255\nab")), LoadError);
  CHECK_THROWS_AS(decode_pnm(bytes_of("P5\n1 1\n70000\n")), LoadError);
  CHECK_THROWS_AS(read_pnm("/nonexistent/x.pgm"), LoadError);
}

TEST_CASE("bilinear resize") {
  TensorF c({1, 3, 4}, 0.25f);
  auto r = resize_bilinear(c, 7, 5);
  CHECK(r.shape() == Shape{1, 7, 5});
  for (float v : r.data()) CHECK(v == doctest::Approx(0.25f));
  TensorF ramp({1, 1, 4}, std::vector<float>{0, 1, 2, 3});
  CHECK(resize_bilinear(ramp, 1, 4).to_vector() == ramp.to_vector());
  auto half = resize_bilinear(ramp, 1, 2);
  CHECK(half.data()[0] == doctest::Approx(0.5f));
  CHECK(half.data()[1] == doctest::Approx(2.5f));
}

TEST_CASE("channel conversion") {
  TensorF g({1, 1, 2}, std::vector<float>{0.2f, 0.8f});
  auto rgb = convert_channels(g, 3);
  CHECK(rgb.shape() == Shape{3, 1, 2});
  CHECK(rgb.at({2, 0, 1}) == 0.8f);
  auto back = convert_channels(rgb, 1);
  CHECK(back.data()[0] == doctest::Approx(0.2f));
  CHECK(back.data()[1] == doctest::Approx(0.8f));
}

TEST_CASE("synthetic generator is seeded, balanced and bounded") {
  auto a = synth_generate(4, 32, 9);
  auto b = synth_generate(4, 32, 9);
  auto c = synth_generate(4, 32, 10);
  REQUIRE(a.size() == 12);
  CHECK(a.num_classes() == 3);
  CHECK(a.image_shape() == Shape{1, 32, 32});
  for (int k = 0; k < 3; ++k) CHECK(std::count(a.labels.begin(), a.labels.end(), k) == 4);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.images[i].to_vector() == b.images[i].to_vector());
    differs |= a.images[i].to_vector() != c.images[i].to_vector();
    for (float v : a.images[i].data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  CHECK(differs);
  CHECK_THROWS_AS(synth_generate(2, 16, 0), ArgumentError);
}

TEST_CASE("split is seeded, disjoint and sized by rounding") {
  auto d = synth_generate(10, 32, 1);
  auto [tr, va] = split_dataset(d, 0.2, 5);
  CHECK(va.size() == 6);
  CHECK(tr.size() == 24);
  std::set<std::string> names(tr.names.begin(), tr.names.end());
  for (const auto& n : va.names) CHECK(names.count(n) == 0);
  auto [tr2, va2] = split_dataset(d, 0.2, 5);
  CHECK(va2.names == va.names);
  auto [tr3, va3] = split_dataset(d, 0.2, 6);
  CHECK(va3.names != va.names);
}

TEST_CASE("stack_batch") {
  auto d = synth_generate(1, 32, 2);
  std::vector<std::size_t> idx{2, 0};
  auto x = stack_batch(d, idx);
  CHECK(x.shape() == Shape{2, 1, 32, 32});
  CHECK(x.at({0, 0, 5, 7}) == d.images[2].at({0, 5, 7}));
  CHECK(x.at({1, 0, 9, 3}) == d.images[0].at({0, 9, 3}));
}

TEST_CASE("write_dataset and ingest round trip") {
  auto dir = temp_dir("roundtrip");
  auto d = synth_generate(2, 32, 3);
  write_dataset(d, dir.string());
  IngestOptions o;
  o.height = 32;
  o.width = 32;
  auto back = ingest(dir.string(), (dir / "labels.csv").string(), o);
  REQUIRE(back.size() == d.size());
  CHECK(back.num_classes() == 3);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(back.names[i] == d.names[i]);
    CHECK(back.labels[i] == d.labels[i]);
    auto a = d.images[i].to_vector(), b = back.images[i].to_vector();
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::abs(a[j] - b[j]) <= 0.5f / 255.0f + 1e-6f);
  }

  o.height = 16;
  o.width = 20;
  o.channels = 3;
  auto resized = ingest(dir.string(), (dir / "labels.csv").string(), o);
  CHECK(resized.image_shape() == Shape{3, 16, 20});
}

TEST_CASE("ingest collects every bad row") {
  auto dir = temp_dir("bad");
  write_pnm((dir / "ok.pgm").string(), TensorF({1, 4, 4}, 0.5f));
  {
    std::ofstream f(dir / "broken.pgm");
    f << "P5\n4 4\n255\n";
  }
  {
    std::ofstream csv(dir / "labels.csv");
    csv << "filename,label\nok.pgm,0\nmissing.pgm,1\nok.pgm,x\nok.pgm,9\nbroken.pgm,1\n";
  }
  IngestOptions o;
  o.num_classes = 3;
  try {
    ingest(dir.string(), (dir / "labels.csv").string(), o);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("missing.pgm") != std::string::npos);
    CHECK(msg.find("'x'") != std::string::npos);
    CHECK(msg.find("9") != std::string::npos);
    CHECK(msg.find("broken.pgm") != std::string::npos);
  }

  {
    std::ofstream csv(dir / "empty.csv");
    csv << "filename,label\n";
  }
  CHECK_THROWS_WITH_AS(ingest(dir.string(), (dir / "empty.csv").string(), o), doctest::Contains("empty dataset"),
                       LoadError);
}

TEST_CASE("2x2 PPM decodes to the hand-computed planar tensor") {
  // pixels (r,g,b): (10,20,30) (40,50,60) / (70,80,90) (255,0,128)
  const unsigned char raster[] = {10, 20, 30, 40, 50, 60, 70, 80, 90, 255, 0, 128};
  std::string s = "P6\n2 2\n255\n";
  s.append(reinterpret_cast<const char*>(raster), sizeof(raster));
  TensorF img = decode_pnm(bytes_of(s));
  REQUIRE(img.shape() == Shape{3, 2, 2});
  const float expect[3][4] = {{10, 40, 70, 255}, {20, 50, 80, 0}, {30, 60, 90, 128}};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) CHECK(img.at({c, i / 2, i % 2}) == expect[c][i] / 255.0f);
}

TEST_CASE("synthetic class 2 outweighs class 0 by the patch mass") {
  SynthOptions o;
  o.noise = 0.0;
  const int size = 32, n = 300;
  auto d = synth_generate(n, size, 3, o);
  double mean[3] = {0, 0, 0};
  for (std::size_t i = 0; i < d.size(); ++i) {
    double s = 0;
    for (float v : d.images[i].data()) s += v;
    mean[d.labels[i]] += s / (size * size) / n;
  }
  // Gaussian patch of sigma 0.07*size: mass = intensity * 2 pi sigma^2 per image.
  const double sigma = 0.07 * size;
  const double mass = o.patch_intensity * 2.0 * std::numbers::pi * sigma * sigma / (size * size);
  CHECK(mean[2] - mean[0] == doctest::Approx(mass).epsilon(0.25));
  CHECK(mean[2] > mean[0]);
}

TEST_CASE("empty labels CSV is an empty-dataset error") {
  auto dir = temp_dir("empty");
  { std::ofstream(dir / "labels.csv") << "filename,label\n"; }
  try {
    ingest(dir.string(), (dir / "labels.csv").string(), {});
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("empty") != std::string::npos);
  }
}
