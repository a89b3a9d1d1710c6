#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "epca/app.hpp"

using namespace epca;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text, "t.cfg");
  } catch (const ArgumentError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("empty config gives the defaults") {
  auto c = parse_run_config("");
  CHECK(c.arch.name == "mini-resnet20");
  CHECK(c.arch.input == Shape{1, 32, 32});
  CHECK(c.arch.num_classes == 3);
  CHECK(c.arch.attention.kind == AttentionKind::none);
  CHECK(c.train.lr_max == 0.0015);
  CHECK(c.train.scheduler.t0 == 10);
  CHECK(c.train.scheduler.t_mult == 2);
}

TEST_CASE("sections, comments and overrides") {
  auto c = parse_run_config(
      "# leading comment\n"
      "[data]\n"
      "size = 48   ; trailing\n"
      "n_per_class = 5\n"
      "[arch]\n"
      "num_classes = 4\n"
      "stem_channels = 8\n"
      "[attention]\n"
      "kind = epca\n"
      "sizes = 1,2,4\n"
      "variant = hierarchical\n"
      "[train]\n"
      "lr_max = 0.1\n"
      "paradigm = pretrain_freeze\n"
      "augment = false\n"
      "stop_at_train_acc = 0.99\n"
      "[explain]\n"
      "layer = stage2.block1\n"
      "class = 2\n");
  CHECK(c.data.size == 48);
  CHECK(c.data.n_per_class == 5);
  CHECK(c.arch.input == Shape{1, 48, 48});
  CHECK(c.arch.num_classes == 4);
  CHECK(c.num_classes_set);
  CHECK(c.arch.stem_channels == 8);
  CHECK(c.arch.attention.kind == AttentionKind::epca);
  CHECK(c.arch.attention.epca.sizes == std::vector<int>{1, 2, 4});
  CHECK(c.arch.attention.epca.feature_count() == 21);
  CHECK(c.arch.attention.epca.variant == FusionVariant::hierarchical);
  CHECK(c.train.lr_max == 0.1);
  CHECK(c.train.paradigm == Paradigm::pretrain_freeze);
  CHECK_FALSE(c.train.augment.enabled);
  CHECK(c.train.stop_at_train_acc == 0.99);
  CHECK(c.explain.layer == "stage2.block1");
  CHECK(c.explain.target_class == 2);
}

TEST_CASE("config errors name the line") {
  CHECK(error_of("[data]\nsize = 32\nbogus = 1\n").find("t.cfg:3") != std::string::npos);
  CHECK(error_of("[nope]\n").find("unknown section") != std::string::npos);
  CHECK(error_of("size = 3\n").find("before any section") != std::string::npos);
  CHECK(error_of("[train]\nlr_max = fast\n").find("t.cfg:2") != std::string::npos);
  CHECK(error_of("[train]\nepochs = 3\nepochs = 4\n").find("duplicate") != std::string::npos);
  CHECK(error_of("[attention]\nsizes = 0,3\n").find("t.cfg") != std::string::npos);
  CHECK(error_of("[attention]\nvariant = cubic\n").find("t.cfg:2") != std::string::npos);
  CHECK(error_of("[train]\nmomentum = 1.5\n") != "");
  CHECK(error_of("[data]\nsource = web\n") != "");
  CHECK(error_of("[train]\naugment = maybe\n") != "");
}

TEST_CASE("arch JSON round trip") {
  ArchSpec a = preset("resnet50-shape");
  a.attention.kind = AttentionKind::epca;
  a.attention.epca.sizes = {1, 2, 3};
  a.attention.epca.variant = FusionVariant::parallel;
  a.attention.epca.combine = ParallelCombine::product;
  a.attention.head = PyramidHead::shared_mlp;
  a.num_classes = 5;
  const ArchSpec b = arch_from_json(arch_to_json(a));
  CHECK(arch_to_json(b) == arch_to_json(a));
  CHECK(b.block == BlockKind::bottleneck);
  CHECK(b.stages.size() == a.stages.size());
  CHECK(b.attention.epca.combine == ParallelCombine::product);
  CHECK_THROWS_AS(arch_from_json("{\"name\": 3}"), LoadError);
}

TEST_CASE("sha256 matches the FIPS 180-2 test vectors") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("run manifest records hash, seed and version") {
  const auto dir = fs::temp_directory_path() / "epca_test_manifest";
  fs::remove_all(dir);
  auto c = parse_run_config("[train]\nepochs = 3\n", "x.cfg");
  write_manifest(dir.string(), "train", c, 42, {"history.csv"});
  std::ifstream in(dir / "run-manifest.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j["command"] == "train");
  CHECK(j["config_path"] == "x.cfg");
  CHECK(j["config_sha256"] == sha256_hex("[train]\nepochs = 3\n"));
  CHECK(j["seed"] == 42);
  CHECK(j["version"] == software_version());
  CHECK(j["outputs"][0] == "history.csv");
}

TEST_CASE("synthetic test split is independent of the training split") {
  DataConfig dc;
  dc.n_per_class = 3;
  dc.test_per_class = 3;
  auto d = load_data(dc);
  REQUIRE(d.test);
  CHECK(d.test->split == "test");
  CHECK(d.test->size() == 9);
  CHECK(d.test->images[0].to_vector() != d.train.images[0].to_vector());
  auto again = load_data(dc);
  CHECK(again.test->images[4].to_vector() == d.test->images[4].to_vector());
}

TEST_CASE("resolve_arch takes shape and classes from the data") {
  auto c = parse_run_config("[data]\nsize = 40\n[attention]\nkind = epca\n");
  Dataset d = synth_generate(1, 40, 0);
  auto a = resolve_arch(c, d);
  CHECK(a.input == Shape{1, 40, 40});
  CHECK(a.num_classes == 3);
  auto small = parse_run_config("[arch]\nnum_classes = 2\n");
  CHECK_THROWS_AS(resolve_arch(small, d), ArgumentError);
}

TEST_CASE("summary of mini-resnet20 with EPCA {1,3}: 90 attention parameters") {
  auto c = parse_run_config("[attention]\nkind = epca\nsizes = 1,3\n");
  Network<float> net(c.arch, 0);
  CHECK(net.summary().attention_params == 90);
}
