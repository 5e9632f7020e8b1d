#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "cbnn/config.hpp"
#include "cbnn/errors.hpp"

using namespace cbnn;
namespace fs = std::filesystem;

namespace {

RunConfig bundled(const std::string& name) {
  return load_config((fs::path(CBNN_SOURCE_DIR) / "configs" / name).string());
}

int error_line(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.line();
  }
  return -1;
}

const char* kMinimal = "[run]\nid = t\n[layer]\nkind = dense\noutputs = 2\n";

}  // namespace

TEST_SUITE("config") {

TEST_CASE("bundled configs round-trip") {
  std::size_t count = 0;
  for (const auto& entry : fs::directory_iterator(fs::path(CBNN_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".cfg") continue;
    ++count;
    INFO(entry.path().filename().string());
    const RunConfig a = load_config(entry.path().string());
    const RunConfig b = parse_config(serialize_config(a));
    CHECK(a == b);
    CHECK(serialize_config(b) == serialize_config(a));
  }
  CHECK(count >= 7);
}

TEST_CASE("Bayesian LeNet settings") {
  const RunConfig c = bundled("mnist_lenet_bayes.cfg");
  CHECK(c.mode == Mode::bayesian);
  CHECK(c.train.batch_size == 64);
  CHECK(c.train.policy == LrPolicy::inv);
  CHECK(c.train.base_lr == 0.01);
  CHECK(c.train.lr_gamma == 0.0001);
  CHECK(c.train.lr_power == 0.75);
  CHECK(c.train.momentum == 0.9);
  CHECK(c.train.kappa == 50);
  CHECK(c.train.iterations == 100000);
  CHECK(resolve_nu(c.train, 60000) == 1.0 / (60000.0 * 100.0));
  for (const auto& l : c.layers) {
    CHECK(l.prior_std == 1.0);
    CHECK(l.bias_prior_std == 1.0);
  }
  CHECK(c.layers[4].outputs == 100);
  CHECK(bundled("mnist_lenet250_bayes.cfg").layers[4].outputs == 250);
}

TEST_CASE("Bayesian CIFAR-10 settings") {
  const RunConfig c = bundled("cifar10_bayes.cfg");
  CHECK(c.train.batch_size == 100);
  CHECK(c.train.policy == LrPolicy::fixed);
  CHECK(c.train.base_lr == 0.001);
  CHECK(c.train.iterations == 40000);
  CHECK(c.train.kappa == 50);
  CHECK(resolve_nu(c.train, 50000) == 1.0 / (50000.0 * 10.0));
  for (const auto& l : c.layers) {
    if (l.kind == LayerKind::conv) CHECK(l.prior_std == 1.0);
  }
  CHECK(c.layers.back().prior_std == 0.05);
  CHECK(c.layers.back().bias_prior_std == 0.05);
}

TEST_CASE("frequentist LeNet settings") {
  const RunConfig c = bundled("mnist_lenet_freq.cfg");
  CHECK(c.mode == Mode::frequentist);
  bool dropout_after_fc1 = false;
  for (std::size_t i = 0; i < c.layers.size(); ++i) {
    const auto& l = c.layers[i];
    if (l.kind == LayerKind::conv || l.kind == LayerKind::dense) CHECK(l.weight_decay == 0.0005);
    if (l.kind == LayerKind::dropout) {
      CHECK(l.dropout_rate == 0.5);
      dropout_after_fc1 = i >= 2 && c.layers[i - 2].kind == LayerKind::dense && c.layers[i - 2].outputs == 100;
    }
  }
  CHECK(dropout_after_fc1);
}

TEST_CASE("defaults and parsing") {
  const RunConfig c = parse_config(kMinimal);
  CHECK(c.id == "t");
  CHECK(c.eval.draws == 200);
  CHECK(c.eval.coverages == std::vector<double>{0.95, 0.99});
  CHECK_FALSE(c.train.nu.has_value());
  CHECK(c.train.kl_reduction == 1.0);
  const RunConfig d = parse_config(std::string(kMinimal) + "\n[train]\nnu = 0.5  # absolute\n[eval]\ncoverages = 0.9,0.5\n");
  CHECK(*d.train.nu == 0.5);
  CHECK(d.eval.coverages == std::vector<double>{0.9, 0.5});
  CHECK(parse_config("[run]\nseed = 42\n[layer]\nkind = dense\noutputs = 3\n").train.seed == 42);
}

TEST_CASE("errors carry line numbers") {
  CHECK(error_line("[run]\nid = a\nbogus = 1\n[layer]\nkind = dense\noutputs = 2\n") == 3);
  CHECK(error_line("[run]\n[nope]\n") == 2);
  CHECK(error_line("[run]\nseed = 1\nseed = 2\n") == 3);
  CHECK(error_line("[train]\n\nbase_lr = fast\n") == 3);
  CHECK(error_line("[train]\nmomentum = 1.0\n") == 2);
  CHECK(error_line("[layer]\nkind = dense\noutputs = 2\n[layer]\nkind = conv\noutputs = 3\n") == 4);
  CHECK(error_line("[layer]\nkind = dense\n") == 1);
  CHECK(error_line("[layer]\nkind = spline\n") == 2);
  CHECK(error_line("id = x\n") == 1);
  CHECK(error_line("[eval]\ncoverages = 0.95, 1.5\n") == 2);
  CHECK_THROWS_AS(parse_config("[run]\nid = x\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent.cfg"), ConfigError);
}

TEST_CASE("data directory override") {
  RunConfig c = parse_config(kMinimal);
  const std::string before = c.data.dir;
  unsetenv("CBNN_DATA_DIR");
  apply_env_overrides(c);
  CHECK(c.data.dir == before);
  setenv("CBNN_DATA_DIR", "/tmp/elsewhere", 1);
  apply_env_overrides(c);
  CHECK(c.data.dir == "/tmp/elsewhere");
  unsetenv("CBNN_DATA_DIR");
}

TEST_CASE("load_data for each format") {
  RunConfig c = bundled("mnist_desk_bayes.cfg");
  c.data.dir = (fs::path(CBNN_SOURCE_DIR) / "data" / "mnist-desk").string();
  c.data.train_per_class = 20;
  c.data.test_count = 50;
  const auto [train, test] = load_data(c.data, 1);
  CHECK(train.size() == 200);
  CHECK(test.size() == 50);

  DataConfig blobs;
  blobs.format = DataFormat::blobs;
  blobs.blob_classes = 3;
  blobs.blob_dims = 3;
  blobs.blob_per_class = 7;
  blobs.blob_test_per_class = 4;
  const auto [bt, be] = load_data(blobs, 2);
  CHECK(bt.size() == 21);
  CHECK(be.size() == 12);
  CHECK(bt.images.data != be.images.data);

  DataConfig missing;
  missing.dir = "/nonexistent";
  CHECK_THROWS_AS(load_data(missing, 1), DataError);
}

}  // TEST_SUITE
