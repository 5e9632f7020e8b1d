#include "cbnn/config.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cbnn/errors.hpp"

namespace cbnn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& v, int line) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected a number, got '" + v + "'", line);
  return out;
}

std::uint64_t parse_uint(const std::string& v, int line) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'", line);
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

Mode parse_mode(const std::string& v, int line) {
  if (v == "bayes") return Mode::bayesian;
  if (v == "freq") return Mode::frequentist;
  throw ConfigError("mode must be bayes or freq, got '" + v + "'", line);
}

DataFormat parse_format(const std::string& v, int line) {
  if (v == "mnist") return DataFormat::mnist;
  if (v == "cifar10") return DataFormat::cifar10;
  if (v == "blobs") return DataFormat::blobs;
  throw ConfigError("format must be mnist, cifar10 or blobs, got '" + v + "'", line);
}

const char* format_name(DataFormat f) {
  switch (f) {
    case DataFormat::mnist: return "mnist";
    case DataFormat::cifar10: return "cifar10";
    case DataFormat::blobs: return "blobs";
  }
  return "mnist";
}

LayerKind parse_kind(const std::string& v, int line) {
  for (auto k : {LayerKind::dense, LayerKind::conv, LayerKind::relu, LayerKind::maxpool, LayerKind::dropout}) {
    if (v == to_string(k)) return k;
  }
  throw ConfigError("unknown layer kind '" + v + "'", line);
}

void apply_run(RunConfig& c, const std::string& key, const std::string& v, int line) {
  if (key == "id") {
    if (v.empty()) throw ConfigError("id must not be empty", line);
    c.id = v;
  } else if (key == "mode") {
    c.mode = parse_mode(v, line);
  } else if (key == "seed") {
    c.seed = parse_uint(v, line);
  } else {
    throw ConfigError("unknown key '" + key + "' in [run]", line);
  }
}

void apply_data(DataConfig& d, const std::string& key, const std::string& v, int line) {
  if (key == "format") d.format = parse_format(v, line);
  else if (key == "dir") d.dir = v;
  else if (key == "train_per_class") d.train_per_class = parse_uint(v, line);
  else if (key == "train_count") d.train_count = parse_uint(v, line);
  else if (key == "test_count") d.test_count = parse_uint(v, line);
  else if (key == "blob_classes") d.blob_classes = parse_uint(v, line);
  else if (key == "blob_per_class") d.blob_per_class = parse_uint(v, line);
  else if (key == "blob_test_per_class") d.blob_test_per_class = parse_uint(v, line);
  else if (key == "blob_dims") d.blob_dims = parse_uint(v, line);
  else if (key == "blob_separation") d.blob_separation = parse_double(v, line);
  else throw ConfigError("unknown key '" + key + "' in [data]", line);
}

void apply_train(TrainConfig& t, const std::string& key, const std::string& v, int line) {
  if (key == "batch_size") {
    t.batch_size = parse_uint(v, line);
    if (t.batch_size == 0) throw ConfigError("batch_size must be positive", line);
  } else if (key == "iterations") {
    t.iterations = parse_uint(v, line);
  } else if (key == "base_lr") {
    t.base_lr = parse_double(v, line);
  } else if (key == "lr_policy") {
    if (v == "inv") t.policy = LrPolicy::inv;
    else if (v == "fixed") t.policy = LrPolicy::fixed;
    else throw ConfigError("lr_policy must be inv or fixed, got '" + v + "'", line);
  } else if (key == "lr_gamma") {
    t.lr_gamma = parse_double(v, line);
  } else if (key == "lr_power") {
    t.lr_power = parse_double(v, line);
  } else if (key == "momentum") {
    t.momentum = parse_double(v, line);
    if (t.momentum < 0.0 || t.momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)", line);
  } else if (key == "nu") {
    if (v == "auto") {
      t.nu.reset();
    } else {
      t.nu = parse_double(v, line);
      if (*t.nu < 0.0) throw ConfigError("nu must be non-negative", line);
    }
  } else if (key == "kl_reduction") {
    t.kl_reduction = parse_double(v, line);
    if (t.kl_reduction <= 0.0) throw ConfigError("kl_reduction must be positive", line);
  } else if (key == "kappa") {
    t.kappa = parse_double(v, line);
    if (t.kappa <= 0.0) throw ConfigError("kappa must be positive", line);
  } else if (key == "log_every") {
    t.log_every = parse_uint(v, line);
  } else if (key == "monitor_examples") {
    t.monitor_examples = parse_uint(v, line);
  } else {
    throw ConfigError("unknown key '" + key + "' in [train]", line);
  }
}

void apply_eval(EvalConfig& e, const std::string& key, const std::string& v, int line) {
  if (key == "draws") {
    e.draws = parse_uint(v, line);
    if (e.draws == 0) throw ConfigError("draws must be positive", line);
  } else if (key == "coverages") {
    e.coverages.clear();
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const double c = parse_double(trim(item), line);
      if (!(c > 0.0 && c < 1.0)) throw ConfigError("coverages must lie in (0, 1)", line);
      e.coverages.push_back(c);
    }
    if (e.coverages.empty()) throw ConfigError("coverages must not be empty", line);
  } else if (key == "seed") {
    e.seed = parse_uint(v, line);
  } else {
    throw ConfigError("unknown key '" + key + "' in [eval]", line);
  }
}

void apply_layer(LayerSpec& s, const std::string& key, const std::string& v, int line) {
  if (key == "kind") s.kind = parse_kind(v, line);
  else if (key == "outputs") s.outputs = parse_uint(v, line);
  else if (key == "kernel") s.kernel = parse_uint(v, line);
  else if (key == "stride") s.stride = parse_uint(v, line);
  else if (key == "padding") s.padding = parse_uint(v, line);
  else if (key == "rate") s.dropout_rate = parse_double(v, line);
  else if (key == "prior_std") s.prior_std = parse_double(v, line);
  else if (key == "bias_prior_std") s.bias_prior_std = parse_double(v, line);
  else if (key == "weight_decay") s.weight_decay = parse_double(v, line);
  else throw ConfigError("unknown key '" + key + "' in [layer]", line);
}

void check_layer(const LayerSpec& s, int line) {
  switch (s.kind) {
    case LayerKind::dense:
      if (s.outputs == 0) throw ConfigError("dense layer needs outputs > 0", line);
      break;
    case LayerKind::conv:
      if (s.outputs == 0 || s.kernel == 0) throw ConfigError("conv layer needs outputs and kernel", line);
      if (s.stride == 0) throw ConfigError("stride must be positive", line);
      break;
    case LayerKind::maxpool:
      if (s.kernel == 0 || s.stride == 0) throw ConfigError("maxpool needs kernel and stride", line);
      break;
    case LayerKind::dropout:
      if (!(s.dropout_rate >= 0.0 && s.dropout_rate < 1.0)) throw ConfigError("rate must lie in [0, 1)", line);
      break;
    case LayerKind::relu:
      break;
  }
  if (s.prior_std <= 0.0 || s.bias_prior_std <= 0.0) throw ConfigError("prior standard deviations must be positive", line);
}

std::string resolve(const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path base = fs::path(dir) / name;
  if (fs::exists(base)) return base.string();
  if (fs::exists(base.string() + ".gz")) return base.string() + ".gz";
  throw DataError("missing data file " + base.string() + "[.gz]");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  c.layers.clear();
  std::string section;
  std::set<std::string> seen;  // section.key, reset per [layer]
  std::vector<int> layer_lines;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("malformed section header", line);
      section = trim(s.substr(1, s.size() - 2));
      if (section != "run" && section != "data" && section != "train" && section != "eval" && section != "layer") {
        throw ConfigError("unknown section [" + section + "]", line);
      }
      if (section == "layer") {
        c.layers.emplace_back();
        layer_lines.push_back(line);
        std::erase_if(seen, [](const std::string& k) { return k.starts_with("layer."); });
      } else if (seen.contains("[" + section + "]")) {
        throw ConfigError("section [" + section + "] appears twice", line);
      }
      seen.insert("[" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value", line);
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError("empty key", line);
    if (section.empty()) throw ConfigError("key '" + key + "' outside any section", line);
    if (!seen.insert(section + "." + key).second) throw ConfigError("duplicate key '" + key + "'", line);
    if (section == "run") apply_run(c, key, value, line);
    else if (section == "data") apply_data(c.data, key, value, line);
    else if (section == "train") apply_train(c.train, key, value, line);
    else if (section == "eval") apply_eval(c.eval, key, value, line);
    else apply_layer(c.layers.back(), key, value, line);
  }
  for (std::size_t i = 0; i < c.layers.size(); ++i) check_layer(c.layers[i], layer_lines[i]);
  if (c.layers.empty()) throw ConfigError("no [layer] sections");
  if (c.layers.back().kind != LayerKind::dense) throw ConfigError("the last layer must be dense", layer_lines.back());
  c.train.seed = c.seed;
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& c) {
  std::ostringstream os;
  os << "[run]\n";
  os << "id = " << c.id << '\n';
  os << "mode = " << to_string(c.mode) << '\n';
  os << "seed = " << c.seed << "\n\n";

  const auto& d = c.data;
  os << "[data]\n";
  os << "format = " << format_name(d.format) << '\n';
  os << "dir = " << d.dir << '\n';
  os << "train_per_class = " << d.train_per_class << '\n';
  os << "train_count = " << d.train_count << '\n';
  os << "test_count = " << d.test_count << '\n';
  os << "blob_classes = " << d.blob_classes << '\n';
  os << "blob_per_class = " << d.blob_per_class << '\n';
  os << "blob_test_per_class = " << d.blob_test_per_class << '\n';
  os << "blob_dims = " << d.blob_dims << '\n';
  os << "blob_separation = " << fmt(d.blob_separation) << "\n\n";

  const auto& t = c.train;
  os << "[train]\n";
  os << "batch_size = " << t.batch_size << '\n';
  os << "iterations = " << t.iterations << '\n';
  os << "base_lr = " << fmt(t.base_lr) << '\n';
  os << "lr_policy = " << (t.policy == LrPolicy::inv ? "inv" : "fixed") << '\n';
  os << "lr_gamma = " << fmt(t.lr_gamma) << '\n';
  os << "lr_power = " << fmt(t.lr_power) << '\n';
  os << "momentum = " << fmt(t.momentum) << '\n';
  os << "nu = " << (t.nu ? fmt(*t.nu) : std::string("auto")) << '\n';
  os << "kl_reduction = " << fmt(t.kl_reduction) << '\n';
  os << "kappa = " << fmt(t.kappa) << '\n';
  os << "log_every = " << t.log_every << '\n';
  os << "monitor_examples = " << t.monitor_examples << "\n\n";

  os << "[eval]\n";
  os << "draws = " << c.eval.draws << '\n';
  os << "coverages = ";
  for (std::size_t i = 0; i < c.eval.coverages.size(); ++i) os << (i ? ", " : "") << fmt(c.eval.coverages[i]);
  os << '\n';
  os << "seed = " << c.eval.seed << '\n';

  for (const auto& s : c.layers) {
    os << "\n[layer]\n";
    os << "kind = " << to_string(s.kind) << '\n';
    os << "outputs = " << s.outputs << '\n';
    os << "kernel = " << s.kernel << '\n';
    os << "stride = " << s.stride << '\n';
    os << "padding = " << s.padding << '\n';
    os << "rate = " << fmt(s.dropout_rate) << '\n';
    os << "prior_std = " << fmt(s.prior_std) << '\n';
    os << "bias_prior_std = " << fmt(s.bias_prior_std) << '\n';
    os << "weight_decay = " << fmt(s.weight_decay) << '\n';
  }
  return os.str();
}

void apply_env_overrides(RunConfig& config) {
  if (const char* dir = std::getenv("CBNN_DATA_DIR"); dir != nullptr && *dir != '\0') config.data.dir = dir;
}

std::pair<Dataset, Dataset> load_data(const DataConfig& d, std::uint64_t seed) {
  Dataset train, test;
  switch (d.format) {
    case DataFormat::mnist:
      train = load_mnist_idx(resolve(d.dir, "train-images-idx3-ubyte"), resolve(d.dir, "train-labels-idx1-ubyte"));
      test = load_mnist_idx(resolve(d.dir, "t10k-images-idx3-ubyte"), resolve(d.dir, "t10k-labels-idx1-ubyte"));
      break;
    case DataFormat::cifar10: {
      std::vector<std::string> batches;
      for (int i = 1; i <= 5; ++i) batches.push_back(resolve(d.dir, "data_batch_" + std::to_string(i) + ".bin"));
      train = load_cifar10_bin(batches);
      test = load_cifar10_bin({resolve(d.dir, "test_batch.bin")});
      break;
    }
    case DataFormat::blobs:
      train = synthetic_blobs(d.blob_classes, d.blob_per_class, d.blob_dims, d.blob_separation, seed);
      test = synthetic_blobs(d.blob_classes, d.blob_test_per_class, d.blob_dims, d.blob_separation,
                             seed ^ 0x74657374ULL);
      break;
  }
  if (d.train_per_class > 0) train = first_k_per_class(train, d.train_per_class);
  if (d.train_count > 0) train = slice(train, 0, d.train_count);
  if (d.test_count > 0) test = slice(test, 0, d.test_count);
  return {std::move(train), std::move(test)};
}

}  // namespace cbnn
