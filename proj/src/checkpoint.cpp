// Binary checkpoint: little-endian, magic "CBNN", version, layer table, parameters,
// optimizer state.

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cbnn/errors.hpp"
#include "cbnn/net.hpp"

namespace cbnn {

namespace {

constexpr char kMagic[4] = {'C', 'B', 'N', 'N'};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void vec(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void vec_into(std::span<double> out, const char* what) {
    const std::uint64_t n = u64();
    if (n != out.size()) throw CorruptCheckpoint(std::string("checkpoint: length mismatch for ") + what);
    for (auto& x : out) x = f64();
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CorruptCheckpoint("checkpoint: unexpected end of data");
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_group(Writer& w, const VariationalGroup& g) {
  w.vec(g.params.m);
  w.f64(g.params.delta);
  w.f64(g.params.gamma);
  w.vec(g.prior.mu);
  w.f64(g.prior.zeta);
}

void read_group(Reader& r, VariationalGroup& g) {
  r.vec_into(g.params.m, "variational mean");
  g.params.delta = r.f64();
  g.params.gamma = r.f64();
  r.vec_into(g.prior.mu, "prior mean");
  g.prior.zeta = r.f64();
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(Checkpoint& checkpoint) {
  Net& net = checkpoint.net;
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(net.mode()));
  w.u32(static_cast<std::uint32_t>(net.input_shape().channels));
  w.u32(static_cast<std::uint32_t>(net.input_shape().height));
  w.u32(static_cast<std::uint32_t>(net.input_shape().width));
  w.u32(static_cast<std::uint32_t>(net.specs().size()));
  for (const auto& s : net.specs()) {
    w.u8(static_cast<std::uint8_t>(s.kind));
    w.u64(s.outputs);
    w.u64(s.kernel);
    w.u64(s.stride);
    w.u64(s.padding);
    w.f64(s.dropout_rate);
    w.f64(s.prior_std);
    w.f64(s.bias_prior_std);
    w.f64(s.weight_decay);
  }
  for (auto& layer : net.layers()) {
    auto* p = dynamic_cast<ParametricLayer*>(layer.get());
    if (p == nullptr) continue;
    if (p->bayesian()) {
      write_group(w, p->weight_group());
      write_group(w, p->bias_group());
    } else {
      w.vec(p->weights());
      w.vec(p->biases());
    }
  }
  w.u32(static_cast<std::uint32_t>(checkpoint.velocity.size()));
  for (const auto& v : checkpoint.velocity) w.vec(v);
  w.u64(checkpoint.iteration);
  w.u64(checkpoint.seed);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw CorruptCheckpoint("checkpoint: file too short");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic bytes");
  Reader r(bytes.subspan(4));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint8_t mode_byte = r.u8();
  if (mode_byte > 1) throw CorruptCheckpoint("checkpoint: unknown mode");
  Shape3 input;
  input.channels = r.u32();
  input.height = r.u32();
  input.width = r.u32();
  const std::uint32_t layer_count = r.u32();
  if (layer_count == 0 || layer_count > 4096) throw CorruptCheckpoint("checkpoint: implausible layer count");
  std::vector<LayerSpec> specs(layer_count);
  for (auto& s : specs) {
    const std::uint8_t kind = r.u8();
    if (kind < 1 || kind > 5) throw CorruptCheckpoint("checkpoint: unknown layer kind");
    s.kind = static_cast<LayerKind>(kind);
    s.outputs = r.u64();
    s.kernel = r.u64();
    s.stride = r.u64();
    s.padding = r.u64();
    s.dropout_rate = r.f64();
    s.prior_std = r.f64();
    s.bias_prior_std = r.f64();
    s.weight_decay = r.f64();
  }
  Net net = [&] {
    try {
      return Net(input, specs, static_cast<Mode>(mode_byte), 0);
    } catch (const ShapeMismatch& e) {
      throw CorruptCheckpoint(std::string("checkpoint: inconsistent layer table: ") + e.what());
    }
  }();
  for (auto& layer : net.layers()) {
    auto* p = dynamic_cast<ParametricLayer*>(layer.get());
    if (p == nullptr) continue;
    if (p->bayesian()) {
      read_group(r, p->weight_group());
      read_group(r, p->bias_group());
    } else {
      r.vec_into(p->weights(), "weights");
      r.vec_into(p->biases(), "biases");
    }
  }
  Checkpoint ck(std::move(net));
  const std::uint32_t blocks = r.u32();
  if (blocks != ck.velocity.size()) throw CorruptCheckpoint("checkpoint: optimizer state does not match network");
  for (auto& v : ck.velocity) r.vec_into(v, "velocity");
  ck.iteration = r.u64();
  ck.seed = r.u64();
  if (!r.done()) throw CorruptCheckpoint("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(Checkpoint& checkpoint, const std::string& path) {
  const auto bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace cbnn
