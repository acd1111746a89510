#include "fusion3d/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fusion3d/errors.hpp"

namespace fusion3d {

namespace {

constexpr char kMagic[4] = {'G', 'F', '3', 'D'};

class Writer {
 public:
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void real(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) {
    uint<std::uint64_t>(s.size());
    out_ += s;
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  double real(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

void write_values(Writer& w, const Tensor& t) {
  for (double v : t.storage()) w.real(v);
}

void read_values(Reader& r, Tensor& t, const char* what) {
  r.need(t.size() * 8, what);
  for (auto& v : t.storage()) v = r.real(what);
}

}  // namespace

Checkpoint Checkpoint::capture(const ParamStore& store, const std::string& config_json, const AdamW* optimizer,
                               const std::string& state_json) {
  Checkpoint c;
  c.config_json = config_json;
  c.state_json = state_json;
  for (const auto& [name, p] : store) c.tensors.emplace(name, p.value);
  if (optimizer) {
    c.optimizer_step = optimizer->steps();
    for (const auto& [name, p] : store) {
      auto it = optimizer->moments().find(name);
      c.moments.emplace(name, it != optimizer->moments().end()
                                  ? it->second
                                  : AdamW::Moments{Tensor::zeros_like(p.value), Tensor::zeros_like(p.value)});
    }
  }
  return c;
}

std::string Checkpoint::serialize() const {
  Writer w;
  w.raw(kMagic, 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.bytes(config_json);
  w.bytes(state_json);
  w.uint<std::uint64_t>(tensors.size());
  for (const auto& [name, t] : tensors) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) w.uint<std::uint64_t>(d);
    write_values(w, t);
  }
  w.uint<std::uint8_t>(optimizer_step ? 1 : 0);
  if (optimizer_step) {
    w.uint<std::uint64_t>(*optimizer_step);
    for (const auto& [name, _] : tensors) {
      const auto& m = moments.at(name);
      write_values(w, m.m);
      write_values(w, m.v);
    }
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(4, "magic") != std::string(kMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_json = r.bytes(r.uint<std::uint64_t>("config length"), "config");
  c.state_json = r.bytes(r.uint<std::uint64_t>("state length"), "state");
  const auto count = r.uint<std::uint64_t>("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.uint<std::uint32_t>("tensor name length"), "tensor name");
    const auto rank = r.uint<std::uint32_t>("tensor rank");
    std::vector<std::size_t> shape;
    std::size_t total = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(r.uint<std::uint64_t>("tensor shape"));
      total *= shape.back();
    }
    r.need(total * 8, "tensor values");
    Tensor t(shape);
    read_values(r, t, "tensor values");
    if (!c.tensors.emplace(name, std::move(t)).second) throw CheckpointError("duplicate tensor '" + name + "'");
  }
  if (r.uint<std::uint8_t>("optimizer flag")) {
    c.optimizer_step = r.uint<std::uint64_t>("optimizer step");
    for (const auto& [name, t] : c.tensors) {
      AdamW::Moments m{Tensor::zeros_like(t), Tensor::zeros_like(t)};
      read_values(r, m.m, "optimizer moments");
      read_values(r, m.v, "optimizer moments");
      c.moments.emplace(name, std::move(m));
    }
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

void Checkpoint::restore(ParamStore& store) const {
  for (const auto& [name, t] : tensors) {
    if (!store.contains(name)) throw CheckpointError("checkpoint tensor '" + name + "' is not a model parameter");
  }
  for (auto& [name, p] : store) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    if (!it->second.same_shape(p.value)) {
      throw CheckpointError("tensor '" + name + "' has shape " + it->second.shape_string() + ", model expects " +
                            p.value.shape_string());
    }
  }
  for (auto& [name, p] : store) p.value = tensors.at(name);
}

void Checkpoint::restore_optimizer(AdamW& optimizer) const {
  if (!optimizer_step) throw CheckpointError("checkpoint has no optimizer state");
  optimizer.restore(*optimizer_step, moments);
}

}  // namespace fusion3d
