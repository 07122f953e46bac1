#include "radcorrect/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "radcorrect/errors.hpp"

namespace radcorrect {

namespace {

constexpr char kMagic[8] = {'R', 'A', 'D', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("checkpoint truncated");
  return v;
}
std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("checkpoint truncated");
  return v;
}
std::string get_str(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  if (n > (1u << 24)) throw DataError("checkpoint string length implausible");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw DataError("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(kMagic, sizeof kMagic);
  put_u64(out, ckpt.world_fingerprint);
  put_str(out, ckpt.kind);
  put_str(out, ckpt.config_json);
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const NamedTensorData& t : ckpt.tensors) {
    put_str(out, t.name);
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    std::size_t expect = 1;
    for (std::size_t d : t.shape) {
      put_u64(out, d);
      expect *= d;
    }
    if (expect != t.data.size())
      throw DataError("checkpoint tensor " + t.name + " has inconsistent shape");
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!out) throw DataError("write failure on " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char magic[8] = {};
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw DataError(path + " is not a supported checkpoint file");
  Checkpoint ckpt;
  ckpt.world_fingerprint = get_u64(in);
  ckpt.kind = get_str(in);
  ckpt.config_json = get_str(in);
  const std::uint32_t count = get_u32(in);
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensorData t;
    t.name = get_str(in);
    const std::uint32_t ndim = get_u32(in);
    if (ndim > 4) throw DataError("checkpoint tensor rank implausible");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(static_cast<std::size_t>(get_u64(in)));
      n *= t.shape.back();
    }
    if (n > (1u << 28)) throw DataError("checkpoint tensor size implausible");
    t.data.resize(n);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw DataError("checkpoint truncated");
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

std::vector<NamedTensorData> snapshot(const ParamSet& params) {
  std::vector<NamedTensorData> out;
  out.reserve(params.items().size());
  for (const auto& [name, tensor] : params.items())
    out.push_back({name, tensor.shape(), tensor.value()});
  return out;
}

void restore_into(const std::vector<NamedTensorData>& tensors, ParamSet& params) {
  if (tensors.size() != params.items().size())
    throw DataError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model has " +
                    std::to_string(params.items().size()));
  for (const NamedTensorData& t : tensors) {
    Tensor dst = params.find(t.name);  // DataError when absent
    if (dst.shape() != t.shape) throw DataError("checkpoint shape mismatch for " + t.name);
    dst.mutable_value() = t.data;
  }
}

}  // namespace radcorrect
