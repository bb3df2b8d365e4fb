#include "metaloop/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace metaloop {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

constexpr char kMagic[4] = {'M', 'L', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_i64(std::ostream& out, std::int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_params(std::ostream& out, const ParameterSet& params) {
  put_u32(out, static_cast<std::uint32_t>(params.group_count()));
  for (const ParamGroup& g : params.groups()) {
    put_string(out, g.name);
    put_u32(out, static_cast<std::uint32_t>(g.tensors.size()));
    for (const NamedTensor& t : g.tensors) {
      put_string(out, t.name);
      put_u32(out, static_cast<std::uint32_t>(t.value.shape().size()));
      for (std::size_t e : t.value.shape()) put_u64(out, e);
      auto v = t.value.values();
      out.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
  }
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::int64_t get_i64(std::istream& in) {
  std::int64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string get_string(std::istream& in) {
  const std::uint32_t len = get_u32(in);
  if (len > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

ParameterSet get_params(std::istream& in) {
  ParameterSet params;
  const std::uint32_t groups = get_u32(in);
  for (std::uint32_t gi = 0; gi < groups; ++gi) {
    ParamGroup g;
    g.name = get_string(in);
    const std::uint32_t tensors = get_u32(in);
    for (std::uint32_t ti = 0; ti < tensors; ++ti) {
      const std::string name = get_string(in);
      const std::uint32_t rank = get_u32(in);
      if (rank > 16) throw std::runtime_error("checkpoint: implausible rank");
      Shape shape(rank);
      for (std::uint32_t d = 0; d < rank; ++d) {
        shape[d] = static_cast<std::size_t>(get_u64(in));
      }
      std::vector<double> values(numel(shape));
      in.read(reinterpret_cast<char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
      if (!in) throw std::runtime_error("checkpoint: truncated tensor data");
      g.tensors.push_back({name, Tensor(std::move(shape), std::move(values))});
    }
    params.add_group(std::move(g));
  }
  return params;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_params(out, ckpt.params);
  const std::uint8_t has_state = ckpt.opt_state.has_value() ? 1 : 0;
  out.write(reinterpret_cast<const char*>(&has_state), 1);
  if (ckpt.opt_state) {
    const OptState& s = *ckpt.opt_state;
    const std::uint8_t kind = static_cast<std::uint8_t>(s.kind);
    out.write(reinterpret_cast<const char*>(&kind), 1);
    put_i64(out, s.step);
    put_u32(out, static_cast<std::uint32_t>(s.slots.size()));
    for (const ParameterSet& slot : s.slots) put_params(out, slot);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const std::uint32_t version = get_u32(in);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.params = get_params(in);
  std::uint8_t has_state = 0;
  in.read(reinterpret_cast<char*>(&has_state), 1);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  if (has_state) {
    OptState s;
    std::uint8_t kind = 0;
    in.read(reinterpret_cast<char*>(&kind), 1);
    if (!in || kind > 2) throw std::runtime_error("checkpoint: bad optimizer kind");
    s.kind = static_cast<OptimizerKind>(kind);
    s.step = get_i64(in);
    const std::uint32_t slots = get_u32(in);
    for (std::uint32_t i = 0; i < slots; ++i) s.slots.push_back(get_params(in));
    ckpt.opt_state = std::move(s);
  }
  return ckpt;
}

}  // namespace metaloop
