#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "epca/network.hpp"

namespace epca {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host byte order");

namespace {

constexpr char kMagic[4] = {'E', 'P', 'C', 'K'};

struct Entry {
  std::string name;
  DType dtype;
  Shape dims;
  std::vector<char> payload;
};

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
bool get(std::istream& is, V& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(V)));
}

template <typename T>
void write_entry(std::ostream& os, const std::string& name, const Shape& dims, const T* data, std::size_t count) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put<std::int64_t>(os, d);
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
}

// Reads complete entries; stops quietly at a truncated one.
std::map<std::string, Entry> read_entries(const std::string& path, std::uint32_t& declared, bool& truncated) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw LoadError("'" + path + "' is not an EPCK checkpoint (bad magic)");
  std::uint32_t version = 0;
  if (!get(is, version)) throw LoadError("checkpoint '" + path + "' truncated in header");
  if (version != kCheckpointVersion)
    throw LoadError("checkpoint version " + std::to_string(version) + " not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  if (!get(is, declared)) throw LoadError("checkpoint '" + path + "' truncated in header");
  std::map<std::string, Entry> out;
  truncated = false;
  for (std::uint32_t i = 0; i < declared; ++i) {
    Entry e;
    std::uint32_t len = 0, rank = 0;
    std::uint8_t dt = 0;
    if (!get(is, len) || len > (1u << 16)) {
      truncated = true;
      break;
    }
    e.name.resize(len);
    if (!is.read(e.name.data(), len) || !get(is, dt) || !get(is, rank) || rank > 8) {
      truncated = true;
      break;
    }
    if (dt > 1) throw LoadError("checkpoint entry '" + e.name + "' has unknown dtype code " + std::to_string(dt));
    e.dtype = static_cast<DType>(dt);
    e.dims.resize(rank);
    bool ok = true;
    for (auto& d : e.dims) ok = ok && get(is, d) && d >= 0;
    if (!ok) {
      truncated = true;
      break;
    }
    const std::size_t bytes = static_cast<std::size_t>(numel_of(e.dims)) * (e.dtype == DType::f32 ? 4 : 8);
    e.payload.resize(bytes);
    if (!is.read(e.payload.data(), static_cast<std::streamsize>(bytes))) {
      truncated = true;
      break;
    }
    out.emplace(e.name, std::move(e));
  }
  return out;
}

}  // namespace

template <typename T>
void save_checkpoint(Network<T>& net, const std::string& path) {
  auto reg = net.registry();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(reg.params.size() + reg.buffers.size()));
  for (const auto& p : reg.params) write_entry(os, p.name, p.tensor.shape(), p.tensor.ptr(), p.tensor.data().size());
  for (const auto& b : reg.buffers)
    write_entry(os, b.name, Shape{static_cast<std::int64_t>(b.values->size())}, b.values->data(), b.values->size());
  if (!os) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

template <typename T>
LoadReport load_checkpoint(Network<T>& net, const std::string& path, LoadMode mode) {
  std::uint32_t declared = 0;
  bool truncated = false;
  auto entries = read_entries(path, declared, truncated);
  auto reg = net.registry();

  struct Target {
    std::string name;
    ParamRole role;
    Shape shape;
    T* data;
  };
  std::vector<Target> targets;
  for (auto& p : reg.params) targets.push_back({p.name, p.role, p.tensor.shape(), p.tensor.data().data()});
  for (auto& b : reg.buffers)
    targets.push_back({b.name, b.role, Shape{static_cast<std::int64_t>(b.values->size())}, b.values->data()});

  // Validate everything before touching the model.
  LoadReport report;
  std::vector<std::pair<const Target*, const Entry*>> plan;
  for (const auto& t : targets) {
    if (mode == LoadMode::backbone_only && t.role != ParamRole::backbone) {
      report.skipped.push_back(t.name);
      continue;
    }
    auto it = entries.find(t.name);
    if (it == entries.end())
      throw LoadError("checkpoint '" + path + "' is missing tensor '" + t.name + "'" +
                      (truncated ? " (file truncated)" : ""));
    const auto& e = it->second;
    if (e.dtype != dtype_of<T>())
      throw LoadError("tensor '" + t.name + "' stored as " + dtype_name(e.dtype) + ", model uses " +
                      dtype_name(dtype_of<T>()));
    if (e.dims != t.shape)
      throw LoadError("tensor '" + t.name + "' has shape " + to_string(e.dims) + " in checkpoint, model expects " +
                      to_string(t.shape));
    plan.emplace_back(&t, &e);
  }
  for (auto [t, e] : plan) std::memcpy(t->data, e->payload.data(), e->payload.size());
  report.restored = plan.size();
  return report;
}

template void save_checkpoint(Network<float>&, const std::string&);
template void save_checkpoint(Network<double>&, const std::string&);
template LoadReport load_checkpoint(Network<float>&, const std::string&, LoadMode);
template LoadReport load_checkpoint(Network<double>&, const std::string&, LoadMode);

}  // namespace epca
