#include "edje/checkpoint.hpp"

#include <map>

#include "binary_io.hpp"
#include "edje/errors.hpp"

namespace edje {

namespace {

constexpr char kMagic[4] = {'E', 'D', 'J', 'C'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.put_string(t.name);
    w.put(static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t dim : t.value.shape()) w.put(static_cast<std::uint64_t>(dim));
    w.put_bytes(t.value.raw(), t.value.size() * sizeof(double));
  }
  w.put(detail::fnv1a(w.bytes().data(), w.size()));
  detail::write_file_atomic(path, w.bytes());
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path, "checkpoint");
  const std::string what = path.string();
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(what + ": not a tensor checkpoint (bad magic)");
  }
  if (bytes.size() < 20) throw FormatError(what + ": truncated header");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != detail::fnv1a(bytes.data(), bytes.size() - 8)) {
    throw CorruptionError(what + ": checksum mismatch (file damaged or truncated)");
  }
  detail::ByteReader r(bytes.data(), bytes.size() - 8, what);
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.get_string("tensor name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 2) throw FormatError(what + ": tensor '" + t.name + "' has rank " + std::to_string(rank));
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto dim = r.get<std::uint64_t>("dimension");
      if (dim == 0 || dim > (std::uint64_t{1} << 40)) {
        throw FormatError(what + ": tensor '" + t.name + "' has dimension " + std::to_string(dim));
      }
      shape.push_back(static_cast<std::size_t>(dim));
      n *= shape.back();
    }
    const auto* p = r.take(n * sizeof(double), "payload");
    std::vector<double> data(n);
    std::memcpy(data.data(), p, n * sizeof(double));
    t.value = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(t));
  }
  if (!r.at_end()) {
    throw FormatError(what + ": trailing bytes at byte offset " + std::to_string(r.position()));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ConstNamedParams& params) {
  std::vector<NamedTensor> tensors;
  for (const auto& [name, p] : params) tensors.push_back({name, p->value});
  save_tensors(path, tensors);
}

void save_checkpoint(const std::filesystem::path& path, const NamedParams& params) {
  std::vector<NamedTensor> tensors;
  for (const auto& [name, p] : params) tensors.push_back({name, p->value});
  save_tensors(path, tensors);
}

void load_checkpoint(const std::filesystem::path& path, const NamedParams& params) {
  std::map<std::string, Tensor> stored;
  for (auto& t : load_tensors(path)) {
    if (!stored.emplace(t.name, std::move(t.value)).second) {
      throw FormatError(path.string() + ": duplicate tensor '" + t.name + "'");
    }
  }
  for (const auto& [name, p] : params) {
    auto it = stored.find(name);
    if (it == stored.end()) throw NotFoundError(path.string() + ": missing tensor '" + name + "'");
    if (it->second.shape() != p->value.shape()) {
      throw DimensionError(path.string() + ": tensor '" + name + "' has shape " +
                           shape_string(it->second.shape()) + ", model expects " +
                           shape_string(p->value.shape()));
    }
  }
  if (stored.size() != params.size()) {
    for (const auto& [name, t] : stored) {
      bool known = false;
      for (const auto& entry : params) known = known || entry.first == name;
      if (!known) throw ConfigError(path.string() + ": unexpected tensor '" + name + "'");
    }
  }
  for (const auto& [name, p] : params) p->value = std::move(stored.at(name));
}

}  // namespace edje
