#include "edje/feature_store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <limits>

#include "binary_io.hpp"
#include "edje/errors.hpp"

namespace edje {

namespace {

constexpr char kStoreMagic[4] = {'E', 'D', 'J', 'F'};
constexpr char kDumpMagic[4] = {'E', 'D', 'J', 'R'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 8;

std::string errno_text() { return std::strerror(errno); }

bool valid_width(std::uint16_t w) { return w == 16 || w == 64; }

void pwrite_all(int fd, const std::vector<std::uint8_t>& bytes, std::uint64_t offset,
                const std::filesystem::path& path) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::pwrite(fd, bytes.data() + done, bytes.size() - done,
                               static_cast<off_t>(offset + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("write to " + path.string() + " failed: " + errno_text());
    }
    done += static_cast<std::size_t>(n);
  }
}

std::vector<std::uint8_t> pread_exact(int fd, std::size_t n, std::uint64_t offset,
                                      const std::filesystem::path& path) {
  std::vector<std::uint8_t> out(n);
  std::size_t done = 0;
  while (done < n) {
    const ssize_t got = ::pread(fd, out.data() + done, n - done, static_cast<off_t>(offset + done));
    if (got < 0) {
      if (errno == EINTR) continue;
      throw IoError("read from " + path.string() + " failed: " + errno_text());
    }
    if (got == 0) {
      throw FormatError(path.string() + ": truncated at byte offset " + std::to_string(offset + done));
    }
    done += static_cast<std::size_t>(got);
  }
  return out;
}

std::uint64_t file_size(int fd, const std::filesystem::path& path) {
  struct stat st {};
  if (::fstat(fd, &st) != 0) throw IoError("stat " + path.string() + ": " + errno_text());
  return static_cast<std::uint64_t>(st.st_size);
}

int acquire_lock(const std::filesystem::path& store, bool exclusive) {
  auto lock_path = store;
  lock_path += ".lock";
  const int fd = ::open(lock_path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("cannot open lock file " + lock_path.string() + ": " + errno_text());
  if (::flock(fd, (exclusive ? LOCK_EX : LOCK_SH) | LOCK_NB) != 0) {
    ::close(fd);
    throw ConflictError(store.string() + (exclusive ? " is open by another reader or writer"
                                                    : " is being written"));
  }
  return fd;
}

void release(int& fd) {
  if (fd >= 0) ::close(fd);
  fd = -1;
}

std::vector<std::uint8_t> serialize_record(const FeatureRecord& r) {
  detail::ByteWriter w;
  w.put_string(r.id);
  w.put(r.m);
  w.put(r.d);
  w.put(r.width_bits);
  w.put_bytes(r.payload.data(), r.payload.size());
  w.put(detail::fnv1a(w.bytes().data(), w.size()));
  return std::move(w.bytes());
}

std::uint64_t payload_bytes(std::uint32_t m, std::uint32_t d, std::uint16_t width) {
  return std::uint64_t{m} * d * (width / 8);
}

void validate_record(const FeatureRecord& r) {
  if (r.id.empty()) throw FormatError("feature record with empty id");
  if (!valid_width(r.width_bits)) {
    throw FormatError("record '" + r.id + "': width " + std::to_string(r.width_bits) +
                      " bits is not 16 or 64");
  }
  if (r.m == 0 || r.d == 0) throw FormatError("record '" + r.id + "': m and d must be positive");
  if (r.payload.size() != payload_bytes(r.m, r.d, r.width_bits)) {
    throw FormatError("record '" + r.id + "': payload of " + std::to_string(r.payload.size()) +
                      " bytes does not match " + std::to_string(r.m) + "x" + std::to_string(r.d) +
                      " at " + std::to_string(r.width_bits) + " bits");
  }
}

struct ParsedStore {
  std::vector<ManifestEntry> entries;
  std::uint64_t manifest_offset = 0;
};

ParsedStore parse_store(int fd, std::uint64_t size, const std::filesystem::path& path) {
  const std::string what = path.string();
  if (size < kHeaderBytes + 8) throw FormatError(what + ": too short to be a feature store");
  const auto header = pread_exact(fd, kHeaderBytes, 0, path);
  if (std::memcmp(header.data(), kStoreMagic, 4) != 0) throw FormatError(what + ": bad magic");
  std::uint32_t version;
  std::memcpy(&version, header.data() + 4, 4);
  if (version != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));

  const auto trailer = pread_exact(fd, 8, size - 8, path);
  ParsedStore out;
  std::memcpy(&out.manifest_offset, trailer.data(), 8);
  if (out.manifest_offset < kHeaderBytes || out.manifest_offset > size - 8) {
    throw FormatError(what + ": manifest offset " + std::to_string(out.manifest_offset) +
                      " outside file of " + std::to_string(size) + " bytes");
  }
  const auto bytes = pread_exact(fd, size - 8 - out.manifest_offset, out.manifest_offset, path);
  if (bytes.size() < 12) throw FormatError(what + ": manifest truncated");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != detail::fnv1a(bytes.data(), bytes.size() - 8)) {
    throw CorruptionError(what + ": manifest checksum mismatch");
  }
  detail::ByteReader r(bytes.data(), bytes.size() - 8, what, out.manifest_offset);
  const auto count = r.get<std::uint32_t>("manifest count");
  std::uint64_t previous = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    ManifestEntry e;
    e.id = r.get_string("manifest id");
    e.offset = r.get<std::uint64_t>("manifest offset");
    e.m = r.get<std::uint32_t>("manifest m");
    e.d = r.get<std::uint32_t>("manifest d");
    e.width_bits = r.get<std::uint16_t>("manifest width");
    e.checksum = r.get<std::uint64_t>("manifest checksum");
    if (e.offset < kHeaderBytes || (i > 0 && e.offset <= previous) || e.offset >= out.manifest_offset) {
      throw CorruptionError(what + ": manifest offsets not strictly increasing at entry " + std::to_string(i));
    }
    previous = e.offset;
    out.entries.push_back(std::move(e));
  }
  if (!r.at_end()) throw FormatError(what + ": trailing bytes in manifest");
  return out;
}

}  // namespace

std::uint16_t narrow_half(double x) {
  const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
  if (std::isnan(x)) return 0x7e00;
  const double a = std::fabs(x);
  if (a >= 65520.0) return sign | 0x7c00;  // halfway to 2^16 and beyond round to infinity
  if (a < 0x1p-14) {
    // Subnormal: a multiple of 2^-24; the exact product is rounded to even.
    const auto q = static_cast<std::uint16_t>(std::nearbyint(a * 0x1p24));
    return sign | q;
  }
  int exp2 = 0;
  const double frac = std::frexp(a, &exp2);  // a = frac * 2^exp2, frac in [0.5, 1)
  int e = exp2 - 1;
  auto q = static_cast<std::uint32_t>(std::nearbyint((frac * 2.0 - 1.0) * 1024.0));
  if (q == 1024) {
    q = 0;
    ++e;
  }
  if (e > 15) return sign | 0x7c00;
  return static_cast<std::uint16_t>(sign | ((e + 15) << 10) | q);
}

double widen_half(std::uint16_t bits) {
  const double sign = (bits & 0x8000) ? -1.0 : 1.0;
  const int e = (bits >> 10) & 0x1f;
  const int q = bits & 0x3ff;
  if (e == 0) return sign * std::ldexp(q, -24);
  if (e == 31) return q ? std::numeric_limits<double>::quiet_NaN() : sign * HUGE_VAL;
  return sign * std::ldexp(1024 + q, e - 25);
}

Tensor round_to_half(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = widen_half(narrow_half(v));
  return out;
}

FeatureRecord FeatureRecord::from_tensor(std::string id, const Tensor& tokens, std::uint16_t width_bits) {
  if (!valid_width(width_bits)) {
    throw FormatError("width " + std::to_string(width_bits) + " bits is not 16 or 64");
  }
  FeatureRecord r;
  r.id = std::move(id);
  r.m = static_cast<std::uint32_t>(tokens.rows());
  r.d = static_cast<std::uint32_t>(tokens.cols());
  r.width_bits = width_bits;
  detail::ByteWriter w;
  if (width_bits == 64) {
    w.put_bytes(tokens.raw(), tokens.size() * sizeof(double));
  } else {
    for (double v : tokens.data()) w.put(narrow_half(v));
  }
  r.payload = std::move(w.bytes());
  return r;
}

Tensor FeatureRecord::to_tensor() const {
  validate_record(*this);
  std::vector<double> data(std::size_t{m} * d);
  if (width_bits == 64) {
    std::memcpy(data.data(), payload.data(), payload.size());
  } else {
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint16_t bits;
      std::memcpy(&bits, payload.data() + 2 * i, 2);
      data[i] = widen_half(bits);
    }
  }
  return Tensor({m, d}, std::move(data));
}

std::uint64_t FeatureRecord::checksum() const {
  const auto bytes = serialize_record(*this);
  std::uint64_t c;
  std::memcpy(&c, bytes.data() + bytes.size() - 8, 8);
  return c;
}

std::size_t storage_per_image(std::size_t m, std::size_t d, std::size_t width_bits) {
  if (m == 0 || d == 0 || width_bits == 0 || width_bits % 8 != 0) {
    throw ConfigError("storage_per_image: m, d and a whole-byte width must be positive");
  }
  return m * d * (width_bits / 8);
}

std::string format_kb(std::size_t bytes) {
  return std::to_string(static_cast<long long>(std::llround(static_cast<double>(bytes) / 1000.0))) + "kB";
}

std::string StorageStats::dtype() const {
  switch (width_bits) {
    case 16: return "float16";
    case 64: return "float64";
    default: return "none";
  }
}

FeatureStoreWriter::FeatureStoreWriter(const std::filesystem::path& path, Mode mode) : path_(path) {
  lock_fd_ = acquire_lock(path, true);
  try {
    const int flags = O_RDWR | O_CLOEXEC | (mode == Mode::kCreate ? O_CREAT | O_TRUNC : 0);
    fd_ = ::open(path.c_str(), flags, 0644);
    if (fd_ < 0) {
      if (errno == ENOENT) throw NotFoundError("feature store " + path.string() + " not found");
      throw IoError("cannot open " + path.string() + ": " + errno_text());
    }
    if (mode == Mode::kAppend) {
      ParsedStore parsed = parse_store(fd_, file_size(fd_, path), path);
      records_end_ = parsed.manifest_offset;
      entries_ = std::move(parsed.entries);
      for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].id, i);
    } else {
      detail::ByteWriter w;
      w.put_bytes(kStoreMagic, 4);
      w.put(kVersion);
      pwrite_all(fd_, w.bytes(), 0, path_);
      records_end_ = kHeaderBytes;
      write_manifest();
    }
  } catch (...) {
    release(fd_);
    release(lock_fd_);
    throw;
  }
}

FeatureStoreWriter::~FeatureStoreWriter() {
  try {
    close();
  } catch (...) {
  }
}

std::uint64_t FeatureStoreWriter::write(const FeatureRecord& record) {
  if (fd_ < 0) throw ConfigError("feature store writer is closed");
  validate_record(record);
  if (index_.contains(record.id)) {
    throw ConflictError("feature store " + path_.string() + " already holds id '" + record.id + "'");
  }
  const auto bytes = serialize_record(record);
  const std::uint64_t offset = records_end_;
  pwrite_all(fd_, bytes, offset, path_);
  records_end_ += bytes.size();
  ManifestEntry e{record.id, offset, record.m, record.d, record.width_bits, 0};
  std::memcpy(&e.checksum, bytes.data() + bytes.size() - 8, 8);
  index_.emplace(record.id, entries_.size());
  entries_.push_back(std::move(e));
  write_manifest();
  return offset;
}

std::uint64_t FeatureStoreWriter::write(const std::string& id, const Tensor& tokens,
                                        std::uint16_t width_bits) {
  return write(FeatureRecord::from_tensor(id, tokens, width_bits));
}

void FeatureStoreWriter::write_manifest() {
  detail::ByteWriter w;
  w.put(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    w.put_string(e.id);
    w.put(e.offset);
    w.put(e.m);
    w.put(e.d);
    w.put(e.width_bits);
    w.put(e.checksum);
  }
  w.put(detail::fnv1a(w.bytes().data(), w.size()));
  w.put(records_end_);
  pwrite_all(fd_, w.bytes(), records_end_, path_);
  if (::ftruncate(fd_, static_cast<off_t>(records_end_ + w.size())) != 0) {
    throw IoError("truncate " + path_.string() + ": " + errno_text());
  }
}

void FeatureStoreWriter::close() {
  if (fd_ >= 0 && ::fsync(fd_) != 0) {
    const std::string msg = errno_text();
    release(fd_);
    release(lock_fd_);
    throw IoError("fsync " + path_.string() + ": " + msg);
  }
  release(fd_);
  release(lock_fd_);
}

FeatureStore::FeatureStore(const std::filesystem::path& path) : path_(path) {
  fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd_ < 0) {
    if (errno == ENOENT) throw NotFoundError("feature store " + path.string() + " not found");
    throw IoError("cannot open " + path.string() + ": " + errno_text());
  }
  try {
    lock_fd_ = acquire_lock(path, false);
    file_size_ = file_size(fd_, path);
    entries_ = parse_store(fd_, file_size_, path).entries;
  } catch (...) {
    release(fd_);
    release(lock_fd_);
    throw;
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!index_.emplace(entries_[i].id, i).second) {
      release(fd_);
      release(lock_fd_);
      throw CorruptionError(path.string() + ": duplicate id '" + entries_[i].id + "' in manifest");
    }
  }
}

FeatureStore::~FeatureStore() {
  release(fd_);
  release(lock_fd_);
}

std::vector<std::string> FeatureStore::ids() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.id);
  return out;
}

FeatureRecord FeatureStore::read(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw NotFoundError("feature store " + path_.string() + " has no id '" + id + "'");
  const ManifestEntry& e = entries_[it->second];
  const std::size_t n = 4 + e.id.size() + 4 + 4 + 2 + payload_bytes(e.m, e.d, e.width_bits) + 8;
  const auto bytes = pread_exact(fd_, n, e.offset, path_);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + n - 8, 8);
  if (stored != e.checksum || stored != detail::fnv1a(bytes.data(), n - 8)) {
    throw CorruptionError(path_.string() + ": checksum mismatch for id '" + id + "' at byte offset " +
                          std::to_string(e.offset));
  }
  detail::ByteReader r(bytes.data(), n - 8, path_.string(), e.offset);
  FeatureRecord rec;
  rec.id = r.get_string("record id");
  rec.m = r.get<std::uint32_t>("record m");
  rec.d = r.get<std::uint32_t>("record d");
  rec.width_bits = r.get<std::uint16_t>("record width");
  if (rec.id != e.id || rec.m != e.m || rec.d != e.d || rec.width_bits != e.width_bits) {
    throw CorruptionError(path_.string() + ": record header for '" + id + "' disagrees with manifest");
  }
  const auto* p = r.take(payload_bytes(rec.m, rec.d, rec.width_bits), "record payload");
  rec.payload.assign(p, p + payload_bytes(rec.m, rec.d, rec.width_bits));
  return rec;
}

StorageStats FeatureStore::stats() const {
  StorageStats s;
  s.total_bytes = file_size_;
  s.records = entries_.size();
  if (!entries_.empty()) {
    const auto& e = entries_.front();
    s.tokens = e.m;
    s.dim = e.d;
    s.width_bits = e.width_bits;
    s.bytes_per_image = storage_per_image(e.m, e.d, e.width_bits);
  }
  return s;
}

void write_raw_dump(const std::filesystem::path& path, std::span<const std::string> ids,
                    std::span<const Tensor> tokens, std::uint16_t width_bits) {
  if (ids.size() != tokens.size()) throw ConfigError("write_raw_dump: ids and tokens differ in count");
  if (!valid_width(width_bits)) throw ConfigError("write_raw_dump: width must be 16 or 64");
  const std::size_t n = tokens.empty() ? 0 : tokens.front().rows();
  const std::size_t d = tokens.empty() ? 0 : tokens.front().cols();
  detail::ByteWriter w;
  w.put_bytes(kDumpMagic, 4);
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(ids.size()));
  w.put(static_cast<std::uint32_t>(n));
  w.put(static_cast<std::uint32_t>(d));
  w.put(width_bits);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (tokens[i].rows() != n || tokens[i].cols() != d) {
      throw DimensionError("write_raw_dump: image '" + ids[i] + "' has shape " +
                           shape_string(tokens[i].shape()) + ", expected " + std::to_string(n) + "x" +
                           std::to_string(d));
    }
    w.put_string(ids[i]);
    if (width_bits == 64) {
      w.put_bytes(tokens[i].raw(), tokens[i].size() * sizeof(double));
    } else {
      for (double v : tokens[i].data()) w.put(narrow_half(v));
    }
  }
  detail::write_file_atomic(path, w.bytes());
}

RawDump ingest_raw_dump(const std::filesystem::path& path, std::size_t d_vision) {
  const auto bytes = detail::read_file(path, "raw dump");
  detail::ByteReader r(bytes.data(), bytes.size(), path.string());
  if (std::memcmp(r.take(4, "magic"), kDumpMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic at byte offset 0");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  const auto count = r.get<std::uint32_t>("header count");
  RawDump dump;
  dump.n = r.get<std::uint32_t>("header n");
  dump.d = r.get<std::uint32_t>("header d");
  const auto width = r.get<std::uint16_t>("header width");
  if (!valid_width(width)) {
    throw FormatError(path.string() + ": width " + std::to_string(width) + " at byte offset 20");
  }
  if (count > 0) {
    if (dump.n == 0 || dump.d == 0) throw FormatError(path.string() + ": zero n or d in header at byte offset 12");
    if (dump.d != d_vision) {
      throw ConfigError(path.string() + ": dump has d = " + std::to_string(dump.d) + ", expected d_vision = " +
                        std::to_string(d_vision));
    }
  }
  const std::size_t elems = dump.n * dump.d;
  for (std::uint32_t i = 0; i < count; ++i) {
    dump.ids.push_back(r.get_string("record id"));
    const auto* p = r.take(elems * (width / 8), "record payload");
    std::vector<double> data(elems);
    if (width == 64) {
      std::memcpy(data.data(), p, elems * sizeof(double));
    } else {
      for (std::size_t k = 0; k < elems; ++k) {
        std::uint16_t bits;
        std::memcpy(&bits, p + 2 * k, 2);
        data[k] = widen_half(bits);
      }
    }
    dump.tokens.emplace_back(Shape{dump.n, dump.d}, std::move(data));
  }
  if (!r.at_end()) {
    throw FormatError(path.string() + ": trailing bytes at byte offset " + std::to_string(r.file_offset()));
  }
  return dump;
}

}  // namespace edje
