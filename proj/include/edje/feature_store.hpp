#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "edje/tensor.hpp"

namespace edje {

/// IEEE binary16 bits of `x`, rounded to nearest even. Overflow goes to
/// infinity; NaN stays NaN.
std::uint16_t narrow_half(double x);
double widen_half(std::uint16_t bits);
/// widen(narrow(x)) elementwise.
Tensor round_to_half(const Tensor& x);

struct FeatureRecord {
  std::string id;
  std::uint32_t m = 0;
  std::uint32_t d = 0;
  std::uint16_t width_bits = 16;  // 16 or 64
  std::vector<std::uint8_t> payload;  // m * d elements, little-endian, row-major

  static FeatureRecord from_tensor(std::string id, const Tensor& tokens, std::uint16_t width_bits);
  Tensor to_tensor() const;
  /// FNV-1a 64 over the serialized header fields and payload.
  std::uint64_t checksum() const;
};

std::size_t storage_per_image(std::size_t m, std::size_t d, std::size_t width_bits);
/// Decimal kilobytes rounded to an integer, e.g. 49152 -> "49kB".
std::string format_kb(std::size_t bytes);

struct StorageStats {
  std::size_t bytes_per_image = 0;  // payload only
  std::size_t total_bytes = 0;      // file size including metadata
  std::size_t records = 0;
  std::size_t tokens = 0;  // m per image
  std::size_t dim = 0;
  std::uint16_t width_bits = 0;
  std::string dtype() const;
};

struct ManifestEntry {
  std::string id;
  std::uint64_t offset = 0;
  std::uint32_t m = 0;
  std::uint32_t d = 0;
  std::uint16_t width_bits = 0;
  std::uint64_t checksum = 0;
};

/// Single writer. Holds an exclusive lock on `<path>.lock` until closed;
/// the manifest is rewritten after every record so the file is always
/// readable between writes.
class FeatureStoreWriter {
 public:
  enum class Mode { kCreate, kAppend };

  FeatureStoreWriter(const std::filesystem::path& path, Mode mode = Mode::kCreate);
  ~FeatureStoreWriter();
  FeatureStoreWriter(const FeatureStoreWriter&) = delete;
  FeatureStoreWriter& operator=(const FeatureStoreWriter&) = delete;

  /// Returns the record's byte offset.
  std::uint64_t write(const FeatureRecord& record);
  std::uint64_t write(const std::string& id, const Tensor& tokens, std::uint16_t width_bits = 16);
  bool contains(const std::string& id) const { return index_.contains(id); }
  std::size_t size() const noexcept { return entries_.size(); }
  void close();

 private:
  void write_manifest();

  std::filesystem::path path_;
  int fd_ = -1;
  int lock_fd_ = -1;
  std::uint64_t records_end_ = 0;
  std::vector<ManifestEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Read-only view. Safe to share across threads; reads use positional I/O.
/// Holds a shared lock on `<path>.lock`, so it cannot overlap a writer.
class FeatureStore {
 public:
  explicit FeatureStore(const std::filesystem::path& path);
  ~FeatureStore();
  FeatureStore(const FeatureStore&) = delete;
  FeatureStore& operator=(const FeatureStore&) = delete;

  std::size_t size() const noexcept { return entries_.size(); }
  bool contains(const std::string& id) const { return index_.contains(id); }
  /// Ids in write order.
  std::vector<std::string> ids() const;
  const std::vector<ManifestEntry>& manifest() const noexcept { return entries_; }

  FeatureRecord read(const std::string& id) const;
  Tensor read_tensor(const std::string& id) const { return read(id).to_tensor(); }
  StorageStats stats() const;

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  int lock_fd_ = -1;
  std::uint64_t file_size_ = 0;
  std::vector<ManifestEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Pre-adapter vision tokens: "EDJR", u32 version, u32 count, u32 n, u32 d,
/// u16 width_bits, then per image u32 id length, id, n * d elements.
struct RawDump {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<std::string> ids;
  std::vector<Tensor> tokens;
};

void write_raw_dump(const std::filesystem::path& path, std::span<const std::string> ids,
                    std::span<const Tensor> tokens, std::uint16_t width_bits = 64);
/// Reads a dump whose token width must equal `d_vision`.
RawDump ingest_raw_dump(const std::filesystem::path& path, std::size_t d_vision);

}  // namespace edje
