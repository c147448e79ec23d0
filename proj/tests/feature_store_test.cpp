#include <gtest/gtest.h>

#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "edje/errors.hpp"
#include "edje/feature_store.hpp"

namespace edje {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("edje_fs_" + std::to_string(::getpid()) + "_" +
                                         std::to_string(counter_++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

// Bit patterns from numpy's float64 -> float16 cast.
TEST(Half, MatchesReferenceBits) {
  const std::pair<double, std::uint16_t> cases[] = {
      {0.0, 0x0000},         {-0.0, 0x8000},         {1.0, 0x3c00},
      {1.0 / 3.0, 0x3555},   {-2.5, 0xc100},         {65504.0, 0x7bff},
      {65519.99, 0x7bff},    {65520.0, 0x7c00},      {1e6, 0x7c00},
      {0x1p-25, 0x0000},     {3 * 0x1p-25, 0x0002},  {0x1p-24, 0x0001},
      {1e-8, 0x0000},        {1 + 0x1p-11, 0x3c00},  {1 + 3 * 0x1p-11, 0x3c02},
      {0x1p-14 - 0x1p-26, 0x0400}, {0.1, 0x2e66},    {-1234.5678, 0xe4d3},
      {6.1e-5, 0x03ff},
  };
  for (auto [x, bits] : cases) EXPECT_EQ(narrow_half(x), bits) << x;
  EXPECT_EQ(widen_half(0x3555), 0x1.554p-2);
  EXPECT_EQ(widen_half(0x03ff), 0x1.ff8p-15);
  EXPECT_TRUE(std::isinf(widen_half(0xfc00)) && widen_half(0xfc00) < 0);
  EXPECT_TRUE(std::isnan(widen_half(narrow_half(std::nan("")))));
}

TEST(Half, EveryFiniteBitPatternRoundTrips) {
  for (std::uint32_t b = 0; b < 0x10000; ++b) {
    const auto bits = static_cast<std::uint16_t>(b);
    if (((bits >> 10) & 0x1f) == 0x1f) continue;
    ASSERT_EQ(narrow_half(widen_half(bits)), bits) << std::hex << b;
  }
}

TEST(Half, NarrowingIsIdempotent) {
  std::mt19937_64 rng(1);
  const Tensor x = Tensor::randn({64, 384}, 3.0, rng);
  const Tensor once = round_to_half(x);
  EXPECT_EQ(round_to_half(once), once);
  EXPECT_EQ(FeatureRecord::from_tensor("a", once, 16).to_tensor(), once);
}

TEST(Storage, PublishedFigures) {
  EXPECT_EQ(storage_per_image(64, 384, 16), 49152u);
  EXPECT_EQ(storage_per_image(128, 384, 16), 98304u);
  EXPECT_EQ(storage_per_image(576, 384, 16), 442368u);
  // Decimal kilobytes reproduce all three reported figures; binary ones do not.
  EXPECT_EQ(format_kb(49152), "49kB");
  EXPECT_EQ(format_kb(98304), "98kB");
  EXPECT_EQ(format_kb(442368), "442kB");
  EXPECT_EQ(49152 / 1024, 48);
  EXPECT_EQ(442368 / 1024, 432);
  EXPECT_THROW(storage_per_image(0, 384, 16), ConfigError);
}

TEST(FeatureStore, RoundTripThousandRecordsAcrossReopen) {
  TempDir dir;
  const auto path = dir / "f.edjf";
  std::mt19937_64 rng(2);
  std::vector<Tensor> values;
  {
    FeatureStoreWriter w(path);
    for (int i = 0; i < 1000; ++i) {
      values.push_back(Tensor::randn({4, 6}, 1.0, rng));
      w.write("img" + std::to_string(i), values.back(), i % 2 ? 64 : 16);
    }
  }
  FeatureStore store(path);
  ASSERT_EQ(store.size(), 1000u);
  const auto ids = store.ids();
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(ids[i], "img" + std::to_string(i));
  std::vector<std::size_t> order(1000);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i : order) {
    const Tensor t = store.read_tensor("img" + std::to_string(i));
    EXPECT_EQ(t, i % 2 ? values[i] : round_to_half(values[i]));
  }
}

TEST(FeatureStore, ReadAfterWriteIsBitIdentical) {
  TempDir dir;
  std::mt19937_64 rng(3);
  const auto rec = FeatureRecord::from_tensor("x", Tensor::randn({64, 384}, 1.0, rng), 16);
  {
    FeatureStoreWriter w(dir / "f.edjf");
    w.write(rec);
  }
  FeatureStore store(dir / "f.edjf");
  const auto back = store.read("x");
  EXPECT_EQ(back.payload, rec.payload);
  EXPECT_EQ(back.m, 64u);
  EXPECT_EQ(back.d, 384u);
  const auto stats = store.stats();
  EXPECT_EQ(stats.bytes_per_image, 49152u);
  EXPECT_EQ(stats.dtype(), "float16");
  EXPECT_GT(stats.total_bytes, stats.bytes_per_image);
}

TEST(FeatureStore, DuplicateIdIsConflict) {
  TempDir dir;
  FeatureStoreWriter w(dir / "f.edjf");
  w.write("a", Tensor({2, 2}, 1.0));
  EXPECT_THROW(w.write("a", Tensor({2, 2}, 2.0)), ConflictError);
}

TEST(FeatureStore, PayloadMismatchIsFormatError) {
  TempDir dir;
  FeatureStoreWriter w(dir / "f.edjf");
  auto rec = FeatureRecord::from_tensor("a", Tensor({2, 2}, 1.0), 16);
  rec.payload.pop_back();
  EXPECT_THROW(w.write(rec), FormatError);
  rec = FeatureRecord::from_tensor("b", Tensor({2, 2}, 1.0), 16);
  rec.width_bits = 32;
  EXPECT_THROW(w.write(rec), FormatError);
}

TEST(FeatureStore, MissingIdIsNotFound) {
  TempDir dir;
  { FeatureStoreWriter w(dir / "f.edjf"); w.write("a", Tensor({1, 3}, 1.0)); }
  FeatureStore store(dir / "f.edjf");
  EXPECT_THROW(store.read("b"), NotFoundError);
  EXPECT_THROW(FeatureStore(dir / "missing.edjf"), NotFoundError);
}

TEST(FeatureStore, CorruptPayloadByteIsDetected) {
  TempDir dir;
  const auto path = dir / "f.edjf";
  std::uint64_t offset;
  {
    FeatureStoreWriter w(path);
    w.write("a", Tensor({2, 3}, 0.5));
    offset = w.write("b", Tensor({2, 3}, 0.25));
  }
  {
    // Flip one byte inside b's payload: 4 + 1 (id) + 4 + 4 + 2 header bytes in.
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(offset + 15 + 3));
    char c;
    f.read(&c, 1);
    c ^= 0x01;
    f.seekp(static_cast<std::streamoff>(offset + 15 + 3));
    f.write(&c, 1);
  }
  FeatureStore store(path);
  EXPECT_NO_THROW(store.read("a"));
  EXPECT_THROW(store.read("b"), CorruptionError);
}

TEST(FeatureStore, AppendKeepsExistingRecords) {
  TempDir dir;
  const auto path = dir / "f.edjf";
  { FeatureStoreWriter w(path); w.write("a", Tensor({1, 2}, 1.0), 64); }
  {
    FeatureStoreWriter w(path, FeatureStoreWriter::Mode::kAppend);
    EXPECT_TRUE(w.contains("a"));
    EXPECT_THROW(w.write("a", Tensor({1, 2}, 3.0)), ConflictError);
    w.write("b", Tensor({1, 2}, 2.0), 64);
  }
  FeatureStore store(path);
  EXPECT_EQ(store.ids(), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(store.read_tensor("a"), Tensor({1, 2}, 1.0));
  EXPECT_EQ(store.read_tensor("b"), Tensor({1, 2}, 2.0));
}

TEST(FeatureStore, WriterExcludesReadersAndWriters) {
  TempDir dir;
  const auto path = dir / "f.edjf";
  {
    FeatureStoreWriter w(path);
    EXPECT_THROW(FeatureStore{path}, ConflictError);
    EXPECT_THROW(FeatureStoreWriter(path, FeatureStoreWriter::Mode::kAppend), ConflictError);
  }
  FeatureStore a(path);
  FeatureStore b(path);
  EXPECT_THROW(FeatureStoreWriter{path}, ConflictError);
}

TEST(FeatureStore, ConcurrentReaders) {
  TempDir dir;
  const auto path = dir / "f.edjf";
  std::mt19937_64 rng(4);
  std::vector<Tensor> values;
  {
    FeatureStoreWriter w(path);
    for (int i = 0; i < 64; ++i) {
      values.push_back(Tensor::randn({8, 8}, 1.0, rng));
      w.write(std::to_string(i), values.back(), 64);
    }
  }
  FeatureStore shared(path);
  std::vector<int> failures(8, 0);
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      FeatureStore own(path);
      for (int rep = 0; rep < 20; ++rep)
        for (int i = 0; i < 64; ++i) {
          const FeatureStore& s = (i + t) % 2 ? shared : own;
          if (!(s.read_tensor(std::to_string(i)) == values[i])) ++failures[t];
        }
    });
  }
  for (auto& th : threads) th.join();
  for (int f : failures) EXPECT_EQ(f, 0);
}

TEST(RawDump, IngestEnumeratesImages) {
  TempDir dir;
  std::mt19937_64 rng(5);
  std::vector<std::string> ids;
  std::vector<Tensor> tokens;
  for (int i = 0; i < 10; ++i) {
    ids.push_back("raw" + std::to_string(i));
    tokens.push_back(Tensor::randn({576, 1024}, 1.0, rng));
  }
  write_raw_dump(dir / "d.edjr", ids, tokens);
  const RawDump dump = ingest_raw_dump(dir / "d.edjr", 1024);
  EXPECT_EQ(dump.n, 576u);
  EXPECT_EQ(dump.ids, ids);
  ASSERT_EQ(dump.tokens.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(dump.tokens[i], tokens[i]);
  EXPECT_THROW(ingest_raw_dump(dir / "d.edjr", 768), ConfigError);
}

TEST(RawDump, ZeroImages) {
  TempDir dir;
  write_raw_dump(dir / "d.edjr", {}, {});
  const RawDump dump = ingest_raw_dump(dir / "d.edjr", 1024);
  EXPECT_TRUE(dump.ids.empty());
}

TEST(RawDump, TruncationNamesOffset) {
  TempDir dir;
  const std::vector<std::string> ids{"a", "b"};
  const std::vector<Tensor> tokens{Tensor({3, 4}, 1.0), Tensor({3, 4}, 2.0)};
  write_raw_dump(dir / "d.edjr", ids, tokens);
  // header 22 bytes, each record 4 + 1 + 96 bytes: cut inside b's payload
  fs::resize_file(dir / "d.edjr", 22 + 101 + 50);
  try {
    ingest_raw_dump(dir / "d.edjr", 4);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 128"), std::string::npos) << e.what();
  }
  fs::resize_file(dir / "d.edjr", 10);
  EXPECT_THROW(ingest_raw_dump(dir / "d.edjr", 4), FormatError);
}

}  // namespace
}  // namespace edje
