#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "edje/checkpoint.hpp"
#include "edje/encoder.hpp"
#include "edje/errors.hpp"

namespace edje {
namespace {

namespace fs = std::filesystem;

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("edje_ckpt_" + std::to_string(::getpid()) + "_" + name);
}

EncoderConfig tiny() {
  EncoderConfig c;
  c.layers = 1;
  c.hidden = 4;
  c.heads = 2;
  c.mlp_hidden = 8;
  c.vocab_size = 9;
  c.max_text_len = 6;
  c.text_embedding_dim = 3;
  return c;
}

TEST(Checkpoint, RoundTripRestoresEveryTensor) {
  std::mt19937_64 rng(1);
  auto a = EncoderParams::init(tiny(), rng);
  auto b = EncoderParams::init(tiny(), rng);
  const auto path = temp_file("rt.edjc");
  save_checkpoint(path, a.named_parameters());
  load_checkpoint(path, b.named_parameters());
  const auto pa = a.named_parameters();
  const auto pb = b.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].second->value, pb[i].second->value) << pa[i].first;
    EXPECT_EQ(pa[i].second->decay, pb[i].second->decay);
  }
  fs::remove(path);
}

TEST(Checkpoint, ShapeMismatchAndMissingTensor) {
  std::mt19937_64 rng(2);
  auto a = EncoderParams::init(tiny(), rng);
  const auto path = temp_file("shape.edjc");
  save_checkpoint(path, a.named_parameters());
  auto wide = tiny();
  wide.hidden = 6;
  auto b = EncoderParams::init(wide, rng);
  EXPECT_THROW(load_checkpoint(path, b.named_parameters()), DimensionError);
  auto deeper = tiny();
  deeper.layers = 2;
  auto c = EncoderParams::init(deeper, rng);
  EXPECT_THROW(load_checkpoint(path, c.named_parameters()), NotFoundError);
  auto np = a.named_parameters();
  np.pop_back();
  EXPECT_THROW(load_checkpoint(path, np), ConfigError);
  fs::remove(path);
}

TEST(Checkpoint, CorruptionAndTruncation) {
  const auto path = temp_file("bad.edjc");
  save_tensors(path, {{"w", Tensor({2, 2}, 1.5)}, {"b", Tensor({3}, -1.0)}});
  EXPECT_EQ(load_tensors(path)[1].value, Tensor({3}, -1.0));
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(30);
    f.put('\x7f');
  }
  EXPECT_THROW(load_tensors(path), CorruptionError);
  save_tensors(path, {{"w", Tensor({2, 2}, 1.5)}});
  fs::resize_file(path, fs::file_size(path) - 12);
  EXPECT_THROW(load_tensors(path), CorruptionError);
  fs::resize_file(path, 6);
  EXPECT_THROW(load_tensors(path), FormatError);
  fs::remove(path);
  EXPECT_THROW(load_tensors(path), NotFoundError);
}

}  // namespace
}  // namespace edje
