#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "edje/adapter.hpp"
#include "edje/tensor.hpp"

namespace edje {

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Flat container: "EDJC", u32 version, u32 count, then per tensor u32 name
/// length, name, u32 rank, u64 dims, f64 payload; a trailing u64 FNV-1a of
/// everything before it.
void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const ConstNamedParams& params);
void save_checkpoint(const std::filesystem::path& path, const NamedParams& params);
/// Every parameter must be present with a matching shape; extra entries are rejected.
void load_checkpoint(const std::filesystem::path& path, const NamedParams& params);

}  // namespace edje
