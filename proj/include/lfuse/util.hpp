#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace lfuse {

std::string sha256_hex(std::string_view bytes);

// Content hash over raw parameter storage, in iteration order.
std::string tensor_digest(const std::vector<torch::Tensor>& tensors);

// Deterministic hash of a string mapped onto [0, 1).
double stable_unit_hash(std::string_view key);

// 64-bit seed derived from a base seed and a salt; used to give each
// (seed, epoch) or (seed, sample) pair an independent random stream.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);

torch::Generator make_generator(std::uint64_t seed);

// Raster I/O. Images are float32 [3,H,W] RGB in [0,1]; masks are float32 [H,W] in {0,1}.
torch::Tensor read_image(const std::filesystem::path& path);
torch::Tensor read_mask(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const torch::Tensor& image);
void write_mask(const std::filesystem::path& path, const torch::Tensor& mask);

// Bilinear resize of a [C,H,W] raster.
torch::Tensor resize_image(const torch::Tensor& image, int64_t height, int64_t width);
// Nearest-neighbour resize of a [H,W] binary mask.
torch::Tensor resize_mask(const torch::Tensor& mask, int64_t height, int64_t width);

// Writes to a sibling temp file and renames over the target.
void atomic_write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

}  // namespace lfuse
