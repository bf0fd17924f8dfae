#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <vector>

#include "rsa/domain.hpp"

namespace rsa {

// Images are fed to networks as [B, 1, H, W] float tensors with the value
// range mapped onto [0, 1].
torch::Tensor to_unit_tensor(const Image2D& image);
torch::Tensor stack_unit(std::span<const Image2D> images);
torch::Tensor to_tensor(const BitGrid& grid);   // [1, 1, H, W] float
torch::Tensor to_tensor(const RealGrid& grid);  // [1, 1, H, W] double
RealGrid to_real_grid(const torch::Tensor& t);  // any tensor with H*W elements, last two dims H, W
BitGrid to_bit_grid(const torch::Tensor& t);

torch::Generator make_generator(std::uint64_t seed);

// Single-threaded, deterministic kernels; also seeds the global generator.
void set_deterministic(std::uint64_t seed);

// Deep copy of every parameter and buffer, e.g. to restore a last-good state.
std::vector<torch::Tensor> snapshot(const torch::nn::Module& module);
void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& state);
bool same_parameters(const torch::nn::Module& a, const torch::nn::Module& b);

}  // namespace rsa
