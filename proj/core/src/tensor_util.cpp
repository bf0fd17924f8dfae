#include "rsa/tensor_util.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace rsa {

torch::Tensor to_unit_tensor(const Image2D& image) {
  const auto rows = static_cast<int64_t>(image.pixels.rows());
  const auto cols = static_cast<int64_t>(image.pixels.cols());
  const double lo = image.value_range.lo;
  const double scale = 1.0 / (image.value_range.hi - lo);
  auto t = torch::empty({1, 1, rows, cols}, torch::kFloat32);
  auto* dst = t.data_ptr<float>();
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    dst[i] = static_cast<float>((image.pixels[i] - lo) * scale);
  }
  return t;
}

torch::Tensor stack_unit(std::span<const Image2D> images) {
  std::vector<torch::Tensor> parts;
  parts.reserve(images.size());
  for (const auto& im : images) parts.push_back(to_unit_tensor(im));
  return torch::cat(parts, 0);
}

torch::Tensor to_tensor(const BitGrid& grid) {
  auto t = torch::empty({1, 1, static_cast<int64_t>(grid.rows()), static_cast<int64_t>(grid.cols())},
                        torch::kFloat32);
  auto* dst = t.data_ptr<float>();
  for (std::size_t i = 0; i < grid.size(); ++i) dst[i] = grid[i] ? 1.0f : 0.0f;
  return t;
}

torch::Tensor to_tensor(const RealGrid& grid) {
  auto t = torch::empty({1, 1, static_cast<int64_t>(grid.rows()), static_cast<int64_t>(grid.cols())},
                        torch::kFloat64);
  std::copy(grid.begin(), grid.end(), t.data_ptr<double>());
  return t;
}

RealGrid to_real_grid(const torch::Tensor& t) {
  const auto rows = static_cast<std::size_t>(t.size(-2));
  const auto cols = static_cast<std::size_t>(t.size(-1));
  auto d = t.detach().to(torch::kFloat64).contiguous();
  if (static_cast<std::size_t>(d.numel()) != rows * cols) {
    throw std::invalid_argument("to_real_grid expects a single HxW plane");
  }
  const double* src = d.data_ptr<double>();
  return RealGrid(Shape{rows, cols}, std::vector<double>(src, src + rows * cols));
}

BitGrid to_bit_grid(const torch::Tensor& t) {
  const auto rows = static_cast<std::size_t>(t.size(-2));
  const auto cols = static_cast<std::size_t>(t.size(-1));
  auto d = t.detach().to(torch::kFloat64).contiguous();
  const double* src = d.data_ptr<double>();
  BitGrid out(rows, cols, 0);
  for (std::size_t i = 0; i < rows * cols; ++i) out[i] = src[i] != 0.0 ? 1 : 0;
  return out;
}

torch::Generator make_generator(std::uint64_t seed) { return at::detail::createCPUGenerator(seed); }

void set_deterministic(std::uint64_t seed) {
  at::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, false);
  torch::manual_seed(seed);
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& module) {
  std::vector<torch::Tensor> out;
  for (const auto& p : module.parameters()) out.push_back(p.detach().clone());
  for (const auto& b : module.buffers()) out.push_back(b.detach().clone());
  return out;
}

void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& state) {
  torch::NoGradGuard guard;
  std::size_t i = 0;
  for (auto& p : module.parameters()) p.copy_(state.at(i++));
  for (auto& b : module.buffers()) b.copy_(state.at(i++));
}

bool same_parameters(const torch::nn::Module& a, const torch::nn::Module& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!torch::equal(pa[i], pb[i])) return false;
  }
  return true;
}

}  // namespace rsa
