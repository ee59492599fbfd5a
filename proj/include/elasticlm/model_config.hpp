#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace elm {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int d_head = 16;
  int d_ffn = 256;
  int vocab_size = 96;
  int max_seq_len = 128;

  int attn_width() const { return n_heads * d_head; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw std::invalid_argument(std::string("ModelConfig: ") + name + " must be >= 1");
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_head, "d_head");
    positive(d_ffn, "d_ffn");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
  }

  bool operator==(const ModelConfig&) const = default;
};

// The (depth, width-ratio) design space. Depths and ratios are stored
// largest-first so index 0 always names the largest shape along each axis.
struct ShapeGrid {
  std::vector<int> depths;          // descending, depths[0] == n_layers
  std::vector<double> width_ratios; // descending, width_ratios[0] == 1

  int mask_dim() const { return int(depths.size() + width_ratios.size()); }
  size_t size() const { return depths.size() * width_ratios.size(); }

  void validate(int n_layers) const {
    if (depths.empty() || width_ratios.empty())
      throw std::invalid_argument("ShapeGrid: empty axis");
    if (depths.front() != n_layers)
      throw std::invalid_argument("ShapeGrid: largest depth must equal n_layers");
    for (size_t i = 1; i < depths.size(); ++i)
      if (depths[i] >= depths[i - 1])
        throw std::invalid_argument("ShapeGrid: depths must be strictly descending");
    if (depths.back() < 1)
      throw std::invalid_argument("ShapeGrid: depths must be >= 1");
    if (width_ratios.front() != 1.0)
      throw std::invalid_argument("ShapeGrid: largest width ratio must be 1");
    for (size_t i = 1; i < width_ratios.size(); ++i)
      if (width_ratios[i] >= width_ratios[i - 1])
        throw std::invalid_argument("ShapeGrid: width ratios must be strictly descending");
    if (width_ratios.back() <= 0.0)
      throw std::invalid_argument("ShapeGrid: width ratios must be in (0,1]");
  }

  // Removal budget the DP has to cover for this grid.
  int max_removed() const { return depths.front() - depths.back(); }
};

// One extractable subnet: indices into the grid plus the layer-retention
// bitmask and the one-hot gate mask derived from the indices.
struct SubnetShape {
  int depth_index = 0;
  int width_index = 0;
  std::vector<uint8_t> retained_layers;  // length n_layers
  std::vector<double> gate_mask;         // length |depths|+|ratios|, two ones

  static SubnetShape make(const ShapeGrid& grid, int depth_index, int width_index,
                          std::vector<uint8_t> retained) {
    if (depth_index < 0 || size_t(depth_index) >= grid.depths.size())
      throw std::out_of_range("SubnetShape: depth index " + std::to_string(depth_index) +
                              " outside grid");
    if (width_index < 0 || size_t(width_index) >= grid.width_ratios.size())
      throw std::out_of_range("SubnetShape: width index " + std::to_string(width_index) +
                              " outside grid");
    SubnetShape s;
    s.depth_index = depth_index;
    s.width_index = width_index;
    s.retained_layers = std::move(retained);
    int kept = 0;
    for (uint8_t b : s.retained_layers) kept += b ? 1 : 0;
    if (kept != grid.depths[size_t(depth_index)])
      throw std::invalid_argument(
          "SubnetShape: retained layer count " + std::to_string(kept) +
          " does not match depth " + std::to_string(grid.depths[size_t(depth_index)]));
    s.gate_mask.assign(size_t(grid.mask_dim()), 0.0);
    s.gate_mask[size_t(depth_index)] = 1.0;
    s.gate_mask[grid.depths.size() + size_t(width_index)] = 1.0;
    return s;
  }

  // All layers kept, full width.
  static SubnetShape full(const ShapeGrid& grid, int n_layers) {
    return make(grid, 0, 0, std::vector<uint8_t>(size_t(n_layers), 1));
  }

  bool is_full_width() const { return width_index == 0; }
  bool is_full() const {
    if (width_index != 0 || depth_index != 0) return false;
    for (uint8_t b : retained_layers)
      if (!b) return false;
    return true;
  }

  std::string id(const ShapeGrid& grid) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "d%dr%.3f", grid.depths[size_t(depth_index)],
                  grid.width_ratios[size_t(width_index)]);
    return buf;
  }
};

}  // namespace elm
