#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icod/tensor.hpp"

namespace icod {

enum class ParamGroup { Backbone, Head, Decomposer };

std::string to_string(ParamGroup group);

struct Param {
  std::string name;
  ParamGroup group;
  Tensor value;
};

/// Ordered, named parameter arrays. Gradients, Fisher diagonals and Adam
/// moments use the same layout, so they are ParamSets too.
class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(std::vector<Param> entries) : entries_(std::move(entries)) {}

  std::size_t size() const { return entries_.size(); }
  Param& operator[](std::size_t i) { return entries_[i]; }
  const Param& operator[](std::size_t i) const { return entries_[i]; }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void add(std::string name, ParamGroup group, Tensor value);
  /// Index of `name`; throws ArgumentError when absent.
  std::size_t index_of(const std::string& name) const;
  const Tensor& get(const std::string& name) const { return entries_[index_of(name)].value; }

  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const;
  std::size_t scalar_count() const;
  void set_zero();
  ParamSet& operator+=(const ParamSet& other);
  ParamSet& operator*=(double s);
  bool all_finite() const;

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  std::vector<Param> entries_;
};

/// Initial background logit of a fresh head.
inline constexpr double kBackgroundPriorLogit = 4.0;

struct ModelConfig {
  int n_classes = 8;
  /// Backbone channel progression; channels.front() is the image depth.
  /// Each step is one conv block with 2x average-pool downsampling.
  std::vector<int> channels = {3, 8, 16, 32};
  int kernel = 3;

  int feature_channels() const { return channels.back(); }
  int blocks() const { return static_cast<int>(channels.size()) - 1; }
  int stride() const { return 1 << blocks(); }
  /// Head rows: n_classes logits, background logit, 4 box deltas.
  int head_outputs() const { return n_classes + 5; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Backbone + head (theta_m) and the feature decomposer (theta_c).
///
/// Layout: backbone.<i>.weight/bias for each block, head.weight/bias, then
/// decomposer.nf.{0,1} and decomposer.nb.{0,1} weight/bias (1x1 convs).
struct Model {
  ModelConfig config;
  ParamSet params;

  static Model create(const ModelConfig& config, std::uint64_t seed);

  std::size_t backbone_weight(int block) const { return static_cast<std::size_t>(2 * block); }
  std::size_t backbone_bias(int block) const { return static_cast<std::size_t>(2 * block + 1); }
  std::size_t head_weight() const { return static_cast<std::size_t>(2 * config.blocks()); }
  std::size_t head_bias() const { return head_weight() + 1; }
  /// net 0 = N_f (channel weight), net 1 = N_b (channel bias).
  std::size_t decomposer_weight(int net, int layer) const {
    return head_bias() + 1 + static_cast<std::size_t>(4 * net + 2 * layer);
  }
  std::size_t decomposer_bias(int net, int layer) const { return decomposer_weight(net, layer) + 1; }

  /// Throws ArgumentError when params do not match config.
  void check_layout() const;
};

}  // namespace icod
