// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mtlora/config.hpp"
#include "mtlora/rng.hpp"
#include "mtlora/tensor.hpp"

namespace mtlora {

// Class ids double as semantic labels (0 is background).
enum class ShapeKind : std::uint8_t { kCircle = 1, kRectangle = 2, kTriangle = 3 };
inline constexpr std::int64_t kNumShapeClasses = 3;
inline constexpr std::int64_t kNumPartClasses = 5;

struct SceneShape {
  ShapeKind kind = ShapeKind::kCircle;
  double cx = 0, cy = 0;  // pixels
  double size = 0;        // circumradius in pixels
  double rotation = 0;    // radians
  double aspect = 0.785;  // rectangle half-extent angle; unused otherwise
  std::array<float, 3> color{};
};

struct Scene {
  std::vector<SceneShape> shapes;  // painted in order; later shapes cover earlier ones
  std::uint64_t noise_seed = 0;
};

// Channel-first planes of one H x W sample.
struct Sample {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> image;           // [3, H, W] in [0, 1]
  std::vector<std::uint8_t> semseg;   // [H, W], 0..K
  std::vector<std::uint8_t> parts;    // [H, W], 0 background, 1..4 quadrant of the covering shape
  std::vector<std::uint8_t> saliency; // [H, W], semseg > 0
  std::vector<float> normals;         // [3, H, W] unit vectors
};

// Signed distance (negative inside) from pixel-space point (x, y) to a shape.
double signed_distance(const SceneShape& s, double x, double y);

Scene random_scene(Rng rng, std::int64_t size);
Sample render_scene(const Scene& scene, std::int64_t size);
// Sample `id` of the stream rooted at `seed`; pure in (seed, id, size).
Sample generate_sample(std::uint64_t seed, std::uint64_t id, std::int64_t size);

enum class Split { kTrain, kVal };

// Materialized split. Train ids are [0, n); val ids start at 2^32 so the two
// ranges never meet.
class Dataset {
 public:
  Dataset(Split split, const DataConfig& cfg, std::int64_t image_size);

  Split split() const { return split_; }
  std::int64_t size() const { return static_cast<std::int64_t>(samples_.size()); }
  std::int64_t image_size() const { return image_size_; }
  const Sample& at(std::int64_t i) const { return samples_.at(static_cast<std::size_t>(i)); }
  static std::uint64_t sample_id(Split split, std::int64_t index);

 private:
  Split split_;
  std::int64_t image_size_;
  std::vector<Sample> samples_;
};

struct Batch {
  Tensor<float> images;  // [B, 3, H, W]
  std::vector<std::uint8_t> semseg, parts, saliency;  // [B, H, W]
  std::vector<float> normals;                         // [B, 3, H, W]
  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

Batch make_batch(const Dataset& data, const std::vector<std::int64_t>& indices);

// Deterministic permutation of [0, n) for one epoch.
std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch);
// Consecutive index groups of `batch_size` over `order`; the last group may
// be short.
std::vector<std::vector<std::int64_t>> make_batches(const std::vector<std::int64_t>& order,
                                                    std::int64_t batch_size);

// Writes <dir>/train and <dir>/val with one file per sample.
void export_dataset(const std::string& dir, const DataConfig& cfg, std::int64_t image_size);
void write_sample(const std::string& path, const Sample& s);
Sample read_sample(const std::string& path);

}  // namespace mtlora
