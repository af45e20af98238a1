// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "mtlora/errors.hpp"

namespace mtlora {

namespace {

constexpr std::uint16_t kSampleVersion = 1;
constexpr double kPi = std::numbers::pi;

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

struct Vec2 {
  double x, y;
};

Vec2 to_local(const SceneShape& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double c = std::cos(s.rotation), sn = std::sin(s.rotation);
  return {c * dx + sn * dy, -sn * dx + c * dy};
}

double box_sdf(Vec2 p, double bx, double by) {
  const double qx = std::abs(p.x) - bx, qy = std::abs(p.y) - by;
  const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
}

// Exact distance to a convex polygon, negative inside.
double polygon_sdf(Vec2 p, const Vec2* v, int n) {
  double d = (p.x - v[0].x) * (p.x - v[0].x) + (p.y - v[0].y) * (p.y - v[0].y);
  double sign = 1.0;
  for (int i = 0, j = n - 1; i < n; j = i, ++i) {
    const double ex = v[j].x - v[i].x, ey = v[j].y - v[i].y;
    const double wx = p.x - v[i].x, wy = p.y - v[i].y;
    const double t = std::clamp((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0);
    const double bx = wx - ex * t, by = wy - ey * t;
    d = std::min(d, bx * bx + by * by);
    const bool c1 = p.y >= v[i].y, c2 = p.y < v[j].y, c3 = ex * wy > ey * wx;
    if ((c1 && c2 && c3) || (!c1 && !c2 && !c3)) sign = -sign;
  }
  return sign * std::sqrt(d);
}

std::array<float, 3> class_color(ShapeKind k, Rng& rng) {
  std::array<double, 3> base{};
  switch (k) {
    case ShapeKind::kCircle: base = {0.85, 0.25, 0.2}; break;
    case ShapeKind::kRectangle: base = {0.2, 0.75, 0.3}; break;
    case ShapeKind::kTriangle: base = {0.25, 0.3, 0.85}; break;
  }
  std::array<float, 3> c{};
  for (int i = 0; i < 3; ++i) {
    c[static_cast<std::size_t>(i)] =
        static_cast<float>(std::clamp(base[static_cast<std::size_t>(i)] + rng.uniform(-0.1, 0.1), 0.0, 1.0));
  }
  return c;
}

// Smooth background: a coarse random lattice, bilinearly interpolated, plus
// fine noise.
void paint_background(std::vector<float>& image, std::int64_t size, std::uint64_t seed) {
  Rng rng(seed);
  constexpr std::int64_t kLattice = 5;
  std::vector<double> lattice(sz(3 * kLattice * kLattice));
  for (auto& v : lattice) v = rng.uniform(0.3, 0.7);
  const std::int64_t plane = size * size;
  for (std::int64_t y = 0; y < size; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(size) * (kLattice - 1);
    const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(fy), kLattice - 2);
    const double ty = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < size; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(size) * (kLattice - 1);
      const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(fx), kLattice - 2);
      const double tx = fx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < 3; ++c) {
        auto at = [&](std::int64_t yy, std::int64_t xx) {
          return lattice[sz((c * kLattice + yy) * kLattice + xx)];
        };
        const double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                         ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        image[sz(c * plane + y * size + x)] =
            static_cast<float>(std::clamp(v + rng.uniform(-0.04, 0.04), 0.0, 1.0));
      }
    }
  }
}

template <typename V>
void put(std::ostream& out, V v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& in, const std::string& path) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(V))) {
    throw FormatError("truncated sample file '" + path + "'");
  }
  return v;
}

template <typename V>
void put_array(std::ostream& out, const std::vector<V>& a) {
  out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(V)));
}

template <typename V>
void get_array(std::istream& in, std::vector<V>& a, std::size_t n, const std::string& path) {
  a.resize(n);
  if (!in.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(n * sizeof(V)))) {
    throw FormatError("truncated sample file '" + path + "'");
  }
}

}  // namespace

double signed_distance(const SceneShape& s, double x, double y) {
  const Vec2 p = to_local(s, x, y);
  switch (s.kind) {
    case ShapeKind::kCircle:
      return std::sqrt(p.x * p.x + p.y * p.y) - s.size;
    case ShapeKind::kRectangle:
      return box_sdf(p, s.size * std::cos(s.aspect), s.size * std::sin(s.aspect));
    case ShapeKind::kTriangle: {
      Vec2 v[3];
      for (int i = 0; i < 3; ++i) {
        const double a = -kPi / 2 + 2 * kPi * i / 3;
        v[i] = {s.size * std::cos(a), s.size * std::sin(a)};
      }
      return polygon_sdf(p, v, 3);
    }
  }
  return 1.0;
}

Scene random_scene(Rng rng, std::int64_t size) {
  Scene scene;
  scene.noise_seed = rng.next_u64();
  const auto count = 1 + static_cast<int>(rng.below(4));
  const double s = static_cast<double>(size);
  for (int i = 0; i < count; ++i) {
    SceneShape sh;
    sh.kind = static_cast<ShapeKind>(1 + rng.below(3));
    sh.size = rng.uniform(0.14, 0.28) * s;
    sh.cx = rng.uniform(sh.size, s - sh.size);
    sh.cy = rng.uniform(sh.size, s - sh.size);
    sh.rotation = rng.uniform(0.0, 2 * kPi);
    sh.aspect = rng.uniform(0.45, 1.1);
    sh.color = class_color(sh.kind, rng);
    scene.shapes.push_back(sh);
  }
  return scene;
}

Sample render_scene(const Scene& scene, std::int64_t size) {
  if (size < 16) throw DomainError("samples need H, W >= 16, got " + std::to_string(size));
  Sample out;
  out.height = out.width = size;
  const std::int64_t plane = size * size;
  out.image.assign(sz(3 * plane), 0.0f);
  out.semseg.assign(sz(plane), 0);
  out.parts.assign(sz(plane), 0);
  out.saliency.assign(sz(plane), 0);
  out.normals.assign(sz(3 * plane), 0.0f);
  paint_background(out.image, size, scene.noise_seed);

  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const std::int64_t i = y * size + x;
      const SceneShape* top = nullptr;
      for (const auto& sh : scene.shapes) {
        if (signed_distance(sh, px, py) < 0.0) top = &sh;
      }
      double n[3] = {0.0, 0.0, 1.0};
      if (top != nullptr) {
        out.semseg[sz(i)] = static_cast<std::uint8_t>(top->kind);
        out.saliency[sz(i)] = 1;
        out.parts[sz(i)] =
            static_cast<std::uint8_t>(1 + (px >= top->cx ? 1 : 0) + (py >= top->cy ? 2 : 0));
        for (int c = 0; c < 3; ++c) out.image[sz(c * plane + i)] = top->color[sz(c)];
        constexpr double h = 0.5;
        const double gx = (signed_distance(*top, px + h, py) - signed_distance(*top, px - h, py)) / (2 * h);
        const double gy = (signed_distance(*top, px, py + h) - signed_distance(*top, px, py - h)) / (2 * h);
        const double len = std::sqrt(gx * gx + gy * gy + 1.0);
        n[0] = gx / len;
        n[1] = gy / len;
        n[2] = 1.0 / len;
      }
      for (int c = 0; c < 3; ++c) out.normals[sz(c * plane + i)] = static_cast<float>(n[c]);
    }
  }
  return out;
}

Sample generate_sample(std::uint64_t seed, std::uint64_t id, std::int64_t size) {
  return render_scene(random_scene(Rng(seed).fork(id), size), size);
}

std::uint64_t Dataset::sample_id(Split split, std::int64_t index) {
  const std::uint64_t base = split == Split::kTrain ? 0 : (std::uint64_t{1} << 32);
  return base + static_cast<std::uint64_t>(index);
}

Dataset::Dataset(Split split, const DataConfig& cfg, std::int64_t image_size)
    : split_(split), image_size_(image_size) {
  const std::int64_t n = split == Split::kTrain ? cfg.train_size : cfg.val_size;
  if (n < 1) throw UsageError("empty data split");
  samples_.reserve(sz(n));
  for (std::int64_t i = 0; i < n; ++i) {
    samples_.push_back(generate_sample(cfg.seed, sample_id(split, i), image_size));
  }
}

Batch make_batch(const Dataset& data, const std::vector<std::int64_t>& indices) {
  if (indices.empty()) throw UsageError("empty batch");
  const std::int64_t b = static_cast<std::int64_t>(indices.size());
  const std::int64_t s = data.image_size();
  const std::int64_t plane = s * s;
  std::vector<float> images;
  images.reserve(sz(b * 3 * plane));
  Batch batch;
  for (auto idx : indices) {
    const Sample& smp = data.at(idx);
    images.insert(images.end(), smp.image.begin(), smp.image.end());
    batch.semseg.insert(batch.semseg.end(), smp.semseg.begin(), smp.semseg.end());
    batch.parts.insert(batch.parts.end(), smp.parts.begin(), smp.parts.end());
    batch.saliency.insert(batch.saliency.end(), smp.saliency.begin(), smp.saliency.end());
    batch.normals.insert(batch.normals.end(), smp.normals.begin(), smp.normals.end());
  }
  batch.images = Tensor<float>({b, 3, s, s}, std::move(images));
  return batch;
}

std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::int64_t> order(sz(n));
  for (std::int64_t i = 0; i < n; ++i) order[sz(i)] = i;
  Rng rng = Rng(seed).fork("epoch").fork(static_cast<std::uint64_t>(epoch));
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[sz(i)], order[sz(j)]);
  }
  return order;
}

std::vector<std::vector<std::int64_t>> make_batches(const std::vector<std::int64_t>& order,
                                                    std::int64_t batch_size) {
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  std::vector<std::vector<std::int64_t>> out;
  for (std::size_t i = 0; i < order.size(); i += sz(batch_size)) {
    const std::size_t end = std::min(order.size(), i + sz(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

void write_sample(const std::string& path, const Sample& s) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write("MTDS", 4);
  put<std::uint16_t>(out, kSampleVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.height));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.width));
  put_array(out, s.image);
  put_array(out, s.semseg);
  put_array(out, s.parts);
  put_array(out, s.saliency);
  put_array(out, s.normals);
  if (!out) throw IoError("write failed for '" + path + "'");
}

Sample read_sample(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "MTDS", 4) != 0) {
    throw FormatError("'" + path + "' is not a sample file");
  }
  const auto version = get<std::uint16_t>(in, path);
  if (version != kSampleVersion) {
    throw FormatError("'" + path + "' has unsupported version " + std::to_string(version));
  }
  Sample s;
  s.height = get<std::uint32_t>(in, path);
  s.width = get<std::uint32_t>(in, path);
  const auto plane = sz(s.height * s.width);
  get_array(in, s.image, 3 * plane, path);
  get_array(in, s.semseg, plane, path);
  get_array(in, s.parts, plane, path);
  get_array(in, s.saliency, plane, path);
  get_array(in, s.normals, 3 * plane, path);
  return s;
}

void export_dataset(const std::string& dir, const DataConfig& cfg, std::int64_t image_size) {
  namespace fs = std::filesystem;
  for (Split split : {Split::kTrain, Split::kVal}) {
    const fs::path sub = fs::path(dir) / (split == Split::kTrain ? "train" : "val");
    std::error_code ec;
    fs::create_directories(sub, ec);
    if (ec) throw IoError("cannot create '" + sub.string() + "': " + ec.message());
    const std::int64_t n = split == Split::kTrain ? cfg.train_size : cfg.val_size;
    for (std::int64_t i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06lld.mtds", static_cast<long long>(i));
      write_sample((sub / name).string(),
                   generate_sample(cfg.seed, Dataset::sample_id(split, i), image_size));
    }
  }
}

}  // namespace mtlora
