#include "hatdiag/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "hatdiag/rng.hpp"

namespace hatdiag {

std::size_t Dataset::classes() const {
  if (labels.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  const std::size_t d = dims();
  Dataset out{Tensor(Shape{indices.size(), d}), {}};
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t src = indices[r];
    for (std::size_t j = 0; j < d; ++j) out.features[r * d + j] = features[src * d + j];
    out.labels.push_back(labels[src]);
  }
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return subset(idx);
}

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "blobs") return DatasetKind::kBlobs;
  if (name == "rings") return DatasetKind::kRings;
  if (name == "xor") return DatasetKind::kXor;
  throw std::invalid_argument("unknown dataset kind '" + name + "' (expected blobs|rings|xor)");
}

std::string dataset_kind_name(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kBlobs: return "blobs";
    case DatasetKind::kRings: return "rings";
    case DatasetKind::kXor: return "xor";
  }
  return "?";
}

namespace {
void sample_point(DatasetKind kind, int label, double noise, RngStream& rng, double& x, double& y) {
  switch (kind) {
    case DatasetKind::kBlobs: {
      const double c = label == 0 ? -1.0 : 1.0;
      x = c + noise * rng.normal();
      y = c + noise * rng.normal();
      return;
    }
    case DatasetKind::kRings: {
      // Concentric circles, inner radius 0.5 and outer radius 1.0.
      const double radius = label == 0 ? 0.5 : 1.0;
      const double theta = 2.0 * std::numbers::pi * rng.uniform();
      x = radius * std::cos(theta) + noise * rng.normal();
      y = radius * std::sin(theta) + noise * rng.normal();
      return;
    }
    case DatasetKind::kXor: {
      // Quadrant sign pattern; points are kept away from the axes.
      const double sx = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const double sy = label == 0 ? sx : -sx;
      x = sx * rng.uniform(0.1, 1.0) + noise * rng.normal();
      y = sy * rng.uniform(0.1, 1.0) + noise * rng.normal();
      return;
    }
  }
}
}  // namespace

DatasetSplits synth_dataset(DatasetKind kind, std::size_t n, double noise, std::uint64_t seed) {
  if (n < 30) throw std::invalid_argument("synth_dataset: n must be >= 30");
  if (!(noise >= 0)) throw std::invalid_argument("synth_dataset: noise must be >= 0");
  RngStream rng(seed, "dataset/" + dataset_kind_name(kind));
  Dataset all{Tensor(Shape{n, 2}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = i < n / 2 ? 0 : 1;
    double x = 0, y = 0;
    sample_point(kind, label, noise, rng, x, y);
    all.features[2 * i] = x;
    all.features[2 * i + 1] = y;
    all.labels[i] = label;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_u64() % (i + 1));
    std::swap(order[i], order[j]);
  }
  const std::size_t n_train = (n * 70) / 100;
  const std::size_t n_val = (n * 15) / 100;
  std::span<const std::size_t> idx(order);
  DatasetSplits splits{all.subset(idx.first(n_train)), all.subset(idx.subspan(n_train, n_val)),
                       all.subset(idx.subspan(n_train + n_val))};

  const std::size_t d = 2;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n_train; ++i) mean += splits.train.features[i * d + j];
    mean /= static_cast<double>(n_train);
    double var = 0.0;
    for (std::size_t i = 0; i < n_train; ++i) {
      const double c = splits.train.features[i * d + j] - mean;
      var += c * c;
    }
    const double sd = std::sqrt(var / static_cast<double>(n_train));
    const double inv = sd > 0 ? 1.0 / sd : 1.0;
    for (Dataset* part : {&splits.train, &splits.val, &splits.test})
      for (std::size_t i = 0; i < part->size(); ++i) {
        double& v = part->features[i * d + j];
        v = (v - mean) * inv;
      }
  }
  return splits;
}

}  // namespace hatdiag
