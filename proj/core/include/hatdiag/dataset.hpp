#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hatdiag/tensor.hpp"

namespace hatdiag {

struct Dataset {
  Tensor features;  // (n, d)
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dims() const { return features.cols(); }
  std::size_t classes() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset head(std::size_t n) const;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

enum class DatasetKind { kBlobs, kRings, kXor };

DatasetKind parse_dataset_kind(const std::string& name);
std::string dataset_kind_name(DatasetKind kind);

/// Balanced two-class 2-D data, shuffled and split 70/15/15; features are
/// standardised with the train split's mean and standard deviation.
DatasetSplits synth_dataset(DatasetKind kind, std::size_t n, double noise, std::uint64_t seed);

}  // namespace hatdiag
