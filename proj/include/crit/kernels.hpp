#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "crit/dataset.hpp"
#include "crit/nn.hpp"

namespace crit::kernels {

/// Scores a row-major batch of windows; writes one value per row.
using BatchScorer = std::function<void(const nn::Matrix& X, std::span<double> out)>;
/// Scores one window.
using SampleScorer = std::function<double(std::span<const double> x)>;

inline constexpr std::size_t kDefaultChunk = 4096;

/// Scores the samples named by `indices` (every sample when empty), in
/// parallel over fixed chunks. Each chunk is independent, so the result does
/// not depend on the thread count.
std::vector<double> score(const LabeledDataset& ds, std::span<const std::uint32_t> indices, const BatchScorer& fn,
                          std::size_t chunk = kDefaultChunk);

/// Serial straight-line counterpart of score(); the reference for tests and
/// the benchmark baseline.
std::vector<double> score_serial(const LabeledDataset& ds, std::span<const std::uint32_t> indices,
                                 const SampleScorer& fn);

/// Applies `fn` to row blocks of an explicit matrix (rows = samples).
std::vector<double> score_rows(const nn::Matrix& X, const BatchScorer& fn, std::size_t chunk = kDefaultChunk);

int max_threads();

}  // namespace crit::kernels
