#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "bflow/butterfly.hpp"
#include "bflow/rng.hpp"
#include "bflow/shape.hpp"

namespace bflow {

/// Seeded synthetic dataset with disjoint train/val/test streams.
/// All generators are pure functions of their parameters and seed.
struct Dataset {
    std::string kind;
    DataShape shape;
    std::size_t n_train = 0, n_val = 0, n_test = 0;
    std::vector<double> train, val, test; // row-major [n][dim]
    std::uint64_t seed = 0;
    int n_bits = 0; // 0 = continuous

    // dataset-wide permutation when the generator scrambles coordinates
    std::vector<std::size_t> perm;

    // exact differential entropy per dim when the ground truth is known
    double entropy_per_dim = std::numeric_limits<double>::quiet_NaN();

    // integer payloads before dequantization (permuted_patterns)
    std::vector<int> raw_train, raw_val, raw_test;

    std::size_t dim() const { return shape.dim(); }
    const std::vector<double>& split(const std::string& name) const;
    std::size_t split_n(const std::string& name) const;
};

/// 2D point clouds (two_rings, moons, checkerboard), normalized to zero
/// mean and unit scale per dimension using train-split statistics.
Dataset toy2d(const std::string& kind, std::size_t n, std::uint64_t seed);

/// Standard normal in `dim` dimensions (evaluation oracle baseline).
Dataset gaussian(std::size_t dim, std::size_t n, std::uint64_t seed);

/// x = P A eps with A unit-diagonal lower-banded (bandwidth 2, off
/// diagonals 0.9 and 0.5) and P a fixed seeded coordinate permutation.
/// The exact Gaussian log-density is available via permuted_gaussian_logp.
Dataset permuted_gaussian(std::size_t dim, std::size_t n, std::uint64_t seed);

double permuted_gaussian_logp(const Dataset& ds, std::span<const double> x);

/// Per-sample harmonic series with a shared fundamental from {2,3,4}
/// cycles per window, per-channel phases, and an additive noise floor;
/// min-max normalized to [-1, 1] across the whole dataset.
Dataset periodic1d(std::size_t length, std::size_t channels, std::size_t n,
                   std::uint64_t seed, int n_harmonics = 3, double noise = 0.02);

struct PatternOptions {
    bool apply_perm = true;
    bool dequantize = true;
};

/// Random rectangles and crosses on a side x side canvas, 8-bit
/// intensities, one dataset-wide pixel permutation (stored in `perm`).
Dataset permuted_patterns(std::size_t side, std::size_t n, std::uint64_t seed,
                          PatternOptions opts = {});

/// x = (v + u) / 2^n_bits with u ~ Uniform[0, 1).
std::vector<double> dequantize(const std::vector<int>& values, int n_bits,
                               std::uint64_t seed);

/// Epoch-shuffled minibatches; the last partial batch of each epoch is
/// dropped. Shuffles differ across epochs but replay exactly per seed.
class BatchIter {
public:
    BatchIter(const std::vector<double>& rows, std::size_t n, std::size_t dim,
              std::size_t batch_size, std::uint64_t seed);

    std::span<const double> next();
    std::size_t batch_size() const { return batch_; }
    std::size_t batches_per_epoch() const { return n_ / batch_; }
    std::size_t epoch() const { return epoch_; }

private:
    void reshuffle();

    const std::vector<double>* rows_;
    std::size_t n_, dim_, batch_;
    std::uint64_t seed_;
    std::size_t epoch_ = 0, cursor_ = 0;
    std::vector<std::size_t> order_;
    std::vector<double> buffer_;
};

/// `bfdata v1 <kind> <shape> <n>` header plus little-endian f64 payload.
void write_bfdata(const std::string& path, const std::string& kind, const DataShape& shape,
                  const std::vector<double>& rows, std::size_t n);

struct BfData {
    std::string kind;
    DataShape shape;
    std::size_t n = 0;
    std::vector<double> rows;
};

BfData read_bfdata(const std::string& path);

} // namespace bflow
