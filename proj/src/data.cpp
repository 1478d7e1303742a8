#include "bflow/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>

namespace bflow {

namespace {

enum : std::uint64_t { kTagTrain = 101, kTagVal = 202, kTagTest = 303, kTagPerm = 404,
                       kTagDequant = 505, kTagShuffle = 606 };

double clipped_normal(CounterRng& rng, double clip = 3.0) {
    return std::clamp(rng.normal(), -clip, clip);
}

std::vector<std::size_t> seeded_perm(std::size_t n, std::uint64_t key) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    CounterRng rng(key);
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
    return p;
}

void normalize_with_train_stats(Dataset& ds) {
    const std::size_t d = ds.dim();
    std::vector<double> mean(d, 0.0), std_dev(d, 0.0);
    for (std::size_t i = 0; i < ds.n_train; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += ds.train[i * d + j];
    for (auto& v : mean) v /= static_cast<double>(ds.n_train);
    for (std::size_t i = 0; i < ds.n_train; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double dev = ds.train[i * d + j] - mean[j];
            std_dev[j] += dev * dev;
        }
    for (auto& v : std_dev) v = std::max(1e-9, std::sqrt(v / static_cast<double>(ds.n_train)));
    for (auto* split : {&ds.train, &ds.val, &ds.test})
        for (std::size_t i = 0; i < split->size() / d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                (*split)[i * d + j] = ((*split)[i * d + j] - mean[j]) / std_dev[j];
}

std::size_t heldout_size(std::size_t n) { return std::max<std::size_t>(1, n / 5); }

} // namespace

const std::vector<double>& Dataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split: " + name);
}

std::size_t Dataset::split_n(const std::string& name) const {
    if (name == "train") return n_train;
    if (name == "val") return n_val;
    if (name == "test") return n_test;
    throw std::invalid_argument("unknown split: " + name);
}

// ---------------------------------------------------------------------------
// 2D toys

namespace {

void fill_two_rings(std::vector<double>& out, std::size_t n, CounterRng& rng) {
    for (std::size_t i = 0; i < n; ++i) {
        const double base_r = rng.next_double() < 0.5 ? 1.0 : 2.0;
        const double r = base_r + 0.05 * clipped_normal(rng);
        const double a = rng.uniform(0.0, 2.0 * M_PI);
        out[2 * i] = r * std::cos(a);
        out[2 * i + 1] = r * std::sin(a);
    }
}

void fill_moons(std::vector<double>& out, std::size_t n, CounterRng& rng) {
    for (std::size_t i = 0; i < n; ++i) {
        const bool upper = rng.next_double() < 0.5;
        const double a = rng.uniform(0.0, M_PI);
        double x = std::cos(a), y = std::sin(a);
        if (!upper) {
            x = 1.0 - x;
            y = 0.5 - y;
        }
        out[2 * i] = x + 0.05 * clipped_normal(rng);
        out[2 * i + 1] = y + 0.05 * clipped_normal(rng);
    }
}

void fill_checkerboard(std::vector<double>& out, std::size_t n, CounterRng& rng) {
    std::size_t filled = 0;
    while (filled < n) {
        const double x = rng.uniform(-2.0, 2.0);
        const double y = rng.uniform(-2.0, 2.0);
        const long cx = static_cast<long>(std::floor(x));
        const long cy = static_cast<long>(std::floor(y));
        if (((cx + cy) % 2 + 2) % 2 == 0) continue;
        out[2 * filled] = x;
        out[2 * filled + 1] = y;
        ++filled;
    }
}

} // namespace

Dataset toy2d(const std::string& kind, std::size_t n, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("toy2d: n must be >= 1");
    Dataset ds;
    ds.kind = kind;
    ds.shape = DataShape::flat(2);
    ds.seed = seed;
    ds.n_train = n;
    ds.n_val = ds.n_test = heldout_size(n);
    ds.train.resize(2 * ds.n_train);
    ds.val.resize(2 * ds.n_val);
    ds.test.resize(2 * ds.n_test);
    auto fill = [&](std::vector<double>& out, std::size_t count, std::uint64_t tag) {
        CounterRng rng(substream(seed, tag));
        if (kind == "two_rings") fill_two_rings(out, count, rng);
        else if (kind == "moons") fill_moons(out, count, rng);
        else if (kind == "checkerboard") fill_checkerboard(out, count, rng);
        else throw std::invalid_argument("toy2d: unknown kind " + kind);
    };
    fill(ds.train, ds.n_train, kTagTrain);
    fill(ds.val, ds.n_val, kTagVal);
    fill(ds.test, ds.n_test, kTagTest);
    normalize_with_train_stats(ds);
    return ds;
}

Dataset gaussian(std::size_t dim, std::size_t n, std::uint64_t seed) {
    Dataset ds;
    ds.kind = "gaussian";
    ds.shape = DataShape::flat(dim);
    ds.seed = seed;
    ds.n_train = n;
    ds.n_val = ds.n_test = heldout_size(n);
    ds.entropy_per_dim = 0.5 * (std::log(2.0 * M_PI) + 1.0);
    auto fill = [&](std::vector<double>& out, std::size_t count, std::uint64_t tag) {
        out.resize(count * dim);
        CounterRng rng(substream(seed, tag));
        for (auto& v : out) v = rng.normal();
    };
    fill(ds.train, ds.n_train, kTagTrain);
    fill(ds.val, ds.n_val, kTagVal);
    fill(ds.test, ds.n_test, kTagTest);
    return ds;
}

// ---------------------------------------------------------------------------
// Permuted banded Gaussian

namespace {
constexpr double kBand1 = 0.9;
constexpr double kBand2 = 0.5;
} // namespace

Dataset permuted_gaussian(std::size_t dim, std::size_t n, std::uint64_t seed) {
    if (!is_power_of_two(dim))
        throw std::invalid_argument("permuted_gaussian: dim must be a power of two");
    Dataset ds;
    ds.kind = "permuted_gaussian";
    ds.shape = DataShape::flat(dim);
    ds.seed = seed;
    ds.n_train = n;
    ds.n_val = ds.n_test = heldout_size(n);
    ds.perm = seeded_perm(dim, substream(seed, kTagPerm));
    // det(A) = 1, so the entropy is permutation invariant and exactly that
    // of a standard normal
    ds.entropy_per_dim = 0.5 * (std::log(2.0 * M_PI) + 1.0);
    auto fill = [&](std::vector<double>& out, std::size_t count, std::uint64_t tag) {
        out.resize(count * dim);
        CounterRng rng(substream(seed, tag));
        std::vector<double> eps(dim), y(dim);
        for (std::size_t i = 0; i < count; ++i) {
            for (auto& v : eps) v = rng.normal();
            for (std::size_t j = 0; j < dim; ++j) {
                double s = eps[j];
                if (j >= 1) s += kBand1 * eps[j - 1];
                if (j >= 2) s += kBand2 * eps[j - 2];
                y[j] = s;
            }
            for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] = y[ds.perm[j]];
        }
    };
    fill(ds.train, ds.n_train, kTagTrain);
    fill(ds.val, ds.n_val, kTagVal);
    fill(ds.test, ds.n_test, kTagTest);
    return ds;
}

double permuted_gaussian_logp(const Dataset& ds, std::span<const double> x) {
    const std::size_t dim = ds.dim();
    // undo the permutation (x[j] = y[perm[j]]), then solve the banded
    // lower-triangular system A z = y by forward substitution
    std::vector<double> y(dim);
    for (std::size_t j = 0; j < dim; ++j) y[ds.perm[j]] = x[j];
    std::vector<double> z(dim);
    double quad = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
        double v = y[j];
        if (j >= 1) v -= kBand1 * z[j - 1];
        if (j >= 2) v -= kBand2 * z[j - 2];
        z[j] = v;
        quad += v * v;
    }
    return -0.5 * (static_cast<double>(dim) * std::log(2.0 * M_PI) + quad);
}

// ---------------------------------------------------------------------------
// Periodic 1D

Dataset periodic1d(std::size_t length, std::size_t channels, std::size_t n,
                   std::uint64_t seed, int n_harmonics, double noise) {
    if (!is_power_of_two(length))
        throw std::invalid_argument("periodic1d: length must be a power of two");
    Dataset ds;
    ds.kind = "periodic1d";
    ds.shape = DataShape::seq(channels, length);
    ds.seed = seed;
    ds.n_train = n;
    ds.n_val = ds.n_test = heldout_size(n);
    const std::size_t d = ds.dim();
    auto fill = [&](std::vector<double>& out, std::size_t count, std::uint64_t tag) {
        out.resize(count * d);
        CounterRng rng(substream(seed, tag));
        for (std::size_t i = 0; i < count; ++i) {
            const double f = static_cast<double>(2 + rng.below(3)); // cycles per window
            for (std::size_t c = 0; c < channels; ++c) {
                double amp[8], phase[8];
                for (int h = 0; h < n_harmonics; ++h) {
                    amp[h] = rng.uniform(0.3, 1.0) / static_cast<double>(h + 1);
                    phase[h] = rng.angle();
                }
                for (std::size_t t = 0; t < length; ++t) {
                    double v = 0.0;
                    for (int h = 0; h < n_harmonics; ++h)
                        v += amp[h] * std::sin(2.0 * M_PI * (h + 1) * f *
                                                   static_cast<double>(t) /
                                                   static_cast<double>(length) +
                                               phase[h]);
                    v += noise * rng.normal();
                    out[i * d + ds.shape.index(t, c)] = v;
                }
            }
        }
    };
    fill(ds.train, ds.n_train, kTagTrain);
    fill(ds.val, ds.n_val, kTagVal);
    fill(ds.test, ds.n_test, kTagTest);
    // single min-max map to [-1, 1] across every split
    double lo = ds.train[0], hi = ds.train[0];
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
        for (double v : *split) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const double span = std::max(1e-12, hi - lo);
    for (auto* split : {&ds.train, &ds.val, &ds.test})
        for (double& v : *split) v = 2.0 * (v - lo) / span - 1.0;
    return ds;
}

// ---------------------------------------------------------------------------
// Permuted patterns

Dataset permuted_patterns(std::size_t side, std::size_t n, std::uint64_t seed,
                          PatternOptions opts) {
    if (!is_power_of_two(side))
        throw std::invalid_argument("permuted_patterns: side must be a power of two");
    Dataset ds;
    ds.kind = "permuted_patterns";
    ds.shape = DataShape::image(1, side, side);
    ds.seed = seed;
    ds.n_bits = 8;
    ds.n_train = n;
    ds.n_val = ds.n_test = heldout_size(n);
    const std::size_t d = side * side;
    if (opts.apply_perm) ds.perm = seeded_perm(d, substream(seed, kTagPerm));

    auto fill = [&](std::vector<int>& raw, std::size_t count, std::uint64_t tag) {
        raw.assign(count * d, 0);
        CounterRng rng(substream(seed, tag));
        for (std::size_t i = 0; i < count; ++i) {
            std::vector<int> img(d, 0);
            const int value = 64 + static_cast<int>(rng.below(192)); // 64..255
            if (rng.next_double() < 0.5) {
                const std::size_t w = 2 + rng.below(side / 2);
                const std::size_t h = 2 + rng.below(side / 2);
                const std::size_t x0 = rng.below(side - w + 1);
                const std::size_t y0 = rng.below(side - h + 1);
                for (std::size_t y = y0; y < y0 + h; ++y)
                    for (std::size_t x = x0; x < x0 + w; ++x) img[y * side + x] = value;
            } else {
                const std::size_t cx = 1 + rng.below(side - 2);
                const std::size_t cy = 1 + rng.below(side - 2);
                for (std::size_t x = 0; x < side; ++x) img[cy * side + x] = value;
                for (std::size_t y = 0; y < side; ++y) img[y * side + cx] = value;
            }
            if (opts.apply_perm)
                for (std::size_t j = 0; j < d; ++j) raw[i * d + j] = img[ds.perm[j]];
            else
                for (std::size_t j = 0; j < d; ++j) raw[i * d + j] = img[j];
        }
    };
    fill(ds.raw_train, ds.n_train, kTagTrain);
    fill(ds.raw_val, ds.n_val, kTagVal);
    fill(ds.raw_test, ds.n_test, kTagTest);

    auto materialize = [&](const std::vector<int>& raw, std::vector<double>& out,
                           std::uint64_t tag) {
        if (opts.dequantize) {
            out = dequantize(raw, 8, substream(seed, tag));
        } else {
            out.resize(raw.size());
            for (std::size_t j = 0; j < raw.size(); ++j) out[j] = raw[j];
        }
    };
    materialize(ds.raw_train, ds.train, kTagDequant + 1);
    materialize(ds.raw_val, ds.val, kTagDequant + 2);
    materialize(ds.raw_test, ds.test, kTagDequant + 3);
    return ds;
}

std::vector<double> dequantize(const std::vector<int>& values, int n_bits,
                               std::uint64_t seed) {
    const int limit = 1 << n_bits;
    CounterRng rng(seed);
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] < 0 || values[i] >= limit)
            throw std::invalid_argument("dequantize: value out of range");
        out[i] = (static_cast<double>(values[i]) + rng.next_double()) /
                 static_cast<double>(limit);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batching

BatchIter::BatchIter(const std::vector<double>& rows, std::size_t n, std::size_t dim,
                     std::size_t batch_size, std::uint64_t seed)
    : rows_(&rows), n_(n), dim_(dim), batch_(batch_size), seed_(seed) {
    if (batch_size < 1 || batch_size > n)
        throw std::invalid_argument("batch_iter: bad batch size");
    buffer_.resize(batch_ * dim_);
    reshuffle();
}

void BatchIter::reshuffle() {
    order_ = seeded_perm(n_, substream(seed_, kTagShuffle + epoch_));
    cursor_ = 0;
}

std::span<const double> BatchIter::next() {
    if (cursor_ + batch_ > n_) {
        ++epoch_;
        reshuffle();
    }
    for (std::size_t i = 0; i < batch_; ++i) {
        const std::size_t row = order_[cursor_ + i];
        std::copy_n(rows_->begin() + static_cast<std::ptrdiff_t>(row * dim_), dim_,
                    buffer_.begin() + static_cast<std::ptrdiff_t>(i * dim_));
    }
    cursor_ += batch_;
    return buffer_;
}

// ---------------------------------------------------------------------------
// bfdata io

void write_bfdata(const std::string& path, const std::string& kind, const DataShape& shape,
                  const std::vector<double>& rows, std::size_t n) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << "bfdata v1 " << kind << " " << shape.to_string() << " " << n << "\n";
    static_assert(sizeof(double) == 8);
    f.write(reinterpret_cast<const char*>(rows.data()),
            static_cast<std::streamsize>(rows.size() * sizeof(double)));
}

BfData read_bfdata(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string magic, version;
    BfData out;
    std::string shape_str;
    f >> magic >> version >> out.kind >> shape_str >> out.n;
    if (magic != "bfdata" || version != "v1")
        throw std::runtime_error("bad bfdata header in " + path);
    f.get(); // newline
    out.shape = DataShape::parse(shape_str);
    out.rows.resize(out.n * out.shape.dim());
    f.read(reinterpret_cast<char*>(out.rows.data()),
           static_cast<std::streamsize>(out.rows.size() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated bfdata payload in " + path);
    return out;
}

} // namespace bflow
