#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace bflow {

enum class ShapeKind { Flat, Seq1D, Image2D };

/// Tensor geometry with a canonical flattening: channel-fastest within a
/// site, sites in row-major order (flat index = site * channels + c).
/// Flat data is channels = D with a single site.
struct DataShape {
    ShapeKind kind = ShapeKind::Flat;
    std::size_t channels = 0;
    std::size_t height = 1; // 2D only
    std::size_t width = 1;  // 2D: columns; 1D: sequence length

    static DataShape flat(std::size_t d) { return {ShapeKind::Flat, d, 1, 1}; }
    static DataShape seq(std::size_t c, std::size_t t) { return {ShapeKind::Seq1D, c, 1, t}; }
    static DataShape image(std::size_t c, std::size_t h, std::size_t w) {
        return {ShapeKind::Image2D, c, h, w};
    }

    std::size_t sites() const { return kind == ShapeKind::Flat ? 1 : height * width; }
    std::size_t dim() const { return channels * sites(); }
    std::size_t index(std::size_t site, std::size_t c) const { return site * channels + c; }

    bool operator==(const DataShape&) const = default;

    std::string to_string() const {
        switch (kind) {
            case ShapeKind::Flat: return std::to_string(channels);
            case ShapeKind::Seq1D:
                return std::to_string(channels) + "x" + std::to_string(width);
            case ShapeKind::Image2D:
                return std::to_string(channels) + "x" + std::to_string(height) + "x" +
                       std::to_string(width);
        }
        return "";
    }

    static DataShape parse(const std::string& s) {
        std::vector<std::size_t> parts;
        std::size_t pos = 0;
        while (pos <= s.size()) {
            const std::size_t next = s.find('x', pos);
            const std::string tok = s.substr(pos, next == std::string::npos ? next : next - pos);
            parts.push_back(static_cast<std::size_t>(std::stoull(tok)));
            if (next == std::string::npos) break;
            pos = next + 1;
        }
        if (parts.size() == 1) return flat(parts[0]);
        if (parts.size() == 2) return seq(parts[0], parts[1]);
        if (parts.size() == 3) return image(parts[0], parts[1], parts[2]);
        throw std::invalid_argument("bad shape string: " + s);
    }
};

/// Space-to-channel reshuffle. 2D: (C,H,W) -> (4C,H/2,W/2) with quadrant
/// order top-left, top-right, bottom-left, bottom-right; 1D: (C,T) ->
/// (2C,T/2) pairing adjacent timesteps. Volume preserving, log-det 0.
inline DataShape squeezed_shape(const DataShape& s) {
    if (s.kind == ShapeKind::Image2D) {
        if (s.height % 2 != 0 || s.width % 2 != 0)
            throw std::invalid_argument("squeeze: spatial dims must be even");
        return DataShape::image(4 * s.channels, s.height / 2, s.width / 2);
    }
    if (s.kind == ShapeKind::Seq1D) {
        if (s.width % 2 != 0)
            throw std::invalid_argument("squeeze: sequence length must be even");
        return DataShape::seq(2 * s.channels, s.width / 2);
    }
    return s; // flat data has no spatial axes to fold
}

/// Gather map: out[i] = in[map[i]].
inline std::vector<std::size_t> squeeze_map(const DataShape& in) {
    const DataShape out = squeezed_shape(in);
    std::vector<std::size_t> map(in.dim());
    if (in.kind == ShapeKind::Image2D) {
        for (std::size_t h = 0; h < out.height; ++h)
            for (std::size_t w = 0; w < out.width; ++w)
                for (std::size_t q = 0; q < 4; ++q)
                    for (std::size_t c = 0; c < in.channels; ++c) {
                        const std::size_t ih = 2 * h + q / 2;
                        const std::size_t iw = 2 * w + q % 2;
                        map[out.index(h * out.width + w, q * in.channels + c)] =
                            in.index(ih * in.width + iw, c);
                    }
    } else if (in.kind == ShapeKind::Seq1D) {
        for (std::size_t t = 0; t < out.width; ++t)
            for (std::size_t q = 0; q < 2; ++q)
                for (std::size_t c = 0; c < in.channels; ++c)
                    map[out.index(t, q * in.channels + c)] = in.index(2 * t + q, c);
    } else {
        for (std::size_t i = 0; i < map.size(); ++i) map[i] = i;
    }
    return map;
}

} // namespace bflow
