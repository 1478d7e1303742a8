#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bflow {

/// A butterfly pair (or LU pivot) with zero determinant where an inverse
/// was requested. Carries the offending pair index.
class SingularFactorError : public std::runtime_error {
public:
    SingularFactorError(std::size_t pair_index, const std::string& what)
        : std::runtime_error(what), pair_index_(pair_index) {}
    std::size_t pair_index() const { return pair_index_; }

private:
    std::size_t pair_index_;
};

/// Loss became non-finite (a factor went exactly singular, or activations
/// overflowed). Carries the layer that produced the marker.
class NonFiniteLossError : public std::runtime_error {
public:
    explicit NonFiniteLossError(const std::string& layer_id)
        : std::runtime_error("non-finite loss at layer: " + layer_id),
          layer_id_(layer_id) {}
    const std::string& layer_id() const { return layer_id_; }

private:
    std::string layer_id_;
};

class NonFiniteGradientError : public std::runtime_error {
public:
    explicit NonFiniteGradientError(const std::string& param)
        : std::runtime_error("non-finite gradient for parameter: " + param) {}
};

class CorruptCheckpointError : public std::runtime_error {
public:
    explicit CorruptCheckpointError(const std::string& what)
        : std::runtime_error("corrupt checkpoint: " + what) {}
};

class ShapeMismatchError : public std::runtime_error {
public:
    explicit ShapeMismatchError(const std::string& what)
        : std::runtime_error("shape mismatch: " + what) {}
};

} // namespace bflow
