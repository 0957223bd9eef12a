#pragma once

#include <stdexcept>
#include <string>

namespace padapter {

// Violated precondition of an operation (bad argument, wrong state).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class RangeError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// Non-divisible image / patch geometry.
class GeometryError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed file contents (checkpoints, Netpbm, manifests).
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    explicit FormatError(const std::string& what) : std::runtime_error(what), offset_(0) {}

    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace padapter
