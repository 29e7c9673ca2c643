#pragma once

#include <stdexcept>
#include <string>

namespace vcl {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or extent mismatch between tensors.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Caller violated an operation's precondition.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// File system / format failures.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// CAM methods need spatial convolutional feature maps; transformer
// checkpoints have none.
class CamUnsupportedArchitecture : public Error {
public:
    explicit CamUnsupportedArchitecture(const std::string& msg) : Error(msg) {}
};

} // namespace vcl
