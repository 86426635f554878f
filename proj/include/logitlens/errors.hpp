#pragma once

#include <stdexcept>
#include <string>

namespace logitlens {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Checkpoint / file loading failures.
class LoadError : public Error {
public:
    using Error::Error;
};

/// A tensor required by the naming convention is absent from the container.
class MissingTensorError : public LoadError {
public:
    explicit MissingTensorError(const std::string& tensor_name)
        : LoadError("missing tensor: " + tensor_name), tensor(tensor_name) {}
    std::string tensor;
};

/// Tensor (or vector pair) dimensions disagree with what the caller expects.
class ShapeMismatchError : public LoadError {
public:
    using LoadError::LoadError;
};

class InvalidInputError : public Error {
public:
    using Error::Error;
};

class EmptyInputError : public InvalidInputError {
public:
    using InvalidInputError::InvalidInputError;
};

/// Sequence longer than the model's maximum context.
class ContextOverflowError : public InvalidInputError {
public:
    using InvalidInputError::InvalidInputError;
};

/// Layer, position, token id or k outside its valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf where only finite values are allowed.
class NumericsError : public Error {
public:
    using Error::Error;
};

/// Not enough distractor documents to build the requested prompt.
class PoolExhaustedError : public Error {
public:
    using Error::Error;
};

/// Probe training data with fewer than two classes.
class DegenerateLabelsError : public Error {
public:
    using Error::Error;
};

}  // namespace logitlens
