#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nshdf {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text/bytes. `line()` is 1-based, 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class StructuralError : public Error {
 public:
  using Error::Error;
};

class NonManifoldError : public Error {
 public:
  NonManifoldError(const std::string& what, std::vector<std::pair<int, int>> edges)
      : Error(what), edges_(std::move(edges)) {}
  const std::vector<std::pair<int, int>>& edges() const noexcept { return edges_; }

 private:
  std::vector<std::pair<int, int>> edges_;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class FieldError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  NumericError(const std::string& layer, const std::string& what)
      : Error(layer + ": " + what), layer_(layer) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class InferenceError : public Error {
 public:
  using Error::Error;
};

/// A refinement request that was declined, with the reason in what().
class RefinementDeclined : public Error {
 public:
  using Error::Error;
};

/// Wraps a stage failure with the stage's name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace nshdf
