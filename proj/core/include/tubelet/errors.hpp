#pragma once

#include <stdexcept>
#include <string>

namespace tubelet {

/// A binary or text file does not follow its declared layout. `field` names
/// the first header field or record that failed validation.
class FormatError : public std::runtime_error {
 public:
  FormatError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Statistical input that admits no answer (single-class labels, zero variance).
class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tubelet
