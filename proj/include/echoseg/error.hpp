#pragma once

#include <stdexcept>
#include <string>

namespace echoseg {

/// Coarse error categories. The CLI maps each to a distinct exit code.
enum class ErrorCategory {
  internal = 1,
  usage = 2,
  io = 3,
  data = 4,
  checkpoint = 5,
  numeric = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

#define ECHOSEG_DEFINE_ERROR(Name, Category)                     \
  class Name : public Error {                                    \
   public:                                                       \
    explicit Name(const std::string& what)                       \
        : Error(ErrorCategory::Category, what) {}                \
  };

ECHOSEG_DEFINE_ERROR(InvalidShapeError, internal)
ECHOSEG_DEFINE_ERROR(MissingGraphError, internal)
ECHOSEG_DEFINE_ERROR(DegenerateBatchError, data)
ECHOSEG_DEFINE_ERROR(InvalidConfigError, usage)
ECHOSEG_DEFINE_ERROR(ConfigParseError, usage)
ECHOSEG_DEFINE_ERROR(InvalidInputError, data)
ECHOSEG_DEFINE_ERROR(InvalidLabelError, data)
ECHOSEG_DEFINE_ERROR(CorruptLabelError, data)
ECHOSEG_DEFINE_ERROR(CorruptFileError, io)
ECHOSEG_DEFINE_ERROR(MissingFileError, io)
ECHOSEG_DEFINE_ERROR(CheckpointMismatchError, checkpoint)
ECHOSEG_DEFINE_ERROR(UnpairedDataError, data)
ECHOSEG_DEFINE_ERROR(NonFiniteError, numeric)

#undef ECHOSEG_DEFINE_ERROR

}  // namespace echoseg
