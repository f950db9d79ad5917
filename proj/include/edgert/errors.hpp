#pragma once

#include <stdexcept>
#include <string>

namespace edgert {

// Base of every runtime error; kind() is the stable class name.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define EDGERT_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  }

// configuration and artifact loading
EDGERT_DEFINE_ERROR(ParseError);
EDGERT_DEFINE_ERROR(ValidationError);
EDGERT_DEFINE_ERROR(FormatError);
EDGERT_DEFINE_ERROR(ShapeError);
EDGERT_DEFINE_ERROR(ChecksumError);
EDGERT_DEFINE_ERROR(ArchMismatch);

// kv cache and request lifecycle
EDGERT_DEFINE_ERROR(CapacityError);
EDGERT_DEFINE_ERROR(RangeError);
EDGERT_DEFINE_ERROR(UnknownRequest);
EDGERT_DEFINE_ERROR(SlotBusy);
EDGERT_DEFINE_ERROR(EngineClosed);

// numerics
EDGERT_DEFINE_ERROR(DegenerateRow);

// dispatch, kernels and plans
EDGERT_DEFINE_ERROR(NoKernel);
EDGERT_DEFINE_ERROR(UnknownImpl);
EDGERT_DEFINE_ERROR(DuplicateImpl);
EDGERT_DEFINE_ERROR(NoCandidates);
EDGERT_DEFINE_ERROR(CaptureUnsupported);
EDGERT_DEFINE_ERROR(GeometryDrift);

#undef EDGERT_DEFINE_ERROR

}  // namespace edgert
