#pragma once

#include <stdexcept>
#include <string>

namespace vitforge {

// Broad error families; the CLI maps each family onto a process exit code.
enum class ErrorKind {
  kUsage,      // bad flags, bad config values
  kData,       // malformed data, files, manifests
  kNumerical,  // non-finite values during training
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define VITFORGE_DEFINE_ERROR(Name, Kind)                       \
  class Name : public Error {                                   \
   public:                                                      \
    explicit Name(const std::string& what) : Error(Kind, what) {} \
  };

VITFORGE_DEFINE_ERROR(DimensionError, ErrorKind::kData)
VITFORGE_DEFINE_ERROR(ContractError, ErrorKind::kUsage)
VITFORGE_DEFINE_ERROR(LabelError, ErrorKind::kData)
VITFORGE_DEFINE_ERROR(SplitError, ErrorKind::kData)
VITFORGE_DEFINE_ERROR(UndefinedMetricError, ErrorKind::kData)
VITFORGE_DEFINE_ERROR(ConfigError, ErrorKind::kUsage)
VITFORGE_DEFINE_ERROR(UsageError, ErrorKind::kUsage)
VITFORGE_DEFINE_ERROR(IoError, ErrorKind::kData)
VITFORGE_DEFINE_ERROR(FormatError, ErrorKind::kData)
VITFORGE_DEFINE_ERROR(VersionError, ErrorKind::kData)
VITFORGE_DEFINE_ERROR(CorruptionError, ErrorKind::kData)
VITFORGE_DEFINE_ERROR(ManifestError, ErrorKind::kData)
VITFORGE_DEFINE_ERROR(NumericalError, ErrorKind::kNumerical)

#undef VITFORGE_DEFINE_ERROR

}  // namespace vitforge
