#pragma once

#include <stdexcept>
#include <string>

namespace ampforge {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// capture files / registry
struct ParseError : Error { using Error::Error; };
struct SchemaError : Error { using Error::Error; };
struct ValueError : Error { using Error::Error; };
struct EmptyRegistryError : Error { using Error::Error; };

// audio I/O
struct FormatError : Error { using Error::Error; };
struct EmptyClipError : Error { using Error::Error; };
struct CorpusError : Error { using Error::Error; };

// runtime / models
struct ConditioningError : Error { using Error::Error; };
struct DeviceIndexError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };

// metrics
struct DegenerateTargetError : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };

// augmentation
struct BatchSpecError : Error { using Error::Error; };

// encoder / classifiers
struct PairingError : Error { using Error::Error; };
struct EmptyError : Error { using Error::Error; };
struct DegenerateLabelsError : Error { using Error::Error; };

// trainer
struct CacheError : Error { using Error::Error; };
struct NonFiniteGradientError : Error { using Error::Error; };
struct CheckpointError : Error { using Error::Error; };

// cli / config files
struct ConfigError : Error { using Error::Error; };

}  // namespace ampforge
