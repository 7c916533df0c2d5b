// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace meteora {

enum class ErrorKind {
    dimension,
    parameter,
    numeric,
    configuration,
    resource,
    io,
    corrupt,
    training,
    generation,
    internal,
};

const char* to_string(ErrorKind kind) noexcept;

/// Base for every error the library throws. The kind drives CLI exit codes.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define METEORA_DEFINE_ERROR(Name, Kind)                                   \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
    };

METEORA_DEFINE_ERROR(DimensionError, dimension)
METEORA_DEFINE_ERROR(ParameterError, parameter)
METEORA_DEFINE_ERROR(NumericError, numeric)
METEORA_DEFINE_ERROR(ConfigurationError, configuration)
METEORA_DEFINE_ERROR(ResourceError, resource)
METEORA_DEFINE_ERROR(IoError, io)
METEORA_DEFINE_ERROR(CorruptFileError, corrupt)
METEORA_DEFINE_ERROR(TrainingError, training)
METEORA_DEFINE_ERROR(GenerationError, generation)
METEORA_DEFINE_ERROR(InternalError, internal)

#undef METEORA_DEFINE_ERROR

inline const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::resource: return "resource";
    case ErrorKind::io: return "io";
    case ErrorKind::corrupt: return "corrupt";
    case ErrorKind::training: return "training";
    case ErrorKind::generation: return "generation";
    case ErrorKind::internal: return "internal";
    }
    return "unknown";
}

} // namespace meteora
