#pragma once

#include <stdexcept>
#include <string>

namespace lorashear {

// Every failure raised by the library derives from Error so the CLI can map
// categories onto exit codes.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
   public:
    using Error::Error;
};

class ShapeError : public Error {
   public:
    using Error::Error;
};

class NumericError : public Error {
   public:
    using Error::Error;
};

class StateError : public Error {
   public:
    using Error::Error;
};

class FormatError : public Error {
   public:
    using Error::Error;
};

class StructureError : public Error {
   public:
    using Error::Error;
};

class AnalysisError : public Error {
   public:
    using Error::Error;
};

class CorruptionError : public Error {
   public:
    using Error::Error;
};

class TrainingError : public NumericError {
   public:
    using NumericError::NumericError;
};

class PlanError : public Error {
   public:
    using Error::Error;
};

class StageError : public Error {
   public:
    using Error::Error;
};

}  // namespace lorashear
