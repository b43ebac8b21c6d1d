#pragma once

#include <stdexcept>
#include <string>

namespace tuneshield {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad arguments, bad config, violated preconditions. CLI exit code 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

// Malformed input files; messages cite the offending line where known.
class ParseError : public Error {
public:
    using Error::Error;
};

// Duplicate ids, missing healing records, mismatched artifact sets.
class IntegrityError : public Error {
public:
    using Error::Error;
};

// A pool is too small for the requested sample; message carries required vs available.
class CapacityError : public Error {
public:
    using Error::Error;
};

// Token not present in a policy vocabulary, or vocabulary over capacity.
class VocabularyError : public Error {
public:
    using Error::Error;
};

// Backend or HTTP failure after retries; message carries retry metadata.
class TransportError : public Error {
public:
    using Error::Error;
};

// Backend cannot do what was asked of it (e.g. scoring on a generate-only backend).
class CapabilityError : public Error {
public:
    using Error::Error;
};

// Optimization produced a non-finite loss. Subclasses may carry the last finite state.
class TrainingError : public Error {
public:
    using Error::Error;
};

// Non-finite intermediate in a metric or objective.
class NumericError : public Error {
public:
    using Error::Error;
};

// Too many undetermined verdicts in one classification pass.
class AggregateError : public Error {
public:
    using Error::Error;
};

// A pipeline stage failed after validation succeeded. CLI exit code 3.
class StageError : public Error {
public:
    using Error::Error;
};

}  // namespace tuneshield
