#pragma once

#include <stdexcept>
#include <string>

namespace pod {

// Error taxonomy shared across the library. The CLI maps these onto distinct
// exit codes (see tools/pod_main.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller violated an operation's contract (bad shape, empty input, out-of-range value).
class InvalidInput : public Error {
public:
    using Error::Error;
};

// A KV cache access found missing or inconsistent entries.
class CacheCorruption : public Error {
public:
    using Error::Error;
};

// An on-disk artifact is malformed (bad magic, truncated payload, schema mismatch).
class FormatError : public Error {
public:
    using Error::Error;
};

// Two artifacts that must agree (model vs. blocks, manifest hashes) do not.
class ConfigMismatch : public Error {
public:
    using Error::Error;
};

// Filesystem-level failure.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace pod
