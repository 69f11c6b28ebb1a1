#pragma once

#include <stdexcept>
#include <string>

namespace nowcast {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class OutOfBounds : public Error {
 public:
  using Error::Error;
};

class DegenerateStats : public Error {
 public:
  using Error::Error;
};

// Corrupt or inconsistent file on disk (dataset records, manifests, checkpoints).
class CorruptData : public Error {
 public:
  using Error::Error;
};

class CountMismatch : public CorruptData {
 public:
  using CorruptData::CorruptData;
};

// Non-finite training loss.
class Divergence : public Error {
 public:
  using Error::Error;
};

}  // namespace nowcast
