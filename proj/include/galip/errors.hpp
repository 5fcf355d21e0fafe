#pragma once

#include <stdexcept>
#include <string>

namespace galip {

// Base class of every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class FileNotFound : public Error {
 public:
  explicit FileNotFound(const std::string& path)
      : Error("file not found: " + path), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// A stored tensor does not match the shape the configuration asks for.
class ShapeMismatch : public Error {
 public:
  ShapeMismatch(const std::string& name, const std::string& detail)
      : Error("shape mismatch for parameter '" + name + "': " + detail), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

// A container lacks an entry (or the entry's bytes are cut off).
class MissingKey : public Error {
 public:
  MissingKey(const std::string& key, const std::string& detail)
      : Error("missing key '" + key + "': " + detail), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(const std::string& term)
      : Error("non-finite loss term: " + term), term_(term) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

class DecodeError : public Error {
 public:
  using Error::Error;
};

}  // namespace galip
