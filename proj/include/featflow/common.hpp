#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace featflow {

using TokenId = std::uint32_t;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Error taxonomy. The CLI maps each family onto its own exit code.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Unreadable/unwritable files, truncated containers, digest failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition (shape, range, length).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Two models whose parameter manifests differ were asked to merge.
class MergeCompatibilityError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

/// Activation matrices collected over different token streams were compared.
class ComparabilityError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

/// A metric is mathematically undefined for the given input (dead feature,
/// degenerate denominator, zero probability).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Failure talking to the external explanation provider.
class ProviderError : public Error {
 public:
  ProviderError(const std::string& what, bool retriable) : Error(what), retriable_(retriable) {}
  bool retriable() const noexcept { return retriable_; }

 private:
  bool retriable_;
};

/// The provider answered, but not in a form we can parse.
class ProtocolError : public ProviderError {
 public:
  ProtocolError(const std::string& what, std::string raw)
      : ProviderError(what, false), raw_(std::move(raw)) {}
  const std::string& raw_payload() const noexcept { return raw_; }

 private:
  std::string raw_;
};

/// 64-bit FNV-1a. Any single-byte change always changes the digest.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::string_view bytes);
std::string to_hex(std::uint64_t v);
std::uint64_t from_hex(std::string_view s);

/// Named, shaped view into a parameter tensor. Rows*cols == data.size().
template <typename Scalar>
struct TensorView {
  std::string name;
  std::span<Scalar> data;
  Eigen::Index rows;
  Eigen::Index cols;
};

}  // namespace featflow
