#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dfams {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatMap = Eigen::Map<RowMat>;
using ConstRowMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Vec>;
using ConstVecMap = Eigen::Map<const Vec>;

using TokenSeq = std::vector<int>;

// Class id 0 is reserved for queries that need no retrieval.
inline constexpr int kOthersLabel = 0;

enum class ErrorKind {
  config,
  input,
  compatibility,
  numerical,
  degenerate,
  io,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& msg);

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

/// Process exit code for an error kind (0 is success).
int exit_code(ErrorKind kind);

/// 64-bit FNV-1a, used for parameter checksums and artifact fingerprints.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n);
  void update(std::span<const double> values) { update(values.data(), values.size_bytes()); }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void update_value(const T& v) {
    update(&v, sizeof(T));
  }
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 1469598103934665603ULL;
};

std::uint64_t checksum(std::span<const double> values);
std::string hex64(std::uint64_t v);

bool all_finite(std::span<const double> values);

}  // namespace dfams
