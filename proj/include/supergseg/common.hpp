#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace supergseg {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;
using Mat2 = Eigen::Matrix2d;
using VecX = Eigen::VectorXd;
/// Row-major dense matrix; one row per item (anchor, Gaussian, pixel sample).
using MatX = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Error taxonomy. Every failure the library reports is one of these.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class DomainError : public Error {
 public:
  using Error::Error;
};
class ContractError : public Error {
 public:
  using Error::Error;
};
class IngestionError : public Error {
 public:
  using Error::Error;
};
class GenerationError : public Error {
 public:
  using Error::Error;
};
class StageOrderError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (at byte " + std::to_string(byte_offset) + ")"), byte_offset_(byte_offset) {}
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

/// Worker count used by the parallel loops. Defaults to the hardware thread
/// count capped at 8; set_worker_count(1) forces serial execution.
std::size_t worker_count();
void set_worker_count(std::size_t n);

/// Runs fn(begin, end, worker) over [0, n) split into contiguous chunks, one
/// per worker. Chunk boundaries depend only on n and the worker count.
void parallel_chunks(std::size_t n, const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

/// Informational messages go to stderr unless silenced.
void log_info(const std::string& message);
void set_logging(bool enabled);

}  // namespace supergseg
