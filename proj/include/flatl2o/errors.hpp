// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace flatl2o {

/// Base class for all toolkit errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnboundLeaf : Error {
  std::size_t node;
  explicit UnboundLeaf(std::size_t n)
      : Error("unbound leaf node " + std::to_string(n)), node(n) {}
};

struct NonFinite : Error {
  std::size_t node;
  explicit NonFinite(std::size_t n)
      : Error("non-finite value at node " + std::to_string(n)), node(n) {}
};

struct DimMismatch : Error {
  DimMismatch(std::size_t expected, std::size_t got)
      : Error("dimension mismatch: expected " + std::to_string(expected) +
              ", got " + std::to_string(got)) {}
};

struct TooLarge : Error {
  explicit TooLarge(std::size_t p, std::size_t limit)
      : Error("dense Hessian limited to p <= " + std::to_string(limit) +
              ", got p = " + std::to_string(p)) {}
};

struct InvalidSpectrum : Error {
  using Error::Error;
};

struct ArchMismatch : Error {
  using Error::Error;
};

struct BadMagic : Error {
  std::uint32_t expected, found;
  BadMagic(std::uint32_t e, std::uint32_t f)
      : Error("bad IDX magic: expected " + std::to_string(e) + ", found " +
              std::to_string(f)),
        expected(e), found(f) {}
};

struct Truncated : Error {
  using Error::Error;
};

struct CountMismatch : Error {
  CountMismatch(std::size_t images, std::size_t labels)
      : Error("IDX image/label count mismatch: " + std::to_string(images) +
              " vs " + std::to_string(labels)) {}
};

struct ChainDiverged : Error {
  ChainDiverged() : Error("SGLD chain diverged") {}
};

struct GridTooNarrow : Error {
  using Error::Error;
};

struct UnrollDiverged : Error {
  int step;
  explicit UnrollDiverged(int t)
      : Error("unroll diverged at step " + std::to_string(t)), step(t) {}
};

struct MetaDiverged : Error {
  MetaDiverged() : Error("meta-training diverged (5 consecutive failed unrolls)") {}
};

struct AllDiverged : Error {
  AllDiverged() : Error("every learning rate in the grid diverged") {}
};

struct UnknownMetric : Error {
  explicit UnknownMetric(const std::string& m) : Error("unknown metric: " + m) {}
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace flatl2o
