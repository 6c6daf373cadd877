// Little-endian binary plumbing for checkpoints and bundles. Doubles are
// written verbatim so round trips are bit-exact.

#pragma once

#include "fmosd/core.hpp"

#include <cstring>
#include <istream>
#include <ostream>

namespace fmosd::detail {

template <typename T>
inline void write_pod(std::ostream& out, const T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
inline T read_pod(std::istream& in) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error("parse-error", "truncated binary stream");
  return v;
}

inline void write_matrix(std::ostream& out, const MatrixXd& m) {
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline MatrixXd read_matrix(std::istream& in) {
  const auto rows = read_pod<std::uint64_t>(in);
  const auto cols = read_pod<std::uint64_t>(in);
  if (rows > (1u << 24) || cols > (1u << 24))
    throw Error("parse-error", "implausible matrix dimensions");
  MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw Error("parse-error", "truncated matrix payload");
  return m;
}

inline void write_vector(std::ostream& out, const VectorXd& v) {
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(sizeof(double) * v.size()));
}

inline VectorXd read_vector(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > (1u << 28)) throw Error("parse-error", "implausible vector length");
  VectorXd v(static_cast<Eigen::Index>(n));
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(sizeof(double) * v.size()));
  if (!in) throw Error("parse-error", "truncated vector payload");
  return v;
}

}  // namespace fmosd::detail
