// Frozen dense-feature extraction. Three kinds of backbone share one grid
// geometry (overlapping patches, default 8x8 patch / stride 4):
//
//   synthetic-positional  deterministic descriptors built from a patch
//                         intensity summary (dominant) plus sinusoidal
//                         encodings of the receptive-field center (weak
//                         smooth prior); content-driven but ambiguous
//                         wherever the texture repeats, like the transformer
//                         features it stands in for.
//   synthetic-noisy       positional descriptors plus a content-keyed random
//                         perturbation of fixed magnitude. The perturbation is
//                         derived from the image checksum, so the backbone
//                         stays frozen: identical images always produce
//                         bit-identical features.
//   external-vit          delegates to a registered adapter (in-process
//                         callback or precomputed descriptor files). Layer
//                         indices are 1-based; the toolkit never sees or
//                         updates adapter weights.

#pragma once

#include "fmosd/core.hpp"
#include "fmosd/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>

namespace fmosd {

enum class BackboneKind { synthetic_positional, synthetic_noisy, external_vit };
enum class HeadKind { key, query, value, token };

inline std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::synthetic_positional: return "synthetic-positional";
    case BackboneKind::synthetic_noisy: return "synthetic-noisy";
    case BackboneKind::external_vit: return "external-vit";
  }
  return "?";
}

inline std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::key: return "key";
    case HeadKind::query: return "query";
    case HeadKind::value: return "value";
    case HeadKind::token: return "token";
  }
  return "?";
}

inline BackboneKind backbone_kind_from_string(const std::string& s) {
  if (s == "synthetic-positional") return BackboneKind::synthetic_positional;
  if (s == "synthetic-noisy") return BackboneKind::synthetic_noisy;
  if (s == "external-vit") return BackboneKind::external_vit;
  throw Error("parse-error", "unknown backbone kind '" + s + "'");
}

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "key") return HeadKind::key;
  if (s == "query") return HeadKind::query;
  if (s == "value") return HeadKind::value;
  if (s == "token") return HeadKind::token;
  throw Error("parse-error", "unknown head kind '" + s + "'");
}

/// Descriptor dimensionality of the synthetic backbones: 4 frequency bands x
/// sin/cos x 4 axes (x, y, diagonal sum/difference) + patch mean + variance.
inline constexpr int kSyntheticDescriptorDim = 34;

struct BackboneSpec {
  BackboneKind kind = BackboneKind::synthetic_positional;
  int patch_size = 8;
  int stride = 4;
  int layer = 9;  // 1-based, "layer 9" means the ninth transformer block
  HeadKind head = HeadKind::key;
  int dim = kSyntheticDescriptorDim;  // expected channel count (external adapters)
  double noise_eps = 0.0;             // perturbation magnitude for synthetic-noisy
  std::uint64_t seed = 0;

  void validate() const {
    if (stride < 1 || patch_size < stride)
      throw Error("invalid-backbone-spec", "patch_size >= stride >= 1 required");
    if (layer < 1) throw Error("invalid-backbone-spec", "layer must be >= 1");
    if (dim < 1) throw Error("invalid-backbone-spec", "dim must be >= 1");
  }
};

struct PatchGridGeometry {
  int grid_h = 0;
  int grid_w = 0;
  CoordTransform transform;  // grid index -> receptive-field center, image px
};

inline PatchGridGeometry grid_geometry(int h, int w, const BackboneSpec& spec) {
  spec.validate();
  if (h < spec.patch_size || w < spec.patch_size)
    throw Error("image-too-small",
                std::to_string(h) + "x" + std::to_string(w) + " image cannot hold a " +
                    std::to_string(spec.patch_size) + "px patch");
  PatchGridGeometry g;
  g.grid_h = (h - spec.patch_size) / spec.stride + 1;
  g.grid_w = (w - spec.patch_size) / spec.stride + 1;
  double half = (spec.patch_size - 1) / 2.0;
  g.transform = CoordTransform{double(spec.stride), half, half};
  return g;
}

/// FNV-1a over dimensions and float32-truncated pixels; identifies the source
/// image in descriptor interchange files and keys the synthetic-noisy stream.
inline std::uint64_t image_checksum(const ImageGrid& img) {
  std::uint64_t h = kFnvOffset;
  h = fnv1a_u32(static_cast<std::uint32_t>(img.height), h);
  h = fnv1a_u32(static_cast<std::uint32_t>(img.width), h);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      h = fnv1a_f32(static_cast<float>(img.pixels(r, c)), h);
  return h;
}

/// Maps (image, spec) to a descriptor grid. The grid must match
/// grid_geometry(image, spec); the transform is attached by the caller.
using DescriptorProvider = std::function<MatrixXd(const ImageGrid&, const BackboneSpec&)>;

namespace detail {
inline DescriptorProvider& external_adapter_slot() {
  static DescriptorProvider provider;
  return provider;
}

inline void synthetic_descriptor(const ImageGrid& img, const BackboneSpec& spec,
                                 int r, int c, Eigen::Ref<VectorXd> out) {
  // Gain balance: the patch-intensity summary is amplified so content
  // dominates cosine similarity, the way pretrained transformer descriptors
  // behave; the 32 sinusoidal position dims are kept faint (~1% of squared
  // norm). Position must stay a weak tie-breaker: the decoders train against
  // self-anchored Gaussian targets, which cleanly readable position channels
  // can satisfy without looking at content at all, collapsing matching to
  // "same coordinates" instead of "same anatomy".
  constexpr double kPositionalGain = 0.05;
  constexpr double kIntensityGain = 15.0;
  constexpr double kVarianceScale = 4.0;
  const double half = (spec.patch_size - 1) / 2.0;
  const double cx = c * spec.stride + half;
  const double cy = r * spec.stride + half;
  const double ux = cx / img.width;
  const double uy = cy / img.height;
  const double axes[4] = {ux, uy, 0.5 * (ux + uy), 0.5 * (ux - uy + 1.0)};
  int k = 0;
  for (double axis : axes) {
    for (int f = 1; f <= 8; f *= 2) {
      double phase = 2.0 * std::numbers::pi * f * axis;
      out[k++] = kPositionalGain * std::sin(phase);
      out[k++] = kPositionalGain * std::cos(phase);
    }
  }
  double sum = 0.0, sum_sq = 0.0;
  const int r0 = r * spec.stride;
  const int c0 = c * spec.stride;
  for (int i = 0; i < spec.patch_size; ++i)
    for (int j = 0; j < spec.patch_size; ++j) {
      double v = img.pixels(r0 + i, c0 + j);
      sum += v;
      sum_sq += v * v;
    }
  const double n = double(spec.patch_size) * spec.patch_size;
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  out[k++] = kIntensityGain * (mean - 0.5);
  out[k++] = kIntensityGain * kVarianceScale * var;
  double norm = out.norm();
  if (norm > 0.0) out /= norm;
}
}  // namespace detail

/// Registers the in-process adapter used by kind=external-vit. Call once at
/// startup, before any concurrent extraction.
inline void register_external_adapter(DescriptorProvider provider) {
  detail::external_adapter_slot() = std::move(provider);
}

inline void clear_external_adapter() { detail::external_adapter_slot() = nullptr; }

inline FeatureMap extract_features(const ImageGrid& img, const BackboneSpec& spec) {
  PatchGridGeometry geom = grid_geometry(img.height, img.width, spec);
  FeatureMap f;
  f.h = geom.grid_h;
  f.w = geom.grid_w;
  f.transform = geom.transform;

  switch (spec.kind) {
    case BackboneKind::synthetic_positional:
    case BackboneKind::synthetic_noisy: {
      f.dim = kSyntheticDescriptorDim;
      f.data.resize(f.dim, f.cells());
      for (int r = 0; r < f.h; ++r)
        for (int c = 0; c < f.w; ++c)
          detail::synthetic_descriptor(img, spec, r, c, f.data.col(f.index(r, c)));
      if (spec.kind == BackboneKind::synthetic_noisy && spec.noise_eps > 0.0) {
        const std::uint64_t content_key = image_checksum(img);
        VectorXd g(f.dim);
        for (int j = 0; j < f.cells(); ++j) {
          Rng rng(mix_seed(spec.seed, content_key, static_cast<std::uint64_t>(j)));
          for (int d = 0; d < f.dim; ++d) g[d] = rng.normal();
          double norm = g.norm();
          if (norm > 0.0) f.data.col(j) += (spec.noise_eps / norm) * g;
        }
      }
      break;
    }
    case BackboneKind::external_vit: {
      const DescriptorProvider& provider = detail::external_adapter_slot();
      if (!provider)
        throw Error("no-backbone-adapter",
                    "kind=external-vit requires register_external_adapter()");
      MatrixXd grid = provider(img, spec);
      const Eigen::Index expected_cells =
          static_cast<Eigen::Index>(geom.grid_h) * geom.grid_w;
      if (grid.cols() != expected_cells || grid.rows() < 1) {
        std::ostringstream msg;
        msg << "adapter returned " << grid.rows() << "x" << grid.cols()
            << " for a " << geom.grid_h << "x" << geom.grid_w << " patch grid";
        throw Error("adapter-shape-mismatch", msg.str());
      }
      f.dim = static_cast<int>(grid.rows());
      f.data = std::move(grid);
      break;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Descriptor interchange file: precomputed external features produced by an
// out-of-process adapter. Little-endian layout, field order fixed:
//   magic "FMOSDDF1" (8 bytes)
//   u32 grid_h, u32 grid_w, u32 dim
//   f64 transform.scale, f64 transform.dx, f64 transform.dy
//   u64 source image checksum (image_checksum of the image it was computed on)
//   f32 data, cell-major: cell (r, c) occupies dim consecutive floats at
//       (r * grid_w + c) * dim
// ---------------------------------------------------------------------------

inline constexpr char kDescriptorFileMagic[8] = {'F', 'M', 'O', 'S', 'D', 'D', 'F', '1'};

inline void write_descriptor_file(const std::filesystem::path& path, const FeatureMap& f,
                                  std::uint64_t source_checksum) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io-error", "cannot write " + path.string());
  out.write(kDescriptorFileMagic, 8);
  auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_f64 = [&](double v) { out.write(reinterpret_cast<const char*>(&v), 8); };
  put_u32(static_cast<std::uint32_t>(f.h));
  put_u32(static_cast<std::uint32_t>(f.w));
  put_u32(static_cast<std::uint32_t>(f.dim));
  put_f64(f.transform.scale);
  put_f64(f.transform.dx);
  put_f64(f.transform.dy);
  out.write(reinterpret_cast<const char*>(&source_checksum), 8);
  std::vector<float> buf(static_cast<size_t>(f.cells()) * f.dim);
  for (int j = 0; j < f.cells(); ++j)
    for (int d = 0; d < f.dim; ++d)
      buf[static_cast<size_t>(j) * f.dim + d] = static_cast<float>(f.data(d, j));
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

struct DescriptorFile {
  FeatureMap features;
  std::uint64_t source_checksum = 0;
};

inline DescriptorFile read_descriptor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("file-not-found", "cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kDescriptorFileMagic, 8) != 0)
    throw Error("parse-error", path.string() + " is not a descriptor file");
  auto get_u32 = [&] {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  auto get_f64 = [&] {
    double v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  DescriptorFile df;
  df.features.h = static_cast<int>(get_u32());
  df.features.w = static_cast<int>(get_u32());
  df.features.dim = static_cast<int>(get_u32());
  df.features.transform.scale = get_f64();
  df.features.transform.dx = get_f64();
  df.features.transform.dy = get_f64();
  in.read(reinterpret_cast<char*>(&df.source_checksum), 8);
  if (!in || df.features.h < 1 || df.features.w < 1 || df.features.dim < 1)
    throw Error("parse-error", "bad descriptor file header in " + path.string());
  std::vector<float> buf(static_cast<size_t>(df.features.cells()) * df.features.dim);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw Error("parse-error", "truncated descriptor payload in " + path.string());
  df.features.data.resize(df.features.dim, df.features.cells());
  for (int j = 0; j < df.features.cells(); ++j)
    for (int d = 0; d < df.features.dim; ++d)
      df.features.data(d, j) = buf[static_cast<size_t>(j) * df.features.dim + d];
  return df;
}

/// Adapter that serves precomputed descriptor files from a directory, keyed by
/// source-image checksum: <dir>/<checksum-hex>.fmdf.
inline DescriptorProvider file_descriptor_provider(std::filesystem::path dir) {
  return [dir = std::move(dir)](const ImageGrid& img, const BackboneSpec& spec) {
    std::uint64_t key = image_checksum(img);
    std::ostringstream name;
    name << std::hex << key << ".fmdf";
    std::filesystem::path path = dir / name.str();
    if (!std::filesystem::exists(path))
      throw Error("no-backbone-adapter",
                  "no descriptor file for image checksum " + name.str());
    DescriptorFile df = read_descriptor_file(path);
    if (df.source_checksum != key)
      throw Error("checksum-mismatch", path.string() + " was computed on a different image");
    PatchGridGeometry geom = grid_geometry(img.height, img.width, spec);
    if (df.features.h != geom.grid_h || df.features.w != geom.grid_w)
      throw Error("adapter-shape-mismatch", path.string() + " grid does not match geometry");
    return df.features.data;
  };
}

}  // namespace fmosd
