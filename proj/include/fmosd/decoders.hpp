// Trainable global and local decoders. Both map a frozen descriptor grid to a
// dense feature map at a requested spatial size and output dimension (default
// 256), restoring the resolution lost to strided patch encoding:
//
//   global  two blocks of (bilinear x2 upsample -> 3x3 conv), ReLU between
//           blocks only, then an exact bilinear resize to the target size.
//   local   two transposed convolutions (kernel 4, stride 2, pad 1), ReLU
//           between, then the same exact resize.
//
// Final activations are unrectified so decoded features stay signed and
// cosine similarity remains informative. decode() optionally records a tape
// of intermediates; decode_backward() turns an upstream gradient on the
// output map into parameter gradients.

#pragma once

#include "fmosd/core.hpp"
#include "fmosd/nn.hpp"
#include "fmosd/rng.hpp"
#include "fmosd/serial.hpp"

#include <filesystem>
#include <fstream>

namespace fmosd {

inline constexpr int kDefaultDecoderDim = 256;

enum class DecoderStage { global, local };

inline std::string to_string(DecoderStage s) {
  return s == DecoderStage::global ? "global" : "local";
}

struct DecoderParams {
  DecoderStage stage = DecoderStage::global;
  int in_dim = 0;
  int hidden_dim = 0;  // equals out_dim under the two-layer default
  int out_dim = kDefaultDecoderDim;
  std::uint64_t seed = 0;
  std::uint64_t config_digest = 0;  // training-config digest stamped at save
  MatrixXd w1;  // (hidden_dim, in_dim * k * k)
  VectorXd b1;
  MatrixXd w2;  // (out_dim, hidden_dim * k * k)
  VectorXd b2;

  int kernel() const { return stage == DecoderStage::global ? 3 : 4; }

  bool finite() const {
    return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite();
  }
};

inline DecoderParams init_decoder(DecoderStage stage, int in_dim, int out_dim,
                                  std::uint64_t seed) {
  if (in_dim < 1 || out_dim < 1)
    throw Error("invalid-decoder-spec", "in_dim and out_dim must be >= 1");
  DecoderParams p;
  p.stage = stage;
  p.in_dim = in_dim;
  p.hidden_dim = out_dim;
  p.out_dim = out_dim;
  p.seed = seed;
  const int k = p.kernel();
  Rng rng(mix_seed(seed, stage == DecoderStage::global ? 0x67u : 0x6Cu));
  auto fill = [&](MatrixXd& w, int out_ch, int in_ch) {
    w.resize(out_ch, static_cast<Eigen::Index>(in_ch) * k * k);
    const double bound = std::sqrt(3.0 / (double(in_ch) * k * k));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
  };
  fill(p.w1, p.hidden_dim, in_dim);
  p.b1 = VectorXd::Zero(p.hidden_dim);
  fill(p.w2, p.out_dim, p.hidden_dim);
  p.b2 = VectorXd::Zero(p.out_dim);
  if (stage == DecoderStage::local && p.hidden_dim >= 2) {
    // Start the local decoder as a bilinear upsampler over an orthogonal
    // channel projection instead of pure noise. The short local schedule never
    // strays far from its starting point, so a random start leaves the output
    // an arbitrary mix in which faint-but-systematic input channels are the
    // easiest thing for the loss to amplify; a resampling start preserves the
    // input's own similarity geometry from iteration zero. Projections enter
    // as +/- channel pairs so the inter-layer ReLU passes signed values:
    // relu(s) - relu(-s) recovers s in the second layer. (The global decoder
    // keeps the random start: its long schedule retrains it thoroughly, and
    // the trained mixture outperforms a resampling start there.)
    const int pairs = std::min(p.hidden_dim / 2, in_dim);
    MatrixXd rnd(in_dim, pairs);
    for (Eigen::Index i = 0; i < rnd.size(); ++i) rnd.data()[i] = rng.uniform(-1.0, 1.0);
    const MatrixXd q = Eigen::HouseholderQR<MatrixXd>(rnd).householderQ() *
                       MatrixXd::Identity(in_dim, pairs);
    // Keep starting output norms comparable to the decoded global region so
    // neither vote dominates the fused sum out of the gate.
    constexpr double kLocalInitScale = 0.3;
    const double f[4] = {0.25, 0.75, 0.75, 0.25};  // separable bilinear taps, k=4 s=2
    p.w1.setZero();
    p.w2.setZero();
    for (int m = 0; m < pairs; ++m)
      for (int i = 0; i < in_dim; ++i)
        for (int ky = 0; ky < 4; ++ky)
          for (int kx = 0; kx < 4; ++kx) {
            const double w = q(i, m) * f[ky] * f[kx];
            p.w1(2 * m, (ky * 4 + kx) * in_dim + i) = w;
            p.w1(2 * m + 1, (ky * 4 + kx) * in_dim + i) = -w;
          }
    for (int c = 0; c < p.out_dim; ++c) {
      const int m = c % pairs;
      for (int ky = 0; ky < 4; ++ky)
        for (int kx = 0; kx < 4; ++kx) {
          const double w = kLocalInitScale * f[ky] * f[kx];
          p.w2(c, (ky * 4 + kx) * p.hidden_dim + 2 * m) = w;
          p.w2(c, (ky * 4 + kx) * p.hidden_dim + 2 * m + 1) = -w;
        }
    }
  }
  return p;
}

/// Intermediates needed by decode_backward. `up1`/`up2` are the conv inputs on
/// the global path; the local path feeds layers directly.
struct DecodeTape {
  int in_h = 0, in_w = 0;
  int h1 = 0, w1 = 0;
  int h2 = 0, w2 = 0;
  int out_h = 0, out_w = 0;
  MatrixXd input;
  MatrixXd up1;
  MatrixXd z1;
  MatrixXd up2;
  MatrixXd z2;
};

namespace detail {
inline FeatureMap decode_impl(const FeatureMap& f, const DecoderParams& p, int target_h,
                              int target_w, DecodeTape* tape) {
  if (f.dim != p.in_dim)
    throw Error("tensor-shape-mismatch", "decoder expects " + std::to_string(p.in_dim) +
                                             " channels, feature map has " +
                                             std::to_string(f.dim));
  if (target_h < f.h || target_w < f.w)
    throw Error("invalid-upsample-target",
                "target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                    " is smaller than the input grid " + std::to_string(f.h) + "x" +
                    std::to_string(f.w));
  const int k = p.kernel();
  DecodeTape local_tape;
  DecodeTape& t = tape ? *tape : local_tape;
  t.in_h = f.h;
  t.in_w = f.w;
  t.out_h = target_h;
  t.out_w = target_w;
  t.input = f.data;

  MatrixXd a1;
  if (p.stage == DecoderStage::global) {
    t.h1 = 2 * f.h;
    t.w1 = 2 * f.w;
    t.up1 = resize_bilinear(t.input, f.h, f.w, t.h1, t.w1);
    t.z1 = conv2d_forward(t.up1, t.h1, t.w1, p.w1, p.b1, k);
    a1 = relu_forward(t.z1);
    t.h2 = 2 * t.h1;
    t.w2 = 2 * t.w1;
    t.up2 = resize_bilinear(a1, t.h1, t.w1, t.h2, t.w2);
    t.z2 = conv2d_forward(t.up2, t.h2, t.w2, p.w2, p.b2, k);
  } else {
    t.z1 = conv_transpose2d_forward(t.input, f.h, f.w, p.w1, p.b1, k, 2, 1);
    t.h1 = conv_transpose_out_size(f.h, k, 2, 1);
    t.w1 = conv_transpose_out_size(f.w, k, 2, 1);
    a1 = relu_forward(t.z1);
    t.z2 = conv_transpose2d_forward(a1, t.h1, t.w1, p.w2, p.b2, k, 2, 1);
    t.h2 = conv_transpose_out_size(t.h1, k, 2, 1);
    t.w2 = conv_transpose_out_size(t.w1, k, 2, 1);
  }

  FeatureMap out;
  out.h = target_h;
  out.w = target_w;
  out.dim = p.out_dim;
  out.data = resize_bilinear(t.z2, t.h2, t.w2, target_h, target_w);
  out.transform = CoordTransform{};  // per-pixel output in the target frame
  return out;
}
}  // namespace detail

inline FeatureMap global_decode(const FeatureMap& f, const DecoderParams& p, int target_h,
                                int target_w, DecodeTape* tape = nullptr) {
  if (p.stage != DecoderStage::global)
    throw Error("decoder-stage-mismatch", "global_decode requires a global-stage decoder");
  return detail::decode_impl(f, p, target_h, target_w, tape);
}

inline FeatureMap local_decode(const FeatureMap& f, const DecoderParams& p, int crop_h,
                               int crop_w, DecodeTape* tape = nullptr) {
  if (p.stage != DecoderStage::local)
    throw Error("decoder-stage-mismatch", "local_decode requires a local-stage decoder");
  return detail::decode_impl(f, p, crop_h, crop_w, tape);
}

struct DecoderGrads {
  MatrixXd w1;
  VectorXd b1;
  MatrixXd w2;
  VectorXd b2;

  static DecoderGrads zeros_like(const DecoderParams& p) {
    DecoderGrads g;
    g.w1 = MatrixXd::Zero(p.w1.rows(), p.w1.cols());
    g.b1 = VectorXd::Zero(p.b1.size());
    g.w2 = MatrixXd::Zero(p.w2.rows(), p.w2.cols());
    g.b2 = VectorXd::Zero(p.b2.size());
    return g;
  }

  void accumulate(const DecoderGrads& o) {
    w1 += o.w1;
    b1 += o.b1;
    w2 += o.w2;
    b2 += o.b2;
  }
};

/// Backpropagates d_out (out_dim x target cells) through the decode recorded
/// in `tape`, accumulating parameter gradients into `grads` (+=).
inline void decode_backward(const DecoderParams& p, const DecodeTape& tape,
                            const MatrixXd& d_out, DecoderGrads& grads) {
  const int k = p.kernel();
  MatrixXd d_z2 = resize_bilinear_backward(d_out, tape.out_h, tape.out_w, tape.h2, tape.w2);
  MatrixXd dw(p.w2.rows(), p.w2.cols());
  VectorXd db(p.b2.size());
  MatrixXd d_below;
  if (p.stage == DecoderStage::global) {
    conv2d_backward(tape.up2, tape.h2, tape.w2, p.w2, k, d_z2, dw, db, d_below);
    grads.w2 += dw;
    grads.b2 += db;
    MatrixXd d_a1 = resize_bilinear_backward(d_below, tape.h2, tape.w2, tape.h1, tape.w1);
    MatrixXd d_z1 = relu_backward(tape.z1, d_a1);
    conv2d_backward(tape.up1, tape.h1, tape.w1, p.w1, k, d_z1, dw, db, d_below);
    grads.w1 += dw;
    grads.b1 += db;
  } else {
    MatrixXd a1 = relu_forward(tape.z1);
    conv_transpose2d_backward(a1, tape.h1, tape.w1, p.w2, k, 2, 1, d_z2, dw, db, d_below);
    grads.w2 += dw;
    grads.b2 += db;
    MatrixXd d_z1 = relu_backward(tape.z1, d_below);
    conv_transpose2d_backward(tape.input, tape.in_h, tape.in_w, p.w1, k, 2, 1, d_z1, dw, db,
                              d_below);
    grads.w1 += dw;
    grads.b1 += db;
  }
}

/// Elementwise sum of the local map and the global sub-window, after resizing
/// the window to the local map's spatial size. Keeps the local transform.
inline FeatureMap fuse_features(const FeatureMap& local, const FeatureMap& global_region) {
  if (local.dim != global_region.dim)
    throw Error("fuse-dim-mismatch", std::to_string(local.dim) + " vs " +
                                         std::to_string(global_region.dim) + " channels");
  FeatureMap out = local;
  out.data += resize_bilinear(global_region.data, global_region.h, global_region.w, local.h,
                              local.w);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: bit-exact binary round trip.
//   magic "FMOSDCK1", u32 stage, u32 in/hidden/out dims, u64 seed,
//   u64 config digest, then w1, b1, w2, b2.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'F', 'M', 'O', 'S', 'D', 'C', 'K', '1'};

inline void save_decoder(const std::filesystem::path& path, const DecoderParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io-error", "cannot write " + path.string());
  out.write(kCheckpointMagic, 8);
  detail::write_pod<std::uint32_t>(out, p.stage == DecoderStage::global ? 0u : 1u);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.in_dim));
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.hidden_dim));
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.out_dim));
  detail::write_pod<std::uint64_t>(out, p.seed);
  detail::write_pod<std::uint64_t>(out, p.config_digest);
  detail::write_matrix(out, p.w1);
  detail::write_vector(out, p.b1);
  detail::write_matrix(out, p.w2);
  detail::write_vector(out, p.b2);
  if (!out) throw Error("io-error", "write failed for " + path.string());
}

inline DecoderParams load_decoder(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("file-not-found", "cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw Error("parse-error", path.string() + " is not a decoder checkpoint");
  DecoderParams p;
  p.stage = detail::read_pod<std::uint32_t>(in) == 0 ? DecoderStage::global
                                                     : DecoderStage::local;
  p.in_dim = static_cast<int>(detail::read_pod<std::uint32_t>(in));
  p.hidden_dim = static_cast<int>(detail::read_pod<std::uint32_t>(in));
  p.out_dim = static_cast<int>(detail::read_pod<std::uint32_t>(in));
  p.seed = detail::read_pod<std::uint64_t>(in);
  p.config_digest = detail::read_pod<std::uint64_t>(in);
  p.w1 = detail::read_matrix(in);
  p.b1 = detail::read_vector(in);
  p.w2 = detail::read_matrix(in);
  p.b2 = detail::read_vector(in);
  if (!p.finite()) throw Error("parse-error", "non-finite weights in " + path.string());
  return p;
}

}  // namespace fmosd
