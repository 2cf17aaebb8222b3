#pragma once

#include <vector>

#include <Eigen/Dense>

#include "dpcc/autodiff.hpp"
#include "dpcc/common.hpp"
#include "dpcc/diffnet.hpp"

namespace dpcc {

// N learnable entries of dimension d/C; the rows double as the quantization
// alphabet and as a trainable parameter of the model.
struct Codebook {
  Eigen::MatrixXd entries;  // N x chunk_dim

  Eigen::Index size() const { return entries.rows(); }
  Eigen::Index chunk_dim() const { return entries.cols(); }
};

using QuantizedCode = std::vector<int>;

// Contiguous equal-length slices of z, one per row; concatenating the rows
// reproduces z.
inline Eigen::MatrixXd split_chunks(const Latent& z, int C) {
  require(C >= 1 && z.size() % C == 0, ErrorKind::argument, "split_chunks: C must divide d");
  const Eigen::Index w = z.size() / C;
  Eigen::MatrixXd chunks(C, w);
  for (int i = 0; i < C; ++i) chunks.row(i) = z.segment(i * w, w);
  return chunks;
}

inline Latent merge_chunks(const Eigen::MatrixXd& chunks) {
  Latent z(chunks.rows() * chunks.cols());
  for (Eigen::Index i = 0; i < chunks.rows(); ++i) z.segment(i * chunks.cols(), chunks.cols()) = chunks.row(i);
  return z;
}

// Exhaustive argmin of squared distance; ties go to the lowest index.
inline int nearest_entry(const Codebook& cb, const Eigen::RowVectorXd& chunk) {
  require(chunk.size() == cb.chunk_dim(), ErrorKind::argument, "nearest_entry: chunk dimension mismatch");
  int best = 0;
  double best_d = (chunk - cb.entries.row(0)).squaredNorm();
  for (Eigen::Index i = 1; i < cb.size(); ++i) {
    const double d = (chunk - cb.entries.row(i)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

struct QuantizeResult {
  QuantizedCode indices;
  Latent zhat;
};

inline QuantizeResult quantize(const Latent& z, const Codebook& cb, int C) {
  const Eigen::MatrixXd chunks = split_chunks(z, C);
  QuantizeResult out;
  out.indices.resize(static_cast<std::size_t>(C));
  out.zhat.resize(z.size());
  const Eigen::Index w = cb.chunk_dim();
  require(chunks.cols() == w, ErrorKind::argument, "quantize: codebook chunk dimension mismatch");
  for (int i = 0; i < C; ++i) {
    const int idx = nearest_entry(cb, chunks.row(i));
    out.indices[static_cast<std::size_t>(i)] = idx;
    out.zhat.segment(i * w, w) = cb.entries.row(idx);
  }
  return out;
}

inline Latent dequantize(const QuantizedCode& indices, const Codebook& cb) {
  const Eigen::Index w = cb.chunk_dim();
  Latent z(static_cast<Eigen::Index>(indices.size()) * w);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < cb.size(), ErrorKind::corrupt_stream,
            "dequantize: index out of codebook range");
    z.segment(static_cast<Eigen::Index>(i) * w, w) = cb.entries.row(indices[i]);
  }
  return z;
}

// Both terms are numerically equal; they exist to route gradients separately
// (term 1 moves the codebook, term 2 moves the encoder). Mean over chunks.
inline double vq_loss(const Eigen::MatrixXd& chunks, const Codebook& cb) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < chunks.rows(); ++i) {
    const int idx = nearest_entry(cb, chunks.row(i));
    const double d = (chunks.row(i) - cb.entries.row(idx)).squaredNorm();
    total += 2.0 * d;
  }
  return total / static_cast<double>(chunks.rows());
}

// Differentiable VQ loss given precomputed nearest indices.
inline ad::Var vq_loss_node(ad::Tape& tape, ad::Var z, ad::Var codebook, const QuantizedCode& indices, int C) {
  const ad::Var chunks = tape.chunk_rows(z, C);
  const ad::Var picked = tape.gather_rows(codebook, indices);
  const ad::Var codebook_term = tape.sum_squares(tape.sub(tape.detach(chunks), picked));
  const ad::Var encoder_term = tape.sum_squares(tape.sub(tape.detach(picked), chunks));
  return tape.scale(tape.add(codebook_term, encoder_term), 1.0 / static_cast<double>(C));
}

inline long rate_bits(int C, int N) {
  require(C >= 1, ErrorKind::argument, "rate_bits: C must be >= 1");
  require(N >= 2 && is_pow2(static_cast<std::uint64_t>(N)), ErrorKind::config,
          "rate_bits: N must be a power of two");
  return static_cast<long>(C) * log2_exact(static_cast<std::uint64_t>(N));
}

inline Codebook model_codebook(const Model& model) {
  const auto it = model.ps.values.find("codebook");
  require(it != model.ps.values.end(), ErrorKind::config, "model has no codebook");
  return Codebook{it->second};
}

// Lloyd iterations; empty clusters keep their previous center. Used to fit
// reference codebooks to frozen latent corpora.
inline Eigen::MatrixXd kmeans_fit(const Eigen::MatrixXd& samples, int N, int iters, std::uint64_t seed) {
  require(samples.rows() >= 1, ErrorKind::argument, "kmeans_fit: no samples");
  require(N >= 1, ErrorKind::argument, "kmeans_fit: N must be >= 1");
  Rng rng(seed);
  Eigen::MatrixXd centers(N, samples.cols());
  for (int i = 0; i < N; ++i)
    centers.row(i) = samples.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(samples.rows()))));

  std::vector<int> assign(static_cast<std::size_t>(samples.rows()), -1);
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    const Codebook cb{centers};
    for (Eigen::Index s = 0; s < samples.rows(); ++s) {
      const int a = nearest_entry(cb, samples.row(s));
      if (a != assign[static_cast<std::size_t>(s)]) {
        assign[static_cast<std::size_t>(s)] = a;
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(N, samples.cols());
    std::vector<long> counts(static_cast<std::size_t>(N), 0);
    for (Eigen::Index s = 0; s < samples.rows(); ++s) {
      sums.row(assign[static_cast<std::size_t>(s)]) += samples.row(s);
      counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(s)])] += 1;
    }
    for (int i = 0; i < N; ++i)
      if (counts[static_cast<std::size_t>(i)] > 0)
        centers.row(i) = sums.row(i) / static_cast<double>(counts[static_cast<std::size_t>(i)]);
  }
  return centers;
}

}  // namespace dpcc
