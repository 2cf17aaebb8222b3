#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpcc/autodiff.hpp"
#include "dpcc/common.hpp"

namespace dpcc {

using Latent = Eigen::RowVectorXd;

constexpr double kLeakySlope = 0.01;

struct ModelConfig {
  int d = 256;  // latent dimension
  int C = 32;   // chunk count
  int N = 128;  // codebook size
  int T = 200;
  double beta1 = 1e-4;
  double betaT = 0.05;
  std::vector<int> enc_point_widths = {128, 256};  // shared per-point MLP
  std::vector<int> enc_head_widths = {256};        // post-pool hidden widths
  std::vector<int> den_widths = {128, 256, 128};   // denoiser hidden widths
  int temb_dim = 64;

  int chunk_dim() const { return d / C; }

  void validate() const {
    require(d >= 1, ErrorKind::config, "config field d: must be >= 1");
    require(C >= 1 && d % C == 0, ErrorKind::config, "config field C: must divide d");
    require(N >= 2 && is_pow2(static_cast<std::uint64_t>(N)), ErrorKind::config,
            "config field N: must be a power of two >= 2");
    require(T >= 2, ErrorKind::config, "config field T: must be >= 2");
    require(beta1 > 0 && beta1 <= betaT && betaT < 1, ErrorKind::config,
            "config field beta1/betaT: need 0 < beta1 <= betaT < 1");
    require(!enc_point_widths.empty() && !enc_head_widths.empty() && !den_widths.empty(), ErrorKind::config,
            "config field widths: all layer lists must be non-empty");
    for (int w : enc_point_widths) require(w >= 1, ErrorKind::config, "config field enc_point_widths: must be >= 1");
    for (int w : enc_head_widths) require(w >= 1, ErrorKind::config, "config field enc_head_widths: must be >= 1");
    for (int w : den_widths) require(w >= 1, ErrorKind::config, "config field den_widths: must be >= 1");
    require(temb_dim >= 2 && temb_dim % 2 == 0, ErrorKind::config, "config field temb_dim: must be even and >= 2");
  }
};

// Named dense parameters plus Adam moments. std::map keeps iteration order
// stable so updates and serialization are deterministic.
struct ParamStore {
  std::map<std::string, Eigen::MatrixXd> values;
  std::map<std::string, Eigen::MatrixXd> adam_m, adam_v;
  long step = 0;
};

struct Model {
  ModelConfig cfg;
  ParamStore ps;
};

inline std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> expected_param_shapes(const ModelConfig& cfg) {
  std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> shapes;
  auto layer = [&](const std::string& name, int in, int out) {
    shapes[name + ".W"] = {in, out};
    shapes[name + ".b"] = {1, out};
  };
  int in = 3;
  for (std::size_t i = 0; i < cfg.enc_point_widths.size(); ++i) {
    layer("enc.point" + std::to_string(i), in, cfg.enc_point_widths[i]);
    in = cfg.enc_point_widths[i];
  }
  for (std::size_t i = 0; i < cfg.enc_head_widths.size(); ++i) {
    layer("enc.head" + std::to_string(i), in, cfg.enc_head_widths[i]);
    in = cfg.enc_head_widths[i];
  }
  layer("enc.out", in, cfg.d);
  const int cond = cfg.temb_dim + cfg.d;
  in = 3;
  for (std::size_t i = 0; i < cfg.den_widths.size(); ++i) {
    layer("den.h" + std::to_string(i), in + cond, cfg.den_widths[i]);
    in = cfg.den_widths[i];
  }
  layer("den.out", in, 3);
  shapes["codebook"] = {cfg.N, cfg.chunk_dim()};
  return shapes;
}

// Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases. Each parameter gets
// its own name-derived stream, so the result does not depend on map order.
inline ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore ps;
  for (const auto& [name, shape] : expected_param_shapes(cfg)) {
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(shape.first, shape.second);
    const bool bias = name.size() > 2 && name.substr(name.size() - 2) == ".b";
    if (!bias) {
      Rng rng(derive_seed(seed, fnv1a(name.data(), name.size())));
      const double bound = std::sqrt(6.0 / static_cast<double>(shape.first + shape.second));
      for (Eigen::Index i = 0; i < p.rows(); ++i)
        for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) = rng.uniform(-bound, bound);
    }
    ps.values[name] = std::move(p);
  }
  return ps;
}

inline void check_params(const ModelConfig& cfg, const ParamStore& ps) {
  const auto shapes = expected_param_shapes(cfg);
  require(ps.values.size() == shapes.size(), ErrorKind::config, "params: parameter set does not match config");
  for (const auto& [name, shape] : shapes) {
    const auto it = ps.values.find(name);
    require(it != ps.values.end(), ErrorKind::config, "params: missing " + name);
    require(it->second.rows() == shape.first && it->second.cols() == shape.second, ErrorKind::config,
            "params: shape mismatch for " + name);
  }
}

// Parameter-free sinusoidal embedding of t/T.
inline Eigen::RowVectorXd time_embedding(int t, int T, int dim) {
  const int half = dim / 2;
  const double s = static_cast<double>(t) / static_cast<double>(T);
  Eigen::RowVectorXd emb(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = half > 1 ? std::pow(10000.0, static_cast<double>(i) / static_cast<double>(half - 1)) : 1.0;
    emb(2 * i) = std::sin(s * freq);
    emb(2 * i + 1) = std::cos(s * freq);
  }
  return emb;
}

// Tape handles for every parameter. trainable=false lifts them as constants
// (pure evaluation), true as leaves that accumulate gradients.
struct NetVars {
  std::map<std::string, ad::Var> vars;

  ad::Var at(const std::string& name) const {
    const auto it = vars.find(name);
    require(it != vars.end(), ErrorKind::contract, "NetVars: unknown parameter " + name);
    return it->second;
  }
};

inline NetVars lift_params(ad::Tape& tape, const ParamStore& ps, bool trainable) {
  NetVars nv;
  for (const auto& [name, value] : ps.values)
    nv.vars[name] = trainable ? tape.param(value) : tape.constant(value);
  return nv;
}

// PointNet-style encoder: shared per-point MLP, column max-pool, dense head.
// Output is 1 x d and permutation-invariant in the input rows.
inline ad::Var encode_node(ad::Tape& tape, const ModelConfig& cfg, const NetVars& nv, ad::Var points) {
  ad::Var h = points;
  for (std::size_t i = 0; i < cfg.enc_point_widths.size(); ++i) {
    const std::string base = "enc.point" + std::to_string(i);
    h = tape.leaky_relu(tape.linear(h, nv.at(base + ".W"), nv.at(base + ".b")), kLeakySlope);
  }
  ad::Var g = tape.max_rows(h);
  for (std::size_t i = 0; i < cfg.enc_head_widths.size(); ++i) {
    const std::string base = "enc.head" + std::to_string(i);
    g = tape.leaky_relu(tape.linear(g, nv.at(base + ".W"), nv.at(base + ".b")), kLeakySlope);
  }
  return tape.linear(g, nv.at("enc.out.W"), nv.at("enc.out.b"));
}

// Noise predictor applied independently per row of x_t. Every hidden layer
// sees (hidden, time embedding, latent) concatenated.
inline ad::Var denoise_node(ad::Tape& tape, const ModelConfig& cfg, const NetVars& nv, ad::Var xt, int t,
                            ad::Var latent) {
  require(t >= 1 && t <= cfg.T, ErrorKind::argument, "denoise: t out of range");
  const Eigen::Index rows = tape.value(xt).rows();
  const ad::Var temb = tape.constant(time_embedding(t, cfg.T, cfg.temb_dim).replicate(rows, 1));
  const ad::Var cond = tape.repeat_rows(latent, rows);
  ad::Var h = xt;
  for (std::size_t i = 0; i < cfg.den_widths.size(); ++i) {
    const std::string base = "den.h" + std::to_string(i);
    const ad::Var joined = tape.concat_cols({h, temb, cond});
    h = tape.leaky_relu(tape.linear(joined, nv.at(base + ".W"), nv.at(base + ".b")), kLeakySlope);
  }
  return tape.linear(h, nv.at("den.out.W"), nv.at("den.out.b"));
}

// Evaluation-only wrappers. They run the same tape ops as the training graph,
// so values agree bitwise with the differentiable path.
inline Latent encode(const ModelConfig& cfg, const ParamStore& ps, const Eigen::MatrixXd& points) {
  check_params(cfg, ps);
  require(points.cols() == 3, ErrorKind::argument, "encode: points must be P x 3");
  ad::Tape tape;
  const NetVars nv = lift_params(tape, ps, false);
  const ad::Var z = encode_node(tape, cfg, nv, tape.constant(points));
  return tape.value(z).row(0);
}

inline Eigen::MatrixXd denoise_eps(const ModelConfig& cfg, const ParamStore& ps, const Eigen::MatrixXd& xt, int t,
                                   const Latent& latent) {
  require(xt.cols() == 3, ErrorKind::argument, "denoise_eps: x_t must be P x 3");
  require(latent.size() == cfg.d, ErrorKind::config, "denoise_eps: latent dimension mismatch");
  ad::Tape tape;
  const NetVars nv = lift_params(tape, ps, false);
  const ad::Var out = denoise_node(tape, cfg, nv, tape.constant(xt), t, tape.constant(latent));
  return tape.value(out);
}

inline Eigen::Vector3d denoise_eps(const ModelConfig& cfg, const ParamStore& ps, const Eigen::Vector3d& xt, int t,
                                   const Latent& latent) {
  return denoise_eps(cfg, ps, Eigen::MatrixXd(xt.transpose()), t, latent).row(0).transpose();
}

// ---- Adam ----

inline void adam_step(ParamStore& ps, const std::map<std::string, Eigen::MatrixXd>& grads, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  ps.step += 1;
  const double t = static_cast<double>(ps.step);
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (auto& [name, p] : ps.values) {
    const auto git = grads.find(name);
    require(git != grads.end(), ErrorKind::argument, "adam_step: missing gradient for " + name);
    const Eigen::MatrixXd& g = git->second;
    require(g.rows() == p.rows() && g.cols() == p.cols(), ErrorKind::argument,
            "adam_step: gradient shape mismatch for " + name);
    require(g.allFinite(), ErrorKind::divergence, "adam_step: non-finite gradient for " + name);
    auto m = ps.adam_m.find(name);
    if (m == ps.adam_m.end()) m = ps.adam_m.emplace(name, Eigen::MatrixXd::Zero(p.rows(), p.cols())).first;
    auto v = ps.adam_v.find(name);
    if (v == ps.adam_v.end()) v = ps.adam_v.emplace(name, Eigen::MatrixXd::Zero(p.rows(), p.cols())).first;
    m->second = beta1 * m->second + (1.0 - beta1) * g;
    v->second = beta2 * v->second + (1.0 - beta2) * g.cwiseProduct(g);
    const Eigen::MatrixXd mhat = m->second / bc1;
    const Eigen::MatrixXd vhat = v->second / bc2;
    p -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
  }
}

// ---- Gradient checking ----

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = true;
};

// Builds a scalar loss from leaf variables; grad_check owns the leaf values.
using LossBuilder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Central finite differences against the tape gradients over `trials` random
// leaf configurations. Relative error is |a - n| / max(1, |a|, |n|).
inline GradCheckReport grad_check(const LossBuilder& build,
                                  const std::vector<std::pair<Eigen::Index, Eigen::Index>>& leaf_shapes, int trials,
                                  double tol, std::uint64_t seed, double h = 1e-4) {
  GradCheckReport report;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<Eigen::MatrixXd> leaves;
    leaves.reserve(leaf_shapes.size());
    for (std::size_t i = 0; i < leaf_shapes.size(); ++i) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(trial), i));
      Eigen::MatrixXd m(leaf_shapes[i].first, leaf_shapes[i].second);
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal();
      leaves.push_back(std::move(m));
    }

    const auto eval = [&](const std::vector<Eigen::MatrixXd>& vals) {
      ad::Tape tape;
      std::vector<ad::Var> vars;
      vars.reserve(vals.size());
      for (const auto& v : vals) vars.push_back(tape.constant(v));
      const ad::Var loss = build(tape, vars);
      require(tape.value(loss).size() == 1, ErrorKind::contract, "grad_check: loss must be scalar");
      return tape.value(loss)(0, 0);
    };

    std::vector<Eigen::MatrixXd> analytic;
    {
      ad::Tape tape;
      std::vector<ad::Var> vars;
      vars.reserve(leaves.size());
      for (const auto& v : leaves) vars.push_back(tape.param(v));
      const ad::Var loss = build(tape, vars);
      tape.backward(loss);
      for (const auto& var : vars) analytic.push_back(tape.grad(var));
    }

    for (std::size_t i = 0; i < leaves.size(); ++i) {
      for (Eigen::Index r = 0; r < leaves[i].rows(); ++r) {
        for (Eigen::Index c = 0; c < leaves[i].cols(); ++c) {
          std::vector<Eigen::MatrixXd> bumped = leaves;
          bumped[i](r, c) = leaves[i](r, c) + h;
          const double up = eval(bumped);
          bumped[i](r, c) = leaves[i](r, c) - h;
          const double down = eval(bumped);
          const double numeric = (up - down) / (2.0 * h);
          const double a = analytic[i](r, c);
          const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
          report.max_rel_error = std::max(report.max_rel_error, rel);
        }
      }
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

// ---- Checkpoint serialization ----
//
// Layout: magic "DPCKPT", version byte, then length-prefixed records of
// (name, shape, row-major float64 data). Config, parameters, Adam moments and
// the step counter all travel as records.

namespace detail {

constexpr char kCkptMagic[6] = {'D', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kCkptVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_record(std::string& out, const std::string& name, const Eigen::MatrixXd& m) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_u32(out, 2);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v = m(r, c);
      char buf[8];
      std::memcpy(buf, &v, 8);
      out.append(buf, 8);
    }
}

inline Eigen::MatrixXd row_matrix(const std::vector<int>& xs) {
  Eigen::MatrixXd m(1, static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = xs[i];
  return m;
}

inline std::vector<int> int_list(const Eigen::MatrixXd& m) {
  std::vector<int> xs;
  for (Eigen::Index i = 0; i < m.size(); ++i) xs.push_back(static_cast<int>(m(i / m.cols(), i % m.cols())));
  return xs;
}

}  // namespace detail

inline std::uint64_t params_checksum(const ParamStore& ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, m] : ps.values) {
    h = fnv1a(name.data(), name.size(), h);
    const std::uint64_t rows = static_cast<std::uint64_t>(m.rows()), cols = static_cast<std::uint64_t>(m.cols());
    h = fnv1a(&rows, 8, h);
    h = fnv1a(&cols, 8, h);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double v = m(r, c);
        h = fnv1a(&v, 8, h);
      }
  }
  return h;
}

inline std::uint64_t model_id(const Model& model) { return params_checksum(model.ps); }

inline std::string serialize_checkpoint(const Model& model) {
  std::string out;
  out.append(detail::kCkptMagic, 6);
  out.push_back(static_cast<char>(detail::kCkptVersion));

  const auto scalar = [](double v) { return Eigen::MatrixXd::Constant(1, 1, v); };
  const ModelConfig& cfg = model.cfg;
  detail::put_record(out, "config/C", scalar(cfg.C));
  detail::put_record(out, "config/N", scalar(cfg.N));
  detail::put_record(out, "config/T", scalar(cfg.T));
  detail::put_record(out, "config/beta1", scalar(cfg.beta1));
  detail::put_record(out, "config/betaT", scalar(cfg.betaT));
  detail::put_record(out, "config/d", scalar(cfg.d));
  detail::put_record(out, "config/den_widths", detail::row_matrix(cfg.den_widths));
  detail::put_record(out, "config/enc_head_widths", detail::row_matrix(cfg.enc_head_widths));
  detail::put_record(out, "config/enc_point_widths", detail::row_matrix(cfg.enc_point_widths));
  detail::put_record(out, "config/temb_dim", scalar(cfg.temb_dim));
  for (const auto& [name, m] : model.ps.values) detail::put_record(out, "param/" + name, m);
  for (const auto& [name, m] : model.ps.adam_m) detail::put_record(out, "adam_m/" + name, m);
  for (const auto& [name, m] : model.ps.adam_v) detail::put_record(out, "adam_v/" + name, m);
  detail::put_record(out, "opt/step", scalar(static_cast<double>(model.ps.step)));
  return out;
}

inline Model parse_checkpoint(const std::string& bytes) {
  require(bytes.size() >= 7 && std::memcmp(bytes.data(), detail::kCkptMagic, 6) == 0, ErrorKind::corrupt_stream,
          "checkpoint: bad magic");
  require(static_cast<std::uint8_t>(bytes[6]) == detail::kCkptVersion, ErrorKind::corrupt_stream,
          "checkpoint: unsupported version");
  std::size_t at = 7;
  const auto need = [&](std::size_t n) {
    require(at + n <= bytes.size(), ErrorKind::corrupt_stream, "checkpoint: truncated");
  };
  const auto get_u32 = [&]() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    at += 4;
    return v;
  };

  std::map<std::string, Eigen::MatrixXd> records;
  while (at < bytes.size()) {
    const std::uint32_t name_len = get_u32();
    need(name_len);
    std::string name = bytes.substr(at, name_len);
    at += name_len;
    const std::uint32_t rank = get_u32();
    require(rank == 2, ErrorKind::corrupt_stream, "checkpoint: unsupported record rank");
    const std::uint32_t rows = get_u32();
    const std::uint32_t cols = get_u32();
    need(static_cast<std::size_t>(rows) * cols * 8);
    Eigen::MatrixXd m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) {
        double v;
        std::memcpy(&v, bytes.data() + at, 8);
        at += 8;
        m(r, c) = v;
      }
    records[name] = std::move(m);
  }

  const auto get = [&](const std::string& name) -> const Eigen::MatrixXd& {
    const auto it = records.find(name);
    require(it != records.end(), ErrorKind::corrupt_stream, "checkpoint: missing record " + name);
    return it->second;
  };

  Model model;
  model.cfg.d = static_cast<int>(get("config/d")(0, 0));
  model.cfg.C = static_cast<int>(get("config/C")(0, 0));
  model.cfg.N = static_cast<int>(get("config/N")(0, 0));
  model.cfg.T = static_cast<int>(get("config/T")(0, 0));
  model.cfg.beta1 = get("config/beta1")(0, 0);
  model.cfg.betaT = get("config/betaT")(0, 0);
  model.cfg.temb_dim = static_cast<int>(get("config/temb_dim")(0, 0));
  model.cfg.enc_point_widths = detail::int_list(get("config/enc_point_widths"));
  model.cfg.enc_head_widths = detail::int_list(get("config/enc_head_widths"));
  model.cfg.den_widths = detail::int_list(get("config/den_widths"));
  model.cfg.validate();
  model.ps.step = static_cast<long>(get("opt/step")(0, 0));
  for (const auto& [name, m] : records) {
    if (name.rfind("param/", 0) == 0) model.ps.values[name.substr(6)] = m;
    if (name.rfind("adam_m/", 0) == 0) model.ps.adam_m[name.substr(7)] = m;
    if (name.rfind("adam_v/", 0) == 0) model.ps.adam_v[name.substr(7)] = m;
  }
  check_params(model.cfg, model.ps);
  return model;
}

inline void save_checkpoint(const Model& model, const std::string& path) {
  const std::string bytes = serialize_checkpoint(model);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(out.good(), ErrorKind::io, "cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), ErrorKind::io, "write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace dpcc
