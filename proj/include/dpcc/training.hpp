#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpcc/codec.hpp"
#include "dpcc/common.hpp"
#include "dpcc/diffnet.hpp"
#include "dpcc/diffusion.hpp"
#include "dpcc/geometry.hpp"
#include "dpcc/quantizer.hpp"

namespace dpcc {

constexpr double kGradClipNorm = 10.0;

struct TrainConfig {
  ModelConfig model;
  long total_steps = 5000;
  int batch_size = 16;
  double lr_start = 1e-4;
  double lr_end = 1e-5;
  long decay_start_step = 2000;
  long decay_end_step = 4000;
  // synthetic corpus
  std::vector<ShapeKind> classes = {ShapeKind::sphere, ShapeKind::torus, ShapeKind::box, ShapeKind::cylinder,
                                    ShapeKind::cone};
  int per_class = 40;
  Eigen::Index points_per_cloud = 256;
  double jitter = 0.01;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
  long log_interval = 100;
  long ckpt_interval = 1000;

  void validate() const {
    model.validate();
    require(total_steps >= 0, ErrorKind::config, "config field total_steps: must be >= 0");
    require(batch_size >= 1, ErrorKind::config, "config field batch_size: must be >= 1");
    require(lr_start > 0 && lr_end > 0 && lr_end <= lr_start, ErrorKind::config,
            "config field lr_end: need 0 < lr_end <= lr_start");
    require(decay_start_step >= 0 && decay_start_step <= decay_end_step, ErrorKind::config,
            "config field decay_start_step: need decay_start <= decay_end");
    require(total_steps == 0 || decay_end_step <= total_steps, ErrorKind::config,
            "config field decay_end_step: must be <= total_steps");
    require(!classes.empty(), ErrorKind::config, "config field classes: must not be empty");
    require(per_class >= 1, ErrorKind::config, "config field per_class: must be >= 1");
    require(points_per_cloud >= 2, ErrorKind::config, "config field points: must be >= 2");
    require(jitter >= 0, ErrorKind::config, "config field jitter: must be >= 0");
    require(holdout_fraction >= 0 && holdout_fraction < 1, ErrorKind::config,
            "config field holdout_fraction: must be in [0, 1)");
    require(log_interval >= 1 && ckpt_interval >= 1, ErrorKind::config,
            "config field log_interval/ckpt_interval: must be >= 1");
  }
};

// Paper-faithful hyperparameters; needs serious compute.
inline TrainConfig paper_preset() {
  TrainConfig cfg;
  cfg.model = ModelConfig{};  // d=256, T=200, widths 128/256 + 256 head, denoiser 128/256/128
  cfg.total_steps = 1000000;
  cfg.batch_size = 128;
  cfg.decay_start_step = 200000;
  cfg.decay_end_step = 400000;
  cfg.points_per_cloud = 2048;
  cfg.per_class = 200;
  cfg.log_interval = 1000;
  cfg.ckpt_interval = 10000;
  return cfg;
}

// Single-core scale: small nets, short schedule, small clouds.
inline TrainConfig desk_preset() {
  TrainConfig cfg;
  cfg.model.d = 64;
  cfg.model.C = 32;
  cfg.model.N = 128;
  cfg.model.T = 50;
  cfg.model.enc_point_widths = {64, 128};
  cfg.model.enc_head_widths = {128};
  cfg.model.den_widths = {64, 128, 64};
  cfg.total_steps = 5000;
  cfg.batch_size = 16;
  cfg.decay_start_step = 2000;
  cfg.decay_end_step = 4000;
  cfg.points_per_cloud = 256;
  return cfg;
}

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s, const std::string& field) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoi(tok));
    } catch (...) {
      fail(ErrorKind::config, "config field " + field + ": bad integer '" + tok + "'");
    }
  }
  require(!out.empty(), ErrorKind::config, "config field " + field + ": empty list");
  return out;
}

inline double parse_num(const std::string& s, const std::string& field) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    require(used == s.size(), ErrorKind::config, "config field " + field + ": bad number '" + s + "'");
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(ErrorKind::config, "config field " + field + ": bad number '" + s + "'");
  }
}

}  // namespace detail

// key=value lines; '#' starts a comment; "preset" must come first if present.
inline TrainConfig parse_train_config(std::istream& in) {
  TrainConfig cfg = desk_preset();
  std::string line;
  bool first_assignment = true;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (detail::blank_line(line)) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::config, "config: expected key=value, got '" + line + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    require(!key.empty() && !val.empty(), ErrorKind::config, "config: empty key or value in '" + line + "'");

    if (key == "preset") {
      require(first_assignment, ErrorKind::config, "config field preset: must be the first setting");
      if (val == "desk")
        cfg = desk_preset();
      else if (val == "paper")
        cfg = paper_preset();
      else
        fail(ErrorKind::config, "config field preset: unknown preset '" + val + "'");
    } else if (key == "d") {
      cfg.model.d = static_cast<int>(detail::parse_num(val, key));
    } else if (key == "C") {
      cfg.model.C = static_cast<int>(detail::parse_num(val, key));
    } else if (key == "N") {
      cfg.model.N = static_cast<int>(detail::parse_num(val, key));
    } else if (key == "T") {
      cfg.model.T = static_cast<int>(detail::parse_num(val, key));
    } else if (key == "beta1") {
      cfg.model.beta1 = detail::parse_num(val, key);
    } else if (key == "betaT") {
      cfg.model.betaT = detail::parse_num(val, key);
    } else if (key == "temb_dim") {
      cfg.model.temb_dim = static_cast<int>(detail::parse_num(val, key));
    } else if (key == "enc_point_widths") {
      cfg.model.enc_point_widths = detail::parse_int_list(val, key);
    } else if (key == "enc_head_widths") {
      cfg.model.enc_head_widths = detail::parse_int_list(val, key);
    } else if (key == "den_widths") {
      cfg.model.den_widths = detail::parse_int_list(val, key);
    } else if (key == "total_steps") {
      cfg.total_steps = static_cast<long>(detail::parse_num(val, key));
    } else if (key == "batch_size") {
      cfg.batch_size = static_cast<int>(detail::parse_num(val, key));
    } else if (key == "lr_start") {
      cfg.lr_start = detail::parse_num(val, key);
    } else if (key == "lr_end") {
      cfg.lr_end = detail::parse_num(val, key);
    } else if (key == "decay_start_step") {
      cfg.decay_start_step = static_cast<long>(detail::parse_num(val, key));
    } else if (key == "decay_end_step") {
      cfg.decay_end_step = static_cast<long>(detail::parse_num(val, key));
    } else if (key == "classes") {
      cfg.classes.clear();
      std::stringstream ss(val);
      std::string tok;
      while (std::getline(ss, tok, ',')) cfg.classes.push_back(parse_shape_kind(tok));
    } else if (key == "per_class") {
      cfg.per_class = static_cast<int>(detail::parse_num(val, key));
    } else if (key == "points") {
      cfg.points_per_cloud = static_cast<Eigen::Index>(detail::parse_num(val, key));
    } else if (key == "jitter") {
      cfg.jitter = detail::parse_num(val, key);
    } else if (key == "holdout_fraction") {
      cfg.holdout_fraction = detail::parse_num(val, key);
    } else if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(detail::parse_num(val, key));
    } else if (key == "log_interval") {
      cfg.log_interval = static_cast<long>(detail::parse_num(val, key));
    } else if (key == "ckpt_interval") {
      cfg.ckpt_interval = static_cast<long>(detail::parse_num(val, key));
    } else {
      fail(ErrorKind::config, "config field " + key + ": unknown key");
    }
    first_assignment = false;
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  return parse_train_config(in);
}

// lr_start until decay_start, linear to lr_end over the decay window, then
// flat at lr_end.
inline double lr_at_step(long step, const TrainConfig& cfg) {
  require(step >= 0, ErrorKind::argument, "lr_at_step: negative step");
  if (step <= cfg.decay_start_step) return cfg.lr_start;
  if (step >= cfg.decay_end_step) return cfg.lr_end;
  const double f = static_cast<double>(step - cfg.decay_start_step) /
                   static_cast<double>(cfg.decay_end_step - cfg.decay_start_step);
  return cfg.lr_start + f * (cfg.lr_end - cfg.lr_start);
}

// Deterministic synthetic corpus split into train and holdout by hashing the
// per-instance seed.
struct Corpus {
  std::vector<PointCloud> train;
  std::vector<PointCloud> holdout;
};

inline Corpus build_corpus(const TrainConfig& cfg) {
  Corpus corpus;
  for (std::size_t c = 0; c < cfg.classes.size(); ++c) {
    for (int j = 0; j < cfg.per_class; ++j) {
      const std::uint64_t inst_seed = derive_seed(cfg.seed, c + 1, static_cast<std::uint64_t>(j));
      PointCloud pc = gen_shape(cfg.classes[c], cfg.points_per_cloud, cfg.jitter, inst_seed);
      const double pick = static_cast<double>(splitmix64(inst_seed) >> 11) * 0x1.0p-53;
      (pick < cfg.holdout_fraction ? corpus.holdout : corpus.train).push_back(std::move(pc));
    }
  }
  require(!corpus.train.empty(), ErrorKind::config, "corpus: no training clouds (holdout fraction too high?)");
  return corpus;
}

struct StepStats {
  double loss_total = 0.0;
  double loss_diff = 0.0;
  double loss_vq = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  std::set<int> used_entries;
};

namespace detail {

inline std::vector<std::size_t> batch_indices(const TrainConfig& cfg, long step, std::size_t corpus_size) {
  Rng rng(derive_seed(cfg.seed, 0x6261746368ULL, static_cast<std::uint64_t>(step)));  // "batch"
  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
  for (auto& i : idx) i = static_cast<std::size_t>(rng.below(corpus_size));
  return idx;
}

}  // namespace detail

// One optimization step over a batch of normalized clouds. All randomness is
// derived from (cfg.seed, step), so interrupted and uninterrupted runs agree.
inline StepStats train_step(Model& model, const std::vector<const Eigen::MatrixXd*>& batch, const TrainConfig& cfg,
                            long step, const DiffusionSchedule& sched) {
  require(!batch.empty(), ErrorKind::argument, "train_step: empty batch");
  ad::Tape tape;
  const NetVars nv = lift_params(tape, model.ps, true);
  const Codebook cb = model_codebook(model);

  StepStats stats;
  ad::Var total;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Eigen::MatrixXd& x0 = *batch[b];
    Rng rng(derive_seed(cfg.seed, 0x636c6f7564ULL + b, static_cast<std::uint64_t>(step)));  // "cloud"
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.model.T)));
    Eigen::MatrixXd eps(x0.rows(), 3);
    for (Eigen::Index i = 0; i < eps.rows(); ++i) eps.row(i) = rng.normal3().transpose();

    const ad::Var z = encode_node(tape, cfg.model, nv, tape.constant(x0));
    const auto q = quantize(tape.value(z).row(0), cb, cfg.model.C);
    for (int idx : q.indices) stats.used_entries.insert(idx);
    const ad::Var zq = tape.straight_through(z, q.zhat);

    const ad::Var l_diff = diffusion_loss_node(tape, cfg.model, nv, x0, zq, t, eps, sched);
    const ad::Var l_vq = vq_loss_node(tape, z, nv.at("codebook"), q.indices, cfg.model.C);
    stats.loss_diff += tape.value(l_diff)(0, 0);
    stats.loss_vq += tape.value(l_vq)(0, 0);
    const ad::Var l = tape.add(l_diff, l_vq);
    total = total.valid() ? tape.add(total, l) : l;
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  total = tape.scale(total, inv_b);
  stats.loss_diff *= inv_b;
  stats.loss_vq *= inv_b;
  stats.loss_total = tape.value(total)(0, 0);
  require(std::isfinite(stats.loss_diff), ErrorKind::divergence, "train_step: loss_diff is non-finite");
  require(std::isfinite(stats.loss_vq), ErrorKind::divergence, "train_step: loss_vq is non-finite");

  tape.backward(total);
  std::map<std::string, Eigen::MatrixXd> grads;
  double sq_norm = 0.0;
  for (const auto& [name, var] : nv.vars) {
    Eigen::MatrixXd g = tape.grad(var);
    sq_norm += g.squaredNorm();
    grads.emplace(name, std::move(g));
  }
  stats.grad_norm = std::sqrt(sq_norm);
  if (stats.grad_norm > kGradClipNorm) {
    const double s = kGradClipNorm / stats.grad_norm;
    for (auto& [name, g] : grads) g *= s;
    stats.clipped = true;
  }
  adam_step(model.ps, grads, lr_at_step(step, cfg));
  return stats;
}

// Codebook entries start as encoder chunk outputs from the step-0 batch so no
// entry is born far from the data.
inline void warm_up_codebook(Model& model, const std::vector<Eigen::MatrixXd>& train_clouds,
                             const TrainConfig& cfg) {
  const auto idx = detail::batch_indices(cfg, 0, train_clouds.size());
  std::vector<Eigen::RowVectorXd> pool;
  for (std::size_t i : idx) {
    const Latent z = encode(cfg.model, model.ps, train_clouds[i]);
    const Eigen::MatrixXd chunks = split_chunks(z, cfg.model.C);
    for (Eigen::Index r = 0; r < chunks.rows(); ++r) pool.push_back(chunks.row(r));
  }
  Rng rng(derive_seed(cfg.seed, 0x7761726dULL));  // "warm"
  Eigen::MatrixXd entries(cfg.model.N, cfg.model.chunk_dim());
  for (int i = 0; i < cfg.model.N; ++i)
    entries.row(i) = pool[static_cast<std::size_t>(rng.below(pool.size()))];
  model.ps.values["codebook"] = entries;
}

struct LogRow {
  long step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_diff = 0.0;
  double loss_vq = 0.0;
  double codebook_utilization = 0.0;
  double grad_norm = 0.0;
};

inline std::string log_csv_header() { return "step,lr,loss_total,loss_diff,loss_vq,codebook_utilization,grad_norm"; }

inline std::string log_csv_row(const LogRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", row.step, row.lr, row.loss_total,
                row.loss_diff, row.loss_vq, row.codebook_utilization, row.grad_norm);
  return buf;
}

struct TrainResult {
  Model model;
  std::vector<LogRow> log;
};

// Full training loop with periodic checkpoints (atomic rename) and a CSV log.
// Passing resume=true restarts from an existing checkpoint at `ckpt_path`;
// randomness is step-derived, so resumed runs match uninterrupted ones.
inline TrainResult train(const TrainConfig& cfg, const std::string& ckpt_path = "", const std::string& log_path = "",
                         bool resume = false) {
  cfg.validate();
  TrainResult result;
  if (resume && !ckpt_path.empty() && std::filesystem::exists(ckpt_path)) {
    result.model = load_checkpoint(ckpt_path);
    require(result.model.cfg.d == cfg.model.d && result.model.cfg.C == cfg.model.C &&
                result.model.cfg.N == cfg.model.N && result.model.cfg.T == cfg.model.T,
            ErrorKind::config, "train: checkpoint was built with a different model config");
  } else {
    result.model.cfg = cfg.model;
    result.model.ps = init_params(cfg.model, derive_seed(cfg.seed, 0x696e6974ULL));  // "init"
  }

  if (cfg.total_steps == 0 && result.model.ps.step == 0) return result;

  const Corpus corpus = build_corpus(cfg);
  std::vector<Eigen::MatrixXd> train_clouds;
  train_clouds.reserve(corpus.train.size());
  for (const auto& pc : corpus.train) train_clouds.push_back(normalize(pc).first.points);

  if (result.model.ps.step == 0) warm_up_codebook(result.model, train_clouds, cfg);

  const DiffusionSchedule sched = build_schedule(cfg.model);
  std::ofstream log_file;
  if (!log_path.empty()) {
    const bool fresh = result.model.ps.step == 0 || !std::filesystem::exists(log_path);
    log_file.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    require(log_file.good(), ErrorKind::io, "cannot write " + log_path);
    if (fresh) log_file << log_csv_header() << "\n";
  }

  std::set<int> window_entries;
  double window_total = 0, window_diff = 0, window_vq = 0, window_gnorm = 0;
  long window_count = 0;

  while (result.model.ps.step < cfg.total_steps) {
    const long step = result.model.ps.step;  // 0-based index of the step about to run
    const auto idx = detail::batch_indices(cfg, step, train_clouds.size());
    std::vector<const Eigen::MatrixXd*> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) batch.push_back(&train_clouds[i]);

    const StepStats stats = train_step(result.model, batch, cfg, step, sched);
    window_entries.insert(stats.used_entries.begin(), stats.used_entries.end());
    window_total += stats.loss_total;
    window_diff += stats.loss_diff;
    window_vq += stats.loss_vq;
    window_gnorm += stats.grad_norm;
    ++window_count;

    const long done = result.model.ps.step;
    if (done % cfg.log_interval == 0 || done == cfg.total_steps) {
      LogRow row;
      row.step = done;
      row.lr = lr_at_step(step, cfg);
      row.loss_total = window_total / static_cast<double>(window_count);
      row.loss_diff = window_diff / static_cast<double>(window_count);
      row.loss_vq = window_vq / static_cast<double>(window_count);
      row.codebook_utilization = static_cast<double>(window_entries.size()) / static_cast<double>(cfg.model.N);
      row.grad_norm = window_gnorm / static_cast<double>(window_count);
      result.log.push_back(row);
      if (log_file.is_open()) log_file << log_csv_row(row) << "\n" << std::flush;
      window_entries.clear();
      window_total = window_diff = window_vq = window_gnorm = 0;
      window_count = 0;
    }
    if (!ckpt_path.empty() && (done % cfg.ckpt_interval == 0 || done == cfg.total_steps))
      save_checkpoint(result.model, ckpt_path);
  }
  if (!ckpt_path.empty()) save_checkpoint(result.model, ckpt_path);
  return result;
}

}  // namespace dpcc
