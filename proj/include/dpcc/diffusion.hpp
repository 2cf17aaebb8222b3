#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "dpcc/common.hpp"
#include "dpcc/diffnet.hpp"

namespace dpcc {

// Linear variance schedule with derived alpha tables. Index t is 1-based to
// match the process definition; vectors store t = 1..T at [t-1].
struct DiffusionSchedule {
  int T = 0;
  Eigen::VectorXd beta;       // beta_t
  Eigen::VectorXd alpha;      // 1 - beta_t
  Eigen::VectorXd alpha_bar;  // prod_{s<=t} alpha_s

  double beta_at(int t) const { return beta(check(t)); }
  double alpha_at(int t) const { return alpha(check(t)); }
  double alpha_bar_at(int t) const { return alpha_bar(check(t)); }

private:
  Eigen::Index check(int t) const {
    require(t >= 1 && t <= T, ErrorKind::argument, "schedule: t out of range");
    return t - 1;
  }
};

inline DiffusionSchedule build_schedule(int T, double beta1, double betaT) {
  require(T >= 2, ErrorKind::argument, "build_schedule: T must be >= 2");
  require(beta1 > 0 && beta1 <= betaT && betaT < 1, ErrorKind::argument,
          "build_schedule: need 0 < beta1 <= betaT < 1");
  DiffusionSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  for (int t = 1; t <= T; ++t) {
    const double b = beta1 + (static_cast<double>(t - 1) / static_cast<double>(T - 1)) * (betaT - beta1);
    s.beta(t - 1) = b;
    s.alpha(t - 1) = 1.0 - b;
    s.alpha_bar(t - 1) = (t == 1 ? s.alpha(0) : s.alpha_bar(t - 2) * s.alpha(t - 1));
  }
  return s;
}

inline DiffusionSchedule build_schedule(const ModelConfig& cfg) {
  return build_schedule(cfg.T, cfg.beta1, cfg.betaT);
}

// Closed-form jump to step t: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline Eigen::Vector3d forward_sample(const Eigen::Vector3d& x0, int t, const Eigen::Vector3d& eps,
                                      const DiffusionSchedule& sched) {
  const double ab = sched.alpha_bar_at(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

inline Eigen::MatrixXd forward_sample(const Eigen::MatrixXd& x0, int t, const Eigen::MatrixXd& eps,
                                      const DiffusionSchedule& sched) {
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), ErrorKind::argument,
          "forward_sample: noise shape mismatch");
  const double ab = sched.alpha_bar_at(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

// Step-by-step Markov chain x_s = sqrt(1-beta_s) x_{s-1} + sqrt(beta_s) eps_s.
// Used as a statistical oracle against the closed form.
inline Eigen::Vector3d forward_chain(const Eigen::Vector3d& x0, int t, const DiffusionSchedule& sched,
                                     const std::function<Eigen::Vector3d(int)>& noise_at_step) {
  require(t >= 1 && t <= sched.T, ErrorKind::argument, "forward_chain: t out of range");
  Eigen::Vector3d x = x0;
  for (int s = 1; s <= t; ++s) {
    const double b = sched.beta_at(s);
    x = std::sqrt(1.0 - b) * x + std::sqrt(b) * noise_at_step(s);
  }
  return x;
}

inline Eigen::Vector3d forward_chain(const Eigen::Vector3d& x0, int t, const DiffusionSchedule& sched,
                                     std::uint64_t seed) {
  Rng rng(seed);
  return forward_chain(x0, t, sched, [&rng](int) { return rng.normal3(); });
}

// One reverse step: mean mu = (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t),
// then x_{t-1} = mu + sqrt(beta_t) * z. The final step must inject no noise.
inline Eigen::Vector3d reverse_step(const Eigen::Vector3d& xt, int t, const Eigen::Vector3d& eps_hat,
                                    const Eigen::Vector3d& z, const DiffusionSchedule& sched) {
  const double b = sched.beta_at(t);
  const double a = sched.alpha_at(t);
  const double ab = sched.alpha_bar_at(t);
  if (t == 1)
    require(z.isZero(0.0), ErrorKind::contract, "reverse_step: injected noise must be zero at t = 1");
  const Eigen::Vector3d mu = (xt - (b / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(a);
  return mu + std::sqrt(b) * z;
}

// Reverse chain decoder: P independent points from N(0, I) denoised down to
// t = 1, conditioned on the latent. Each point consumes its own noise stream
// derived from (seed, point index), so the result is independent of any
// evaluation batching.
inline Eigen::MatrixXd decode(const ModelConfig& cfg, const ParamStore& ps, const Latent& latent, Eigen::Index P,
                              const DiffusionSchedule& sched, std::uint64_t seed) {
  require(P >= 1, ErrorKind::argument, "decode: P must be >= 1");
  require(latent.size() == cfg.d, ErrorKind::config, "decode: latent dimension mismatch");
  check_params(cfg, ps);

  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(P));
  Eigen::MatrixXd x(P, 3);
  for (Eigen::Index i = 0; i < P; ++i) {
    streams.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(i)));
    x.row(i) = streams.back().normal3().transpose();
  }

  for (int t = sched.T; t >= 1; --t) {
    const Eigen::MatrixXd eps_hat = denoise_eps(cfg, ps, x, t, latent);
    const double b = sched.beta_at(t);
    const double a = sched.alpha_at(t);
    const double ab = sched.alpha_bar_at(t);
    x = (x - (b / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(a);
    if (t > 1) {
      const double sd = std::sqrt(b);
      for (Eigen::Index i = 0; i < P; ++i)
        x.row(i) += sd * streams[static_cast<std::size_t>(i)].normal3().transpose();
    }
  }
  return x;
}

// Conditional noise-prediction loss for one cloud: x_t built by the closed
// form, squared error summed over coordinates and averaged over points.
// Differentiable through the latent node (straight-through handled upstream).
inline ad::Var diffusion_loss_node(ad::Tape& tape, const ModelConfig& cfg, const NetVars& nv,
                                   const Eigen::MatrixXd& x0, ad::Var latent, int t, const Eigen::MatrixXd& eps,
                                   const DiffusionSchedule& sched) {
  require(x0.cols() == 3, ErrorKind::argument, "diffusion_loss: cloud must be P x 3");
  require(eps.rows() == x0.rows() && eps.cols() == 3, ErrorKind::argument,
          "diffusion_loss: noise batch shape mismatch");
  const Eigen::MatrixXd xt = forward_sample(x0, t, eps, sched);
  const ad::Var eps_hat = denoise_node(tape, cfg, nv, tape.constant(xt), t, latent);
  const ad::Var err = tape.sub(eps_hat, tape.constant(eps));
  return tape.scale(tape.sum_squares(err), 1.0 / static_cast<double>(x0.rows()));
}

inline double diffusion_loss(const ModelConfig& cfg, const ParamStore& ps, const Eigen::MatrixXd& x0,
                             const Latent& latent, int t, const Eigen::MatrixXd& eps,
                             const DiffusionSchedule& sched) {
  ad::Tape tape;
  const NetVars nv = lift_params(tape, ps, false);
  const ad::Var loss = diffusion_loss_node(tape, cfg, nv, x0, tape.constant(latent), t, eps, sched);
  return tape.value(loss)(0, 0);
}

}  // namespace dpcc
