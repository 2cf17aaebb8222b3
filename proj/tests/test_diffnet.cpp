#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <numeric>

#include "dpcc/diffnet.hpp"

using namespace dpcc;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.C = 4;
  cfg.N = 4;
  cfg.T = 10;
  cfg.enc_point_widths = {6, 10};
  cfg.enc_head_widths = {7};
  cfg.den_widths = {6, 9, 5};
  cfg.temb_dim = 4;
  return cfg;
}

Eigen::MatrixXd random_cloud(Eigen::Index P, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd x(P, 3);
  for (Eigen::Index i = 0; i < P; ++i) x.row(i) = rng.normal3().transpose();
  return x;
}

void zero_params(ParamStore& ps) {
  for (auto& [name, p] : ps.values) p.setZero();
}

}  // namespace

TEST_CASE("matmul rows are independent of batching") {
  Rng rng(3);
  Eigen::MatrixXd X(17, 5), W(5, 9);
  for (Eigen::Index i = 0; i < X.size(); ++i) X(i / 5, i % 5) = rng.normal();
  for (Eigen::Index i = 0; i < W.size(); ++i) W(i / 9, i % 9) = rng.normal();
  const Eigen::MatrixXd full = ad::matmul(X, W);
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const Eigen::MatrixXd row = ad::matmul(X.row(r), W);
    REQUIRE(std::memcmp(row.data(), Eigen::RowVectorXd(full.row(r)).data(), sizeof(double) * 9) == 0);
  }
}

TEST_CASE("encode is permutation-invariant bitwise") {
  const ModelConfig cfg = tiny_config();
  const ParamStore ps = init_params(cfg, 42);
  const Eigen::MatrixXd cloud = random_cloud(33, 7);

  std::vector<Eigen::Index> perm(33);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(9);
  for (Eigen::Index i = 32; i > 0; --i)
    std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
  Eigen::MatrixXd shuffled(33, 3);
  for (Eigen::Index i = 0; i < 33; ++i) shuffled.row(i) = cloud.row(perm[static_cast<std::size_t>(i)]);

  const Latent a = encode(cfg, ps, cloud);
  const Latent b = encode(cfg, ps, shuffled);
  REQUIRE(a.size() == cfg.d);
  REQUIRE(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
}

TEST_CASE("encode with zero parameters is the zero vector") {
  const ModelConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg, 1);
  zero_params(ps);
  const Latent z = encode(cfg, ps, random_cloud(10, 2));
  CHECK(z.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("default config emits a 256-dimensional latent") {
  ModelConfig cfg;  // paper-faithful defaults
  cfg.validate();
  const ParamStore ps = init_params(cfg, 3);
  const Latent z = encode(cfg, ps, random_cloud(16, 4));
  CHECK(z.size() == 256);
}

TEST_CASE("denoiser with zero output layer returns zero") {
  const ModelConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg, 5);
  ps.values["den.out.W"].setZero();
  ps.values["den.out.b"].setZero();
  Latent latent = Latent::Zero(cfg.d);
  latent(0) = 1.5;
  const Eigen::MatrixXd out = denoise_eps(cfg, ps, random_cloud(6, 6), 3, latent);
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("denoiser is deterministic and conditioning matters") {
  const ModelConfig cfg = tiny_config();
  const ParamStore ps = init_params(cfg, 8);
  const Eigen::MatrixXd x = random_cloud(5, 10);
  Rng rng(11);
  Latent za(cfg.d), zb(cfg.d);
  for (int i = 0; i < cfg.d; ++i) za(i) = rng.normal();
  for (int i = 0; i < cfg.d; ++i) zb(i) = rng.normal();

  const Eigen::MatrixXd out1 = denoise_eps(cfg, ps, x, 4, za);
  const Eigen::MatrixXd out2 = denoise_eps(cfg, ps, x, 4, za);
  CHECK(out1 == out2);
  const Eigen::MatrixXd out3 = denoise_eps(cfg, ps, x, 4, zb);
  CHECK((out1 - out3).cwiseAbs().maxCoeff() > 0.0);
  CHECK_THROWS_AS(denoise_eps(cfg, ps, x, 0, za), Error);
  CHECK_THROWS_AS(denoise_eps(cfg, ps, x, cfg.T + 1, za), Error);
}

TEST_CASE("denoiser batch equals per-point evaluation bitwise") {
  const ModelConfig cfg = tiny_config();
  const ParamStore ps = init_params(cfg, 12);
  const Eigen::MatrixXd x = random_cloud(9, 13);
  Latent latent(cfg.d);
  Rng rng(14);
  for (int i = 0; i < cfg.d; ++i) latent(i) = rng.normal();
  const Eigen::MatrixXd batch = denoise_eps(cfg, ps, x, 2, latent);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Vector3d single = denoise_eps(cfg, ps, Eigen::Vector3d(x.row(i).transpose()), 2, latent);
    const Eigen::RowVector3d batch_row = batch.row(i);
    REQUIRE(std::memcmp(single.data(), batch_row.data(), sizeof(double) * 3) == 0);
  }
}

TEST_CASE("backward gives zero gradient at W=0 for |Wx|^2 and for unused params") {
  ad::Tape tape;
  const ad::Var W = tape.param(Eigen::MatrixXd::Zero(4, 3));
  const ad::Var unused = tape.param(Eigen::MatrixXd::Ones(2, 2));
  Rng rng(15);
  Eigen::MatrixXd xv(1, 4);
  for (int i = 0; i < 4; ++i) xv(0, i) = rng.normal();
  const ad::Var x = tape.constant(xv);
  const ad::Var b = tape.param(Eigen::MatrixXd::Zero(1, 3));
  const ad::Var loss = tape.sum_squares(tape.linear(x, W, b));
  tape.backward(loss);
  CHECK(tape.grad(W).cwiseAbs().maxCoeff() == 0.0);
  CHECK(tape.grad(unused).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  ad::Tape tape;
  const ad::Var x = tape.param(Eigen::MatrixXd::Ones(2, 3));
  CHECK_THROWS_AS(tape.backward(x), Error);
}

TEST_CASE("grad_check passes for a linear layer") {
  const LossBuilder build = [](ad::Tape& t, const std::vector<ad::Var>& leaves) {
    return t.sum_squares(t.linear(leaves[0], leaves[1], leaves[2]));
  };
  const auto report = grad_check(build, {{5, 4}, {4, 3}, {1, 3}}, 10, 1e-4, 77);
  INFO("max rel error " << report.max_rel_error);
  CHECK(report.pass);
}

TEST_CASE("grad_check passes for max-pool away from ties") {
  const LossBuilder build = [](ad::Tape& t, const std::vector<ad::Var>& leaves) {
    return t.sum_squares(t.max_rows(leaves[0]));
  };
  const auto report = grad_check(build, {{7, 5}}, 10, 1e-4, 78);
  CHECK(report.pass);
}

TEST_CASE("grad_check on the identity has zero error at dyadic step") {
  const LossBuilder build = [](ad::Tape& t, const std::vector<ad::Var>& leaves) { return t.sum_all(leaves[0]); };
  const auto report = grad_check(build, {{3, 3}}, 3, 1e-12, 79, 0.25);
  CHECK(report.max_rel_error == 0.0);
}

TEST_CASE("grad_check passes for leaky_relu, concat, repeat and chunk ops") {
  const LossBuilder build = [](ad::Tape& t, const std::vector<ad::Var>& leaves) {
    const ad::Var act = t.leaky_relu(leaves[0], kLeakySlope);
    const ad::Var rep = t.repeat_rows(leaves[1], t.value(act).rows());
    const ad::Var cat = t.concat_cols({act, rep});
    const ad::Var chunks = t.chunk_rows(leaves[2], 2);
    return t.add(t.sum_squares(cat), t.sum_squares(chunks));
  };
  const auto report = grad_check(build, {{4, 3}, {1, 2}, {1, 6}}, 10, 1e-4, 80);
  CHECK(report.pass);
}

TEST_CASE("grad_check passes for the full encoder and denoiser stacks") {
  const ModelConfig cfg = tiny_config();
  const Eigen::MatrixXd cloud = random_cloud(5, 20);
  const auto shape_list = expected_param_shapes(cfg);
  std::vector<std::string> names;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  for (const auto& [name, sh] : shape_list) {
    names.push_back(name);
    shapes.push_back(sh);
  }

  const LossBuilder encoder_loss = [&](ad::Tape& t, const std::vector<ad::Var>& leaves) {
    NetVars nv;
    for (std::size_t i = 0; i < names.size(); ++i) nv.vars[names[i]] = leaves[i];
    return t.sum_squares(encode_node(t, cfg, nv, t.constant(cloud)));
  };
  auto report = grad_check(encoder_loss, shapes, 10, 1e-4, 81);
  INFO("encoder max rel error " << report.max_rel_error);
  CHECK(report.pass);

  const LossBuilder denoiser_loss = [&](ad::Tape& t, const std::vector<ad::Var>& leaves) {
    NetVars nv;
    for (std::size_t i = 0; i < names.size(); ++i) nv.vars[names[i]] = leaves[i];
    Rng rng(21);
    Eigen::MatrixXd latent(1, cfg.d);
    for (int i = 0; i < cfg.d; ++i) latent(0, i) = rng.normal();
    return t.sum_squares(denoise_node(t, cfg, nv, t.constant(cloud), 3, t.constant(latent)));
  };
  report = grad_check(denoiser_loss, shapes, 10, 1e-4, 82);
  INFO("denoiser max rel error " << report.max_rel_error);
  CHECK(report.pass);
}

TEST_CASE("adam leaves parameters alone on zero gradients from a fresh state") {
  const ModelConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg, 30);
  const ParamStore before = ps;
  std::map<std::string, Eigen::MatrixXd> grads;
  for (const auto& [name, p] : ps.values) grads[name] = Eigen::MatrixXd::Zero(p.rows(), p.cols());
  adam_step(ps, grads, 1e-3);
  CHECK(ps.step == 1);
  for (const auto& [name, p] : ps.values) {
    CHECK(p == before.values.at(name));
    CHECK(ps.adam_m.at(name).cwiseAbs().maxCoeff() == 0.0);
    CHECK(ps.adam_v.at(name).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("adam first step follows the bias-corrected formula") {
  ParamStore ps;
  ps.values["w"] = Eigen::MatrixXd::Zero(1, 3);
  ps.values["w"] << 0.5, -0.25, 2.0;
  const Eigen::MatrixXd p0 = ps.values["w"];
  std::map<std::string, Eigen::MatrixXd> grads;
  grads["w"] = Eigen::MatrixXd::Zero(1, 3);
  grads["w"] << 0.7, -1.3, 0.002;
  const double lr = 1e-2;
  adam_step(ps, grads, lr);
  // step 1: m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps)
  for (int i = 0; i < 3; ++i) {
    const double g = grads["w"](0, i);
    const double expected = p0(0, i) - lr * g / (std::abs(g) + 1e-8);
    CHECK(ps.values["w"](0, i) == Catch::Approx(expected).epsilon(1e-12));
    CHECK(ps.values["w"](0, i) == Catch::Approx(p0(0, i) - lr * (g > 0 ? 1.0 : -1.0)).margin(lr * 1e-4));
  }
}

TEST_CASE("adam is deterministic and rejects non-finite gradients") {
  const ModelConfig cfg = tiny_config();
  ParamStore a = init_params(cfg, 31);
  ParamStore b = init_params(cfg, 31);
  std::map<std::string, Eigen::MatrixXd> grads;
  Rng rng(32);
  for (const auto& [name, p] : a.values) {
    Eigen::MatrixXd g(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) g(i / g.cols(), i % g.cols()) = rng.normal();
    grads[name] = g;
  }
  adam_step(a, grads, 3e-4);
  adam_step(b, grads, 3e-4);
  for (const auto& [name, p] : a.values) REQUIRE(p == b.values.at(name));

  grads.begin()->second(0, 0) = std::nan("");
  try {
    adam_step(a, grads, 3e-4);
    FAIL("expected divergence error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::divergence);
  }
}

TEST_CASE("adam with zero learning rate is the identity on values") {
  const ModelConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg, 33);
  const ParamStore before = ps;
  std::map<std::string, Eigen::MatrixXd> grads;
  Rng rng(34);
  for (const auto& [name, p] : ps.values) {
    Eigen::MatrixXd g(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) g(i / g.cols(), i % g.cols()) = rng.normal();
    grads[name] = g;
  }
  adam_step(ps, grads, 0.0);
  for (const auto& [name, p] : ps.values) CHECK(p == before.values.at(name));
}

TEST_CASE("time embedding has the configured dimension and bounded entries") {
  const Eigen::RowVectorXd emb = time_embedding(37, 200, 64);
  REQUIRE(emb.size() == 64);
  CHECK(emb.cwiseAbs().maxCoeff() <= 1.0);
  CHECK(time_embedding(37, 200, 64) == emb);
}

TEST_CASE("checkpoints round-trip bitwise") {
  Model model;
  model.cfg = tiny_config();
  model.ps = init_params(model.cfg, 40);
  model.ps.step = 17;
  // moments present for a realistic mid-training state
  std::map<std::string, Eigen::MatrixXd> grads;
  Rng rng(41);
  for (const auto& [name, p] : model.ps.values) {
    Eigen::MatrixXd g(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) g(i / g.cols(), i % g.cols()) = rng.normal();
    grads[name] = g;
  }
  adam_step(model.ps, grads, 1e-3);

  const auto path = (std::filesystem::temp_directory_path() / "diffnet_ckpt.bin").string();
  save_checkpoint(model, path);
  const Model back = load_checkpoint(path);
  CHECK(back.cfg.d == model.cfg.d);
  CHECK(back.cfg.den_widths == model.cfg.den_widths);
  CHECK(back.ps.step == model.ps.step);
  for (const auto& [name, p] : model.ps.values) REQUIRE(back.ps.values.at(name) == p);
  for (const auto& [name, m] : model.ps.adam_m) REQUIRE(back.ps.adam_m.at(name) == m);
  CHECK(model_id(back) == model_id(model));
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(model));

  std::string bytes = serialize_checkpoint(model);
  bytes[0] = 'X';
  CHECK_THROWS_AS(parse_checkpoint(bytes), Error);
}

TEST_CASE("parameter checksum tracks values") {
  Model model;
  model.cfg = tiny_config();
  model.ps = init_params(model.cfg, 50);
  const std::uint64_t id0 = model_id(model);
  model.ps.values["enc.out.b"](0, 0) += 1e-9;
  CHECK(model_id(model) != id0);
}

TEST_CASE("config validation names the offending field") {
  ModelConfig cfg = tiny_config();
  cfg.C = 3;  // does not divide d=8
  try {
    cfg.validate();
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
    CHECK(std::string(e.what()).find("C") != std::string::npos);
  }
  ModelConfig bad_n = tiny_config();
  bad_n.N = 100;
  CHECK_THROWS_AS(bad_n.validate(), Error);
}
