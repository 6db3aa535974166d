#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "json.hpp"
#include "nanopro/error.hpp"
#include "nanopro/model.hpp"
#include "nanopro/rng.hpp"
#include "nanopro/tsv.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace nanopro;
using nanopro::testing::TempDir;

namespace {

template <typename Fn>
Errc code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::Io;
}

Mat random_mat(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Mat m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

ModelConfig small_config(Task task, ModalitySpec modality = ModalitySpec::Fused) {
  ModelConfig c;
  c.protein_dim = 12;
  c.text_dim = 10;
  c.d_shared = 16;
  c.tokens = 4;
  c.heads = 2;
  c.mlp_hidden = {8, 4};
  c.task = task;
  c.modality = modality;
  return c;
}

void randomize(ModelParams& p, Rng& rng, double scale) {
  for (auto& v : p.values) v = scale * rng.normal();
}

}  // namespace

TEST_CASE("init: deterministic, closed-form count, He scale") {
  const ModelConfig c;
  const auto a = init_params(c, 1);
  const auto b = init_params(c, 1);
  CHECK(std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)) == 0);
  CHECK(init_params(c, 2).values != a.values);

  const std::size_t expected = 2560 + 4096 + (2560 * 1024 + 1024) + (4096 * 1024 + 1024) +
                               2 * (4 * 128 * 128 + 2 * 128) + (2048 * 512 + 512) +
                               (512 * 128 + 128) + (128 + 1);
  CHECK(a.count() == expected);
  std::size_t sum = 0;
  for (const auto& blk : a.blocks) sum += blk.size();
  CHECK(sum == expected);

  for (const auto& blk : a.blocks) {
    if (blk.size() < 10000) continue;
    const auto d = a.data(blk.name);
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / d.size();
    double var = 0;
    for (double v : d) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / d.size());
    const double want = std::sqrt(2.0 / blk.cols);
    CHECK_MESSAGE(std::abs(sd / want - 1) < 0.1, blk.name);
  }
  for (double v : a.data("proj_text.bias")) CHECK(v == 0.0);
  for (double v : a.data("fusion.p2t.ln_gain")) CHECK(v == 1.0);
  for (double v : a.values) CHECK(static_cast<double>(static_cast<float>(v)) == v);
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.tokens = 7;
  CHECK(code_of([&] { c.validate(); }) == Errc::Config);
  c = ModelConfig{};
  c.heads = 3;
  CHECK(code_of([&] { c.validate(); }) == Errc::Config);
  CHECK_NOTHROW(ModelConfig::tiny().validate());
}

TEST_CASE("project: shape, bias, affinity") {
  Rng rng(3);
  auto p = init_params(ModelConfig{}, 5);
  for (auto& v : p.data("proj_protein.bias")) v = rng.normal();
  std::vector<double> zero(2560, 0.0), a(2560), b(2560), ab(2560);
  for (std::size_t i = 0; i < 2560; ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
    ab[i] = a[i] + b[i];
  }
  const Mat z = project(zero, p, Modality::Protein);
  CHECK(z.rows() == 8);
  CHECK(z.cols() == 128);
  const auto bias = p.data("proj_protein.bias");
  for (int t = 0; t < 8; ++t)
    for (int j = 0; j < 128; ++j) CHECK(z(t, j) == bias[t * 128 + j]);
  const Mat lin = project(ab, p, Modality::Protein) - project(a, p, Modality::Protein) -
                  project(b, p, Modality::Protein) + z;
  CHECK(lin.cwiseAbs().maxCoeff() < 1e-9);
  CHECK(code_of([&] { project(std::vector<double>(100, 0.0), p, Modality::Protein); }) == Errc::Dim);
}

TEST_CASE("attention rows are distributions") {
  Rng rng(11);
  const auto p = init_params(ModelConfig{}, 1);
  const auto blk = attention_block(p, "p2t");
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Mat q = random_mat(rng, 8, 128, 1 + trial % 5);
    const Mat kv = random_mat(rng, 8, 128, 1 + trial % 3);
    std::vector<Mat> w;
    cross_attention(q, kv, blk, {}, &w);
    REQUIRE(w.size() == 8);
    for (const auto& a : w) {
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        worst = std::max(worst, std::abs(a.row(i).sum() - 1.0));
        CHECK(a.row(i).minCoeff() >= 0.0);
      }
    }
  }
  CHECK(worst < 1e-6);

  const Mat q = random_mat(rng, 8, 128);
  Mat kv(8, 128);
  const Mat one = random_mat(rng, 1, 128);
  for (int t = 0; t < 8; ++t) kv.row(t) = one;
  std::vector<Mat> w;
  cross_attention(q, kv, blk, {}, &w);
  for (const auto& a : w) CHECK((a.array() - 1.0 / 8).abs().maxCoeff() < 1e-9);
}

TEST_CASE("attention matches brute force on a 2-token example") {
  Rng rng(4);
  AttentionBlock blk;
  const int D = 4;
  blk.heads = 2;
  blk.W_Q = random_mat(rng, D, D);
  blk.W_K = random_mat(rng, D, D);
  blk.W_V = random_mat(rng, D, D);
  blk.W_O = Mat::Identity(D, D);
  blk.ln_gain = RowVec::Ones(D);
  blk.ln_bias = RowVec::Zero(D);
  const Mat q = random_mat(rng, 2, D), kv = random_mat(rng, 2, D);
  AttentionOptions opt;
  opt.residual = false;
  opt.layer_norm = false;
  const Mat out = cross_attention(q, kv, blk, opt);

  // Direct summation per head.
  const int hd = 2;
  for (int h = 0; h < 2; ++h) {
    for (int i = 0; i < 2; ++i) {
      double qv[2], s[2];
      for (int a = 0; a < hd; ++a) {
        qv[a] = 0;
        for (int k = 0; k < D; ++k) qv[a] += q(i, k) * blk.W_Q(h * hd + a, k);
      }
      for (int j = 0; j < 2; ++j) {
        s[j] = 0;
        for (int a = 0; a < hd; ++a) {
          double kj = 0;
          for (int k = 0; k < D; ++k) kj += kv(j, k) * blk.W_K(h * hd + a, k);
          s[j] += qv[a] * kj;
        }
        s[j] /= std::sqrt(2.0);
      }
      const double e0 = std::exp(s[0]), e1 = std::exp(s[1]);
      const double w0 = e0 / (e0 + e1), w1 = e1 / (e0 + e1);
      for (int a = 0; a < hd; ++a) {
        double v0 = 0, v1 = 0;
        for (int k = 0; k < D; ++k) {
          v0 += kv(0, k) * blk.W_V(h * hd + a, k);
          v1 += kv(1, k) * blk.W_V(h * hd + a, k);
        }
        CHECK(std::abs(out(i, h * hd + a) - (w0 * v0 + w1 * v1)) < 1e-12);
      }
    }
  }
}

TEST_CASE("forward matches the straight-line oracle") {
  Rng rng(21);
  for (auto modality : {ModalitySpec::Fused, ModalitySpec::ProteinOnly, ModalitySpec::TextOnly}) {
    for (int draw = 0; draw < 5; ++draw) {
      auto cfg = small_config(draw % 2 ? Task::Regression : Task::Classification, modality);
      auto p = init_params(cfg, 100 + draw);
      randomize(p, rng, 0.4);
      const Mat xp = random_mat(rng, 3, cfg.protein_dim), xt = random_mat(rng, 3, cfg.text_dim);
      BatchInput in{cfg.uses_protein() ? &xp : nullptr, cfg.uses_text() ? &xt : nullptr};
      const auto got = forward(p, in);
      for (int b = 0; b < 3; ++b) {
        std::vector<double> vp(xp.row(b).data(), xp.row(b).data() + xp.cols());
        std::vector<double> vt(xt.row(b).data(), xt.row(b).data() + xt.cols());
        const double want = testing::oracle_forward(p, vp, vt);
        CHECK(std::abs(got[b] - want) < 1e-6);
      }
    }
  }
}

TEST_CASE("forward: probabilities, permutation, dims, non-finite") {
  Rng rng(8);
  const auto cfg = small_config(Task::Classification);
  const auto p = init_params(cfg, 3);
  const Mat xp = random_mat(rng, 6, cfg.protein_dim), xt = random_mat(rng, 6, cfg.text_dim);
  const auto out = predict_outputs(p, {&xp, &xt});
  for (double v : out) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  Mat pp(6, xp.cols()), pt(6, xt.cols());
  for (int i = 0; i < 6; ++i) {
    pp.row(i) = xp.row(perm[i]);
    pt.row(i) = xt.row(perm[i]);
  }
  const auto out2 = predict_outputs(p, {&pp, &pt});
  // GEMM kernels may round differently by row position; equal to ~1 ulp.
  for (int i = 0; i < 6; ++i) CHECK(std::abs(out2[i] - out[perm[i]]) < 1e-12);

  const Mat bad = random_mat(rng, 6, cfg.protein_dim + 1);
  CHECK(code_of([&] { forward(p, {&bad, &xt}); }) == Errc::Dim);
  Mat nan = xp;
  nan(2, 3) = std::nan("");
  CHECK(code_of([&] { forward(p, {&nan, &xt}); }) == Errc::NonFinite);
}

TEST_CASE("pos weight and losses") {
  CHECK(compute_pos_weight(1000, 100) == 20.0);
  CHECK(compute_pos_weight(7, 7) == 2.0);
  CHECK(compute_pos_weight(0, 10) == 0.0);
  CHECK(code_of([] { compute_pos_weight(5, 0); }) == Errc::NoPositives);

  const std::vector<double> sure = {1.0 - 1e-12, 1e-12}, lab = {1, 0};
  CHECK(weighted_bce(sure, lab, 3.0) < 1e-5);
  const std::vector<double> half(6, 0.5), mixed = {1, 0, 1, 1, 0, 0};
  CHECK(std::abs(weighted_bce(half, mixed, 1.0) - std::log(2.0)) < 1e-9);

  // Hand computation: w = 3.
  const std::vector<double> p4 = {0.8, 0.3, 0.6, 0.1}, y4 = {1, 0, 1, 0};
  const double hand = (-3 * std::log(0.8) - std::log(0.7) - 3 * std::log(0.6) - std::log(0.9)) / 4;
  CHECK(std::abs(weighted_bce(p4, y4, 3.0) - hand) < 1e-9);

  CHECK(mse_loss(p4, p4) == 0.0);
  const std::vector<double> r = {1, 2}, t = {0, 3};
  CHECK(mse_loss(r, t) == 1.0);
  Rng rng(2);
  std::vector<double> a(50), b(50);
  double brute = 0;
  for (int i = 0; i < 50; ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
    brute += (a[i] - b[i]) * (a[i] - b[i]);
  }
  CHECK(std::abs(mse_loss(a, b) - brute / 50) < 1e-12);
}

TEST_CASE("gradient check against central differences (tiny config)") {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(31);
  for (auto task : {Task::Classification, Task::Regression}) {
    for (auto modality : {ModalitySpec::Fused, ModalitySpec::ProteinOnly, ModalitySpec::TextOnly}) {
      auto cfg = ModelConfig::tiny();
      cfg.task = task;
      cfg.modality = modality;
      auto p = init_params(cfg, 9);
      randomize(p, rng, 0.6);
      const Mat xp = random_mat(rng, 5, cfg.protein_dim), xt = random_mat(rng, 5, cfg.text_dim);
      std::vector<double> y(5);
      for (auto& v : y) v = task == Task::Classification ? double(rng.below(2)) : rng.normal();
      const BatchInput in{&xp, &xt};
      const auto report = testing::gradient_check(p, in, y, 2.5);
      for (const auto& [name, err] : report) CHECK_MESSAGE(err < 1e-4, name << " " << err);
      std::size_t trainable = 0;
      for (const auto& b : p.blocks) trainable += b.group != "input";
      CHECK(report.size() == trainable);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(secs < 60);
}

TEST_CASE("zero-loss point has zero gradient; frozen blocks get zero slots") {
  Rng rng(5);
  auto cfg = small_config(Task::Regression);
  auto p = init_params(cfg, 2);
  const Mat xp = random_mat(rng, 4, cfg.protein_dim), xt = random_mat(rng, 4, cfg.text_dim);
  const auto z = forward(p, {&xp, &xt});
  std::vector<double> g;
  CHECK(loss_and_gradient(p, {&xp, &xt}, z, 1.0, &g) == 0.0);
  for (double v : g) CHECK(std::abs(v) < 1e-9);

  std::vector<double> y = {0, 1, 1, 0};
  cfg.task = Task::Classification;
  auto pc = init_params(cfg, 2);
  pc.frozen_groups = {"projection"};
  loss_and_gradient(pc, {&xp, &xt}, y, 2.0, &g);
  double head = 0;
  for (const auto& b : pc.blocks) {
    for (std::size_t i = b.offset; i < b.offset + b.size(); ++i) {
      if (b.group == "projection") CHECK(g[i] == 0.0);
      if (b.group == "head") head += std::abs(g[i]);
    }
  }
  CHECK(head > 0);
}

TEST_CASE("AUC equals pair counting exactly") {
  Rng rng(17);
  for (int batch = 0; batch < 20; ++batch) {
    std::vector<double> s(200), y(200);
    for (int i = 0; i < 200; ++i) {
      s[i] = std::round(rng.uniform() * 50) / 50;  // plenty of ties
      y[i] = rng.uniform() < 0.3 ? 1 : 0;
    }
    const auto auc = rank_auc(s, y);
    REQUIRE(auc.has_value());
    CHECK(*auc == testing::pair_count_auc(s, y));
    std::vector<double> cubed(s);
    for (auto& v : cubed) v = v * v * v + v;
    CHECK(*rank_auc(cubed, y) == *auc);
  }
  const std::vector<double> s2 = {0.9, 0.1}, y2 = {1, 0};
  const auto m = classification_metrics(s2, y2);
  CHECK(m.accuracy == 1.0);
  CHECK(m.precision == 1.0);
  CHECK(m.recall == 1.0);
  CHECK(m.f1 == 1.0);
  CHECK(*m.auc == 1.0);

  const std::vector<double> s3 = {0.9, 0.2, 0.7, 0.4}, y3 = {1, 1, 1, 1};
  const auto d = classification_metrics(s3, y3);
  CHECK_FALSE(d.auc.has_value());
  CHECK(d.recall == 0.5);
}

TEST_CASE("regression metrics") {
  const std::vector<double> t = {1, 2, 3, 4};
  auto m = regression_metrics(t, t);
  CHECK(m.r2 == 1.0);
  CHECK(m.mse == 0.0);
  CHECK(m.mae == 0.0);
  const std::vector<double> mean(4, 2.5);
  CHECK(std::abs(regression_metrics(mean, t).r2) < 1e-15);
  const std::vector<double> flat = {2, 2, 2};
  CHECK(code_of([&] { regression_metrics(flat, flat); }) == Errc::ZeroVariance);

  Rng rng(9);
  std::vector<double> p(50), y(50);
  for (int i = 0; i < 50; ++i) {
    y[i] = rng.normal();
    p[i] = y[i] + 0.3 * rng.normal();
  }
  double my = 0;
  for (double v : y) my += v;
  my /= 50;
  double sst = 0, ssr = 0, sa = 0;
  for (int i = 0; i < 50; ++i) {
    sst += (y[i] - my) * (y[i] - my);
    ssr += (y[i] - p[i]) * (y[i] - p[i]);
    sa += std::abs(y[i] - p[i]);
  }
  m = regression_metrics(p, y);
  CHECK(std::abs(m.r2 - (1 - ssr / sst)) < 1e-12);
  CHECK(std::abs(m.mse - ssr / 50) < 1e-12);
  CHECK(std::abs(m.mae - sa / 50) < 1e-12);

  const BoxCoxTransform bc{0.2, "train"};
  std::vector<double> rp, ry;
  for (int i = 0; i < 50; ++i) {
    const double raw = 1e-4 + rng.uniform() * 0.05;
    ry.push_back(boxcox_apply(raw, bc));
    rp.push_back(boxcox_apply(raw * (1 + 0.1 * rng.normal()) + 1e-6, bc));
  }
  m = regression_metrics(rp, ry, &bc);
  REQUIRE(m.raw_r2.has_value());
  CHECK(*m.raw_r2 <= 1.0);
  CHECK(*m.raw_mse >= 0.0);
}

namespace {

EmbeddedView linear_fixture(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddedView v;
  v.task = cfg.task;
  v.protein = random_mat(rng, n, cfg.protein_dim);
  v.text = random_mat(rng, n, cfg.text_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double s = v.protein(r, 0) + v.text(r, 1) - 0.5 * v.protein(r, 2);
    v.labels.push_back(cfg.task == Task::Classification ? (s > 0.3 ? 1.0 : 0.0) : s);
    v.sample_ids.push_back("x" + std::to_string(i));
  }
  return v;
}

}  // namespace

TEST_CASE("train overfits a 64-sample fixture; deterministic") {
  for (auto task : {Task::Classification, Task::Regression}) {
    auto cfg = small_config(task);
    cfg.max_epochs = 200;
    cfg.patience = 200;
    cfg.batch_size = 16;
    const auto data = linear_fixture(cfg, 64, 4);
    const auto res = train(data, data, cfg);
    REQUIRE(res.history.train_loss.size() >= 20);
    CHECK(res.history.train_loss[19] < res.history.train_loss[0]);
    const auto m = evaluate(res.params, data);
    if (task == Task::Classification) {
      CHECK(m.classification->f1 >= 0.95);
    } else {
      CHECK(m.regression->r2 >= 0.9);
    }
    cfg.max_epochs = 5;
    const auto a = train(data, data, cfg);
    const auto b = train(data, data, cfg);
    CHECK(a.params.values == b.params.values);
  }
}

TEST_CASE("train: early stopping and NaN input") {
  auto cfg = small_config(Task::Classification);
  cfg.max_epochs = 50;
  cfg.patience = 2;
  const auto data = linear_fixture(cfg, 40, 6);
  const auto res = train(data, data, cfg);
  CHECK(res.history.train_loss.size() <= 50);
  if (res.history.early_stopped) CHECK(res.history.train_loss.size() == res.history.best_epoch + 3);

  auto bad = data;
  bad.text(3, 2) = std::nan("");
  const auto code = code_of([&] { train(bad, data, cfg); });
  CHECK((code == Errc::NonFinite || code == Errc::Diverged));
}

TEST_CASE("checkpoint roundtrip and corruption") {
  TempDir dir("ckpt");
  auto cfg = small_config(Task::Regression);
  auto p = init_params(cfg, 44);
  p.target_transform = BoxCoxTransform{0.125, "train"};
  p.frozen_groups = {"projection"};
  save_checkpoint(p, dir / "m");
  const auto q = load_checkpoint(dir / "m");
  CHECK(std::memcmp(q.values.data(), p.values.data(), p.values.size() * sizeof(double)) == 0);
  CHECK(q.target_transform->lambda == 0.125);
  CHECK(q.frozen_groups == p.frozen_groups);
  CHECK(q.config.d_shared == 16);

  // Full-size model too.
  const auto big = init_params(ModelConfig{}, 1);
  save_checkpoint(big, dir / "big");
  CHECK(load_checkpoint(dir / "big").values == big.values);

  const auto bin = dir / "m" / "params.bin";
  const auto size = std::filesystem::file_size(bin);
  std::filesystem::resize_file(bin, size - 4);
  CHECK(code_of([&] { load_checkpoint(dir / "m"); }) == Errc::Corrupt);

  save_checkpoint(p, dir / "m");
  {
    std::fstream f(bin, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put('\x55');
  }
  CHECK(code_of([&] { load_checkpoint(dir / "m"); }) == Errc::Corrupt);

  save_checkpoint(p, dir / "m");
  auto manifest = nlohmann::json::parse(tsv::read_text(dir / "m" / "manifest.json"));
  manifest["blocks"][2]["shape"] = {3, 3};
  tsv::write_text(dir / "m" / "manifest.json", manifest.dump());
  try {
    load_checkpoint(dir / "m");
    FAIL("expected E_CORRUPT");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::Corrupt);
    CHECK(std::string(e.what()).find(p.blocks[2].name) != std::string::npos);
  }

  manifest["schema_version"] = "nanopro-checkpoint/0";
  tsv::write_text(dir / "m" / "manifest.json", manifest.dump());
  CHECK(code_of([&] { load_checkpoint(dir / "m"); }) == Errc::Version);
}

TEST_CASE("finetune freezes projection and fusion") {
  auto cfg = small_config(Task::Classification);
  cfg.max_epochs = 30;
  const auto data = linear_fixture(cfg, 100, 12);
  const auto base = train(data, data, cfg).params;
  auto ft_cfg = cfg;
  ft_cfg.seed = 77;
  const auto shifted = linear_fixture(cfg, 101, 13);
  const auto r = finetune(base, shifted, ft_cfg);
  CHECK(r.train_rows.size() == 71);
  CHECK(r.val_rows.size() == 15);
  CHECK(r.test_rows.size() == 15);
  bool head_changed = false;
  for (const auto& b : base.blocks) {
    const auto before = base.data(b.name);
    const auto after = r.params.data(b.name);
    const bool same = std::memcmp(before.data(), after.data(), before.size() * sizeof(double)) == 0;
    if (b.group != "head") CHECK_MESSAGE(same, b.name);
    if (b.group == "head" && !same) head_changed = true;
  }
  CHECK(head_changed);
}
