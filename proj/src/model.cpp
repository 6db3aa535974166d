#include "nanopro/model.hpp"

#include <cmath>

#include "nanopro/embedding.hpp"
#include "nanopro/error.hpp"
#include "nanopro/rng.hpp"

namespace nanopro {

using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;
using MapV = Eigen::Map<RowVec>;
using CMapV = Eigen::Map<const RowVec>;

std::string_view modality_spec_name(ModalitySpec m) {
  switch (m) {
    case ModalitySpec::Fused: return "fused";
    case ModalitySpec::ProteinOnly: return "protein_only";
    case ModalitySpec::TextOnly: return "text_only";
  }
  return "fused";
}

std::optional<ModalitySpec> parse_modality_spec(std::string_view text) {
  if (text == "fused") return ModalitySpec::Fused;
  if (text == "protein_only") return ModalitySpec::ProteinOnly;
  if (text == "text_only") return ModalitySpec::TextOnly;
  return std::nullopt;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(Errc::Config, m); };
  if (tokens == 0 || heads == 0 || d_shared == 0) fail("tokens, heads and d_shared must be positive");
  if (d_shared % tokens) fail("d_shared must be divisible by tokens");
  if (token_dim() % heads) fail("token_dim must be divisible by heads");
  if (protein_dim == 0 || text_dim == 0) fail("embedding dims must be positive");
  for (auto h : mlp_hidden) {
    if (h == 0) fail("mlp hidden sizes must be positive");
  }
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (!(learning_rate > 0)) fail("learning_rate must be > 0");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.protein_dim = 6;
  c.text_dim = 7;
  c.d_shared = 8;
  c.tokens = 2;
  c.heads = 2;
  c.mlp_hidden = {6, 5};
  return c;
}

// ---- params ----

const ParamBlock* ModelParams::find(std::string_view name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

const ParamBlock& ModelParams::block(std::string_view name) const {
  if (auto b = find(name)) return *b;
  throw Error(Errc::Corrupt, "no parameter block " + std::string(name));
}

std::span<const double> ModelParams::data(std::string_view name) const {
  const auto& b = block(name);
  return {values.data() + b.offset, b.size()};
}

std::span<double> ModelParams::data(std::string_view name) {
  const auto& b = block(name);
  return {values.data() + b.offset, b.size()};
}

namespace {

std::vector<std::string> directions(const ModelConfig& c) {
  if (c.modality == ModalitySpec::Fused) return {"p2t", "t2p"};
  return {"self"};
}

}  // namespace

ModelParams make_layout(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  std::size_t off = 0;
  auto add = [&](std::string name, std::string group, std::size_t rows, std::size_t cols) {
    p.blocks.push_back({std::move(name), std::move(group), rows, cols, off});
    off += rows * cols;
  };
  // Training-set embedding means, subtracted before projection. Fitted, not
  // learned: the "input" group is never updated by the optimizer.
  if (config.uses_protein()) add("input.protein_mean", "input", 1, config.protein_dim);
  if (config.uses_text()) add("input.text_mean", "input", 1, config.text_dim);
  if (config.uses_protein()) {
    add("proj_protein.weight", "projection", config.d_shared, config.protein_dim);
    add("proj_protein.bias", "projection", config.d_shared, 1);
  }
  if (config.uses_text()) {
    add("proj_text.weight", "projection", config.d_shared, config.text_dim);
    add("proj_text.bias", "projection", config.d_shared, 1);
  }
  const auto D = config.token_dim();
  for (const auto& d : directions(config)) {
    const auto pre = "fusion." + d + ".";
    for (const char* w : {"W_Q", "W_K", "W_V", "W_O"}) add(pre + w, "fusion", D, D);
    add(pre + "ln_gain", "fusion", D, 1);
    add(pre + "ln_bias", "fusion", D, 1);
  }
  std::size_t in = config.head_input();
  for (std::size_t k = 0; k < config.mlp_hidden.size(); ++k) {
    const auto pre = "head.l" + std::to_string(k + 1) + ".";
    add(pre + "weight", "head", config.mlp_hidden[k], in);
    add(pre + "bias", "head", config.mlp_hidden[k], 1);
    in = config.mlp_hidden[k];
  }
  add("head.out.weight", "head", 1, in);
  add("head.out.bias", "head", 1, 1);
  p.values.assign(off, 0.0);
  return p;
}

void round_to_float(std::span<double> values) {
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  auto p = make_layout(config);
  for (const auto& b : p.blocks) {
    auto d = std::span<double>(p.values.data() + b.offset, b.size());
    const bool gain = b.name.ends_with("ln_gain");
    const bool weight = b.name.ends_with(".weight") || b.name.find(".W_") != std::string::npos;
    if (gain) {
      std::fill(d.begin(), d.end(), 1.0);
    } else if (weight) {
      Rng rng(mix_seed(seed, fnv1a(b.name)));
      const double sd = std::sqrt(2.0 / static_cast<double>(b.cols));
      for (auto& v : d) v = sd * rng.normal();
    }
  }
  round_to_float(p.values);
  return p;
}

// ---- attention ----

namespace {

struct AttnRefs {
  CMapM wq, wk, wv, wo;
  CMapV gain, bias;
  std::size_t heads;
};

AttnRefs attn_refs(const ModelParams& p, const std::string& dir) {
  const auto D = p.config.token_dim();
  const auto pre = "fusion." + dir + ".";
  auto m = [&](const char* n) { return CMapM(p.data(pre + n).data(), D, D); };
  auto v = [&](const char* n) { return CMapV(p.data(pre + n).data(), D); };
  return {m("W_Q"), m("W_K"), m("W_V"), m("W_O"), v("ln_gain"), v("ln_bias"), p.config.heads};
}

struct StreamTrace {
  Mat Q, K, V, A, O, R, xhat, out;
  Eigen::VectorXd inv_sigma;
};

void attention_forward(const Mat& zq, const Mat& zkv, std::size_t B, std::size_t T,
                       const AttnRefs& w, const AttentionOptions& opt, StreamTrace& st) {
  const auto D = static_cast<std::size_t>(zq.cols());
  const auto H = w.heads;
  const auto hd = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  st.Q.noalias() = zq * w.wq.transpose();
  st.K.noalias() = zkv * w.wk.transpose();
  st.V.noalias() = zkv * w.wv.transpose();
  st.A.resize(static_cast<Eigen::Index>(B * H * T), static_cast<Eigen::Index>(T));
  st.O.setZero(static_cast<Eigen::Index>(B * T), static_cast<Eigen::Index>(D));
  const auto Ti = static_cast<Eigen::Index>(T);
  const auto hdi = static_cast<Eigen::Index>(hd);
  for (std::size_t b = 0; b < B; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * T);
    for (std::size_t h = 0; h < H; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * hd);
      Mat S = st.Q.block(r0, c0, Ti, hdi) * st.K.block(r0, c0, Ti, hdi).transpose() * scale;
      for (Eigen::Index i = 0; i < Ti; ++i) {
        const double mx = S.row(i).maxCoeff();
        S.row(i) = (S.row(i).array() - mx).exp().matrix();
        S.row(i) /= S.row(i).sum();
      }
      st.A.block(static_cast<Eigen::Index>((b * H + h) * T), 0, Ti, Ti) = S;
      st.O.block(r0, c0, Ti, hdi).noalias() = S * st.V.block(r0, c0, Ti, hdi);
    }
  }
  st.R.noalias() = st.O * w.wo.transpose();
  if (opt.residual) st.R += zq;
  if (!opt.layer_norm) {
    st.out = st.R;
    return;
  }
  st.xhat.resize(st.R.rows(), st.R.cols());
  st.inv_sigma.resize(st.R.rows());
  for (Eigen::Index i = 0; i < st.R.rows(); ++i) {
    const double mu = st.R.row(i).mean();
    const double var = (st.R.row(i).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + opt.ln_eps);
    st.inv_sigma(i) = inv;
    st.xhat.row(i) = (st.R.row(i).array() - mu) * inv;
  }
  st.out = (st.xhat.array().rowwise() * w.gain.array()).rowwise() + w.bias.array();
}

struct AttnGrads {
  double* wq = nullptr;  // all point into the flat gradient, or null
  double* wk = nullptr;
  double* wv = nullptr;
  double* wo = nullptr;
  double* gain = nullptr;
  double* bias = nullptr;
};

void attention_backward(const Mat& zq, const Mat& zkv, std::size_t B, std::size_t T,
                        const AttnRefs& w, const AttentionOptions& opt, const StreamTrace& st,
                        const Mat& dout, const AttnGrads& g, Mat& dzq, Mat& dzkv) {
  const auto D = static_cast<Eigen::Index>(zq.cols());
  const auto H = w.heads;
  const auto hd = static_cast<std::size_t>(D) / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Mat dR;
  if (opt.layer_norm) {
    if (g.gain) MapV(g.gain, D) += (dout.array() * st.xhat.array()).colwise().sum().matrix();
    if (g.bias) MapV(g.bias, D) += dout.colwise().sum();
    const Mat dxhat = (dout.array().rowwise() * w.gain.array()).matrix();
    dR.resize(dout.rows(), D);
    for (Eigen::Index i = 0; i < dout.rows(); ++i) {
      const double m1 = dxhat.row(i).mean();
      const double m2 = (dxhat.row(i).array() * st.xhat.row(i).array()).mean();
      dR.row(i) = st.inv_sigma(i) * (dxhat.row(i).array() - m1 - st.xhat.row(i).array() * m2).matrix();
    }
  } else {
    dR = dout;
  }
  if (opt.residual) dzq += dR;
  if (g.wo) MapM(g.wo, D, D).noalias() += dR.transpose() * st.O;
  const Mat dO = dR * w.wo;

  Mat dQ = Mat::Zero(st.Q.rows(), D), dK = Mat::Zero(st.K.rows(), D), dV = Mat::Zero(st.V.rows(), D);
  const auto Ti = static_cast<Eigen::Index>(T);
  const auto hdi = static_cast<Eigen::Index>(hd);
  for (std::size_t b = 0; b < B; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * T);
    for (std::size_t h = 0; h < H; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * hd);
      const auto A = st.A.block(static_cast<Eigen::Index>((b * H + h) * T), 0, Ti, Ti);
      const auto dOb = dO.block(r0, c0, Ti, hdi);
      const Mat dA = dOb * st.V.block(r0, c0, Ti, hdi).transpose();
      dV.block(r0, c0, Ti, hdi).noalias() = A.transpose() * dOb;
      const Eigen::VectorXd rs = (dA.array() * A.array()).rowwise().sum();
      const Mat dS = (A.array() * (dA.array().colwise() - rs.array())).matrix();
      dQ.block(r0, c0, Ti, hdi).noalias() = dS * st.K.block(r0, c0, Ti, hdi) * scale;
      dK.block(r0, c0, Ti, hdi).noalias() = dS.transpose() * st.Q.block(r0, c0, Ti, hdi) * scale;
    }
  }
  if (g.wq) MapM(g.wq, D, D).noalias() += dQ.transpose() * zq;
  if (g.wk) MapM(g.wk, D, D).noalias() += dK.transpose() * zkv;
  if (g.wv) MapM(g.wv, D, D).noalias() += dV.transpose() * zkv;
  dzq.noalias() += dQ * w.wq;
  dzkv.noalias() += dK * w.wk;
  dzkv.noalias() += dV * w.wv;
}

}  // namespace

AttentionBlock attention_block(const ModelParams& params, std::string_view direction) {
  const auto r = attn_refs(params, std::string(direction));
  return {r.wq, r.wk, r.wv, r.wo, r.gain, r.bias, r.heads};
}

Mat cross_attention(const Mat& queries, const Mat& keys_values, const AttentionBlock& block,
                    const AttentionOptions& options, std::vector<Mat>* weights) {
  const auto D = queries.cols();
  if (keys_values.cols() != D || keys_values.rows() != queries.rows() || block.W_Q.rows() != D ||
      block.heads == 0 || D % static_cast<Eigen::Index>(block.heads)) {
    throw Error(Errc::Dim, "attention shape mismatch");
  }
  AttnRefs refs{CMapM(block.W_Q.data(), D, D), CMapM(block.W_K.data(), D, D),
                CMapM(block.W_V.data(), D, D), CMapM(block.W_O.data(), D, D),
                CMapV(block.ln_gain.data(), D), CMapV(block.ln_bias.data(), D), block.heads};
  StreamTrace st;
  const auto T = static_cast<std::size_t>(queries.rows());
  attention_forward(queries, keys_values, 1, T, refs, options, st);
  if (weights) {
    weights->clear();
    const auto Ti = static_cast<Eigen::Index>(T);
    for (std::size_t h = 0; h < block.heads; ++h) {
      weights->push_back(st.A.block(static_cast<Eigen::Index>(h * T), 0, Ti, Ti));
    }
  }
  return st.out;
}

// ---- forward / backward ----

std::size_t BatchInput::rows() const {
  if (protein && protein->rows()) return static_cast<std::size_t>(protein->rows());
  if (text) return static_cast<std::size_t>(text->rows());
  return 0;
}

struct ForwardTrace {
  std::size_t B = 0;
  Mat Zp, Zt;  // (B*T) x token_dim
  std::vector<StreamTrace> streams;
  std::vector<Mat> act;  // act[0] = fused vector
  std::vector<Mat> pre;  // hidden pre-activations
  std::vector<double> z;
};

namespace {

Mat centered(const Mat& X, const ModelParams& p, const char* which) {
  const auto mean = p.data(std::string("input.") + which + "_mean");
  Mat out = X;
  out.rowwise() -= CMapV(mean.data(), static_cast<Eigen::Index>(mean.size()));
  return out;
}

Mat project_batch(const Mat& X, const ModelParams& p, const char* which, std::size_t in_dim) {
  const auto& c = p.config;
  if (static_cast<std::size_t>(X.cols()) != in_dim) {
    throw Error(Errc::Dim, std::string(which) + " input has " + std::to_string(X.cols()) +
                               " columns, expected " + std::to_string(in_dim));
  }
  const std::string pre = std::string("proj_") + which;
  CMapM W(p.data(pre + ".weight").data(), static_cast<Eigen::Index>(c.d_shared),
          static_cast<Eigen::Index>(in_dim));
  CMapV b(p.data(pre + ".bias").data(), static_cast<Eigen::Index>(c.d_shared));
  Mat P = centered(X, p, which) * W.transpose();
  P.rowwise() += b;
  // B x d_shared row-major is the same memory as (B*T) x token_dim.
  return CMapM(P.data(), static_cast<Eigen::Index>(X.rows() * c.tokens),
               static_cast<Eigen::Index>(c.token_dim()));
}

AttentionOptions model_attention_options(const ModelConfig& c) {
  AttentionOptions o;
  o.ln_eps = c.ln_eps;
  return o;
}

bool all_finite(const Mat& m) { return m.array().isFinite().all(); }

// Row-major reinterpretation with a new shape (same element count).
Mat reshaped(const Mat& m, Eigen::Index rows, Eigen::Index cols) {
  return CMapM(m.data(), rows, cols);
}

}  // namespace

Mat project(std::span<const double> embedding, const ModelParams& params, Modality which) {
  const auto& c = params.config;
  const auto dim = which == Modality::Protein ? c.protein_dim : c.text_dim;
  if (embedding.size() != dim) {
    throw Error(Errc::Dim, "embedding has " + std::to_string(embedding.size()) + " entries, expected " +
                               std::to_string(dim));
  }
  Mat X = CMapM(embedding.data(), 1, static_cast<Eigen::Index>(dim));
  return project_batch(X, params, which == Modality::Protein ? "protein" : "text", dim);
}

std::vector<double> forward(const ModelParams& params, const BatchInput& input, ForwardTrace* trace) {
  const auto& c = params.config;
  const auto B = input.rows();
  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  tr = ForwardTrace{};
  tr.B = B;
  if (c.uses_protein()) {
    if (!input.protein || static_cast<std::size_t>(input.protein->rows()) != B) {
      throw Error(Errc::Dim, "protein input missing or row count mismatch");
    }
    tr.Zp = project_batch(*input.protein, params, "protein", c.protein_dim);
  }
  if (c.uses_text()) {
    if (!input.text || static_cast<std::size_t>(input.text->rows()) != B) {
      throw Error(Errc::Dim, "text input missing or row count mismatch");
    }
    tr.Zt = project_batch(*input.text, params, "text", c.text_dim);
  }

  const auto opt = model_attention_options(c);
  const auto dirs = directions(c);
  tr.streams.resize(dirs.size());
  Mat F(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(c.head_input()));
  const auto ds = static_cast<Eigen::Index>(c.d_shared);
  for (std::size_t s = 0; s < dirs.size(); ++s) {
    const Mat* zq = nullptr;
    const Mat* zkv = nullptr;
    if (dirs[s] == "p2t") {
      zq = &tr.Zp, zkv = &tr.Zt;
    } else if (dirs[s] == "t2p") {
      zq = &tr.Zt, zkv = &tr.Zp;
    } else {
      zq = zkv = c.uses_protein() ? &tr.Zp : &tr.Zt;
    }
    attention_forward(*zq, *zkv, B, c.tokens, attn_refs(params, dirs[s]), opt, tr.streams[s]);
    F.middleCols(static_cast<Eigen::Index>(s) * ds, ds) =
        CMapM(tr.streams[s].out.data(), static_cast<Eigen::Index>(B), ds);
  }
  if (!all_finite(F)) throw Error(Errc::NonFinite, "non-finite fused representation");

  tr.act.push_back(std::move(F));
  for (std::size_t k = 0; k < c.mlp_hidden.size(); ++k) {
    const auto pre = "head.l" + std::to_string(k + 1) + ".";
    const auto& wb = params.block(pre + "weight");
    CMapM W(params.values.data() + wb.offset, static_cast<Eigen::Index>(wb.rows),
            static_cast<Eigen::Index>(wb.cols));
    CMapV bias(params.data(pre + "bias").data(), static_cast<Eigen::Index>(wb.rows));
    Mat Z = tr.act.back() * W.transpose();
    Z.rowwise() += bias;
    tr.act.push_back(Z.cwiseMax(0.0));
    tr.pre.push_back(std::move(Z));
  }
  const auto& ob = params.block("head.out.weight");
  CMapV wout(params.values.data() + ob.offset, static_cast<Eigen::Index>(ob.cols));
  const double bout = params.data("head.out.bias")[0];
  const Eigen::VectorXd z = tr.act.back() * wout.transpose();
  tr.z.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    tr.z[i] = z(static_cast<Eigen::Index>(i)) + bout;
    if (!std::isfinite(tr.z[i])) throw Error(Errc::NonFinite, "non-finite model output");
  }
  return tr.z;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<double> predict_outputs(const ModelParams& params, const BatchInput& input) {
  auto z = forward(params, input);
  if (params.config.task == Task::Classification) {
    for (auto& v : z) v = sigmoid(v);
  }
  return z;
}

// ---- losses ----

double compute_pos_weight(std::size_t n_neg, std::size_t n_pos) {
  if (n_pos == 0) throw Error(Errc::NoPositives, "no positive samples in the training split");
  return 2.0 * static_cast<double>(n_neg) / static_cast<double>(n_pos);
}

double weighted_bce(std::span<const double> p, std::span<const double> y, double w_pos) {
  if (p.size() != y.size() || p.empty()) throw Error(Errc::Dim, "weighted_bce size mismatch");
  double sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    sum += -(w_pos * y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc));
  }
  return sum / static_cast<double>(p.size());
}

double mse_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) throw Error(Errc::Dim, "mse size mismatch");
  double sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - target[i]) * (pred[i] - target[i]);
  return sum / static_cast<double>(pred.size());
}

double loss_and_gradient(const ModelParams& params, const BatchInput& input,
                         std::span<const double> labels, double w_pos, std::vector<double>* grad) {
  const auto& c = params.config;
  ForwardTrace tr;
  const auto z = forward(params, input, &tr);
  const auto B = z.size();
  if (labels.size() != B) throw Error(Errc::Dim, "label count mismatch");

  double loss = 0;
  Eigen::VectorXd dz(static_cast<Eigen::Index>(B));
  const double inv_b = 1.0 / static_cast<double>(B);
  if (c.task == Task::Classification) {
    std::vector<double> p(B);
    for (std::size_t i = 0; i < B; ++i) {
      p[i] = sigmoid(z[i]);
      const bool clamped = p[i] < kProbClamp || p[i] > 1.0 - kProbClamp;
      const double y = labels[i];
      dz(static_cast<Eigen::Index>(i)) =
          clamped ? 0.0 : (-w_pos * y * (1.0 - p[i]) + (1.0 - y) * p[i]) * inv_b;
    }
    loss = weighted_bce(p, labels, w_pos);
  } else {
    for (std::size_t i = 0; i < B; ++i) dz(static_cast<Eigen::Index>(i)) = 2.0 * (z[i] - labels[i]) * inv_b;
    loss = mse_loss(z, labels);
  }
  if (!grad) return loss;

  grad->assign(params.values.size(), 0.0);
  auto gptr = [&](const std::string& name) -> double* {
    const auto& b = params.block(name);
    return params.frozen(b) ? nullptr : grad->data() + b.offset;
  };

  // Head.
  const auto L = c.mlp_hidden.size();
  const auto& ob = params.block("head.out.weight");
  CMapV wout(params.values.data() + ob.offset, static_cast<Eigen::Index>(ob.cols));
  if (auto g = gptr("head.out.weight")) MapV(g, static_cast<Eigen::Index>(ob.cols)) += dz.transpose() * tr.act[L];
  if (auto g = gptr("head.out.bias")) g[0] += dz.sum();
  Mat dact = dz * wout;
  for (std::size_t k = L; k-- > 0;) {
    const auto pre = "head.l" + std::to_string(k + 1) + ".";
    const auto& wb = params.block(pre + "weight");
    CMapM W(params.values.data() + wb.offset, static_cast<Eigen::Index>(wb.rows),
            static_cast<Eigen::Index>(wb.cols));
    const Mat dpre = (tr.pre[k].array() > 0.0).select(dact, 0.0);
    if (auto g = gptr(pre + "weight")) {
      MapM(g, static_cast<Eigen::Index>(wb.rows), static_cast<Eigen::Index>(wb.cols)).noalias() +=
          dpre.transpose() * tr.act[k];
    }
    if (auto g = gptr(pre + "bias")) MapV(g, static_cast<Eigen::Index>(wb.rows)) += dpre.colwise().sum();
    dact = dpre * W;
  }

  const bool fusion_trainable = !params.frozen_groups.count("fusion");
  const bool proj_trainable = !params.frozen_groups.count("projection");
  if (!fusion_trainable && !proj_trainable) return loss;

  // Fusion.
  const auto opt = model_attention_options(c);
  const auto dirs = directions(c);
  const auto ds = static_cast<Eigen::Index>(c.d_shared);
  const auto D = static_cast<Eigen::Index>(c.token_dim());
  const auto BT = static_cast<Eigen::Index>(B * c.tokens);
  Mat dZp = Mat::Zero(c.uses_protein() ? BT : 0, D);
  Mat dZt = Mat::Zero(c.uses_text() ? BT : 0, D);
  for (std::size_t s = 0; s < dirs.size(); ++s) {
    const Mat dout = reshaped(dact.middleCols(static_cast<Eigen::Index>(s) * ds, ds), BT, D);
    const auto pre = "fusion." + dirs[s] + ".";
    const AttnGrads g{gptr(pre + "W_Q"), gptr(pre + "W_K"), gptr(pre + "W_V"),
                      gptr(pre + "W_O"), gptr(pre + "ln_gain"), gptr(pre + "ln_bias")};
    const auto w = attn_refs(params, dirs[s]);
    if (dirs[s] == "p2t") {
      attention_backward(tr.Zp, tr.Zt, B, c.tokens, w, opt, tr.streams[s], dout, g, dZp, dZt);
    } else if (dirs[s] == "t2p") {
      attention_backward(tr.Zt, tr.Zp, B, c.tokens, w, opt, tr.streams[s], dout, g, dZt, dZp);
    } else {
      const Mat& z0 = c.uses_protein() ? tr.Zp : tr.Zt;
      Mat& dz0 = c.uses_protein() ? dZp : dZt;
      Mat dkv = Mat::Zero(BT, D);
      attention_backward(z0, z0, B, c.tokens, w, opt, tr.streams[s], dout, g, dz0, dkv);
      dz0 += dkv;
    }
  }
  if (!proj_trainable) return loss;

  auto proj_grad = [&](const Mat& dZtok, const Mat& X, const char* which, std::size_t in_dim) {
    const Mat dZ = reshaped(dZtok, static_cast<Eigen::Index>(B), ds);
    const std::string pre = std::string("proj_") + which;
    if (auto g = gptr(pre + ".weight")) {
      MapM(g, ds, static_cast<Eigen::Index>(in_dim)).noalias() += dZ.transpose() * centered(X, params, which);
    }
    if (auto g = gptr(pre + ".bias")) MapV(g, ds) += dZ.colwise().sum();
  };
  if (c.uses_protein()) proj_grad(dZp, *input.protein, "protein", c.protein_dim);
  if (c.uses_text()) proj_grad(dZt, *input.text, "text", c.text_dim);
  return loss;
}

}  // namespace nanopro
