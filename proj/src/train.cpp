#include <algorithm>
#include <cmath>
#include <numeric>

#include "nanopro/error.hpp"
#include "nanopro/model.hpp"
#include "nanopro/rng.hpp"

namespace nanopro {

// ---- metrics ----

std::optional<double> rank_auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw Error(Errc::Dim, "auc size mismatch");
  const auto n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Midranks, doubled to stay integral: tied run [i, j) gets i + j + 1.
  double pos_rank2 = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] > 0.5) {
        pos_rank2 += static_cast<double>(i + j + 1);
        n_pos++;
      }
    }
    i = j;
  }
  const auto n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  // U = sum of positive ranks - n_pos (n_pos + 1) / 2, all doubled.
  const double u2 = pos_rank2 - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u2 / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

ClassificationMetrics classification_metrics(std::span<const double> scores,
                                             std::span<const double> labels, double threshold) {
  if (scores.size() != labels.size() || scores.empty()) throw Error(Errc::Dim, "metrics size mismatch");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool pos = labels[i] > 0.5;
    if (pred && pos) tp++;
    else if (pred) fp++;
    else if (pos) fn++;
    else tn++;
  }
  ClassificationMetrics m;
  m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.auc = rank_auc(scores, labels);
  return m;
}

namespace {

struct Basic {
  double r2, mse, mae;
};

std::optional<Basic> basic_regression(std::span<const double> p, std::span<const double> t) {
  const double n = static_cast<double>(t.size());
  const double mean = std::accumulate(t.begin(), t.end(), 0.0) / n;
  double ss_tot = 0, ss_res = 0, abs = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    ss_tot += (t[i] - mean) * (t[i] - mean);
    ss_res += (t[i] - p[i]) * (t[i] - p[i]);
    abs += std::abs(t[i] - p[i]);
  }
  if (ss_tot == 0) return std::nullopt;
  return Basic{1.0 - ss_res / ss_tot, ss_res / n, abs / n};
}

}  // namespace

RegressionMetrics regression_metrics(std::span<const double> predictions,
                                     std::span<const double> targets,
                                     const BoxCoxTransform* transform) {
  if (predictions.size() != targets.size()) throw Error(Errc::Dim, "metrics size mismatch");
  if (targets.size() < 2) throw Error(Errc::Dim, "regression metrics need at least 2 samples");
  const auto b = basic_regression(predictions, targets);
  if (!b) throw Error(Errc::ZeroVariance, "constant regression targets");
  RegressionMetrics m{b->r2, b->mse, b->mae, {}, {}, {}};
  if (transform) {
    std::vector<double> rp, rt;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      rp.push_back(boxcox_invert_clipped(predictions[i], *transform));
      rt.push_back(boxcox_invert_clipped(targets[i], *transform));
    }
    if (const auto raw = basic_regression(rp, rt)) {
      m.raw_r2 = raw->r2;
      m.raw_mse = raw->mse;
      m.raw_mae = raw->mae;
    }
  }
  return m;
}

// ---- views ----

EmbeddedView EmbeddedView::subset(std::span<const std::size_t> rows) const {
  EmbeddedView out;
  out.task = task;
  const auto n = static_cast<Eigen::Index>(rows.size());
  if (protein.size()) out.protein.resize(n, protein.cols());
  if (text.size()) out.text.resize(n, text.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
    if (protein.size()) out.protein.row(i) = protein.row(r);
    if (text.size()) out.text.row(i) = text.row(r);
    out.labels.push_back(labels[static_cast<std::size_t>(r)]);
    if (!sample_ids.empty()) out.sample_ids.push_back(sample_ids[static_cast<std::size_t>(r)]);
  }
  return out;
}

double MetricsReport::primary() const {
  if (classification) return classification->f1;
  if (regression) return regression->r2;
  return 0.0;
}

namespace {

constexpr std::size_t kEvalChunk = 256;

}  // namespace

std::vector<double> predict_view(const ModelParams& params, const EmbeddedView& view) {
  std::vector<double> out;
  out.reserve(view.size());
  for (std::size_t start = 0; start < view.size(); start += kEvalChunk) {
    const auto len = std::min(kEvalChunk, view.size() - start);
    const auto s = static_cast<Eigen::Index>(start);
    const auto l = static_cast<Eigen::Index>(len);
    Mat p, t;
    if (view.protein.size()) p = view.protein.middleRows(s, l);
    if (view.text.size()) t = view.text.middleRows(s, l);
    const auto part = predict_outputs(params, {p.size() ? &p : nullptr, t.size() ? &t : nullptr});
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

MetricsReport evaluate(const ModelParams& params, const EmbeddedView& view) {
  MetricsReport r;
  r.task = params.config.task;
  r.n = view.size();
  if (view.size() == 0) throw Error(Errc::EmptyView, "cannot evaluate an empty view");
  const auto out = predict_view(params, view);
  if (r.task == Task::Classification) {
    r.classification = classification_metrics(out, view.labels);
  } else {
    const BoxCoxTransform* t = params.target_transform ? &*params.target_transform : nullptr;
    r.regression = regression_metrics(out, view.labels, t);
  }
  return r;
}

// ---- optimizer ----

void fit_input_means(ModelParams& params, const EmbeddedView& view) {
  auto fit = [&](const Mat& x, const char* name) {
    if (!params.find(name)) return;
    auto out = params.data(name);
    if (static_cast<std::size_t>(x.cols()) != out.size() || x.rows() == 0) {
      throw Error(Errc::Dim, std::string("cannot fit ") + name + " from the view");
    }
    const RowVec mean = x.colwise().mean();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = mean(static_cast<Eigen::Index>(j));
    round_to_float(out);
  };
  fit(view.protein, "input.protein_mean");
  fit(view.text, "input.text_mean");
}

void adam_step(ModelParams& params, const std::vector<double>& grad, AdamState& state) {
  const auto& c = params.config;
  if (state.m.size() != params.values.size()) {
    state.m.assign(params.values.size(), 0.0);
    state.v.assign(params.values.size(), 0.0);
  }
  state.step++;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const double step = c.learning_rate / bc1;
  const double inv_bc2 = 1.0 / bc2;
  using Arr = Eigen::Map<Eigen::ArrayXd>;
  for (const auto& b : params.blocks) {
    if (params.frozen(b)) continue;
    const auto off = static_cast<Eigen::Index>(b.offset), n = static_cast<Eigen::Index>(b.size());
    Arr w(params.values.data() + off, n), m(state.m.data() + off, n), v(state.v.data() + off, n);
    const Eigen::Map<const Eigen::ArrayXd> g(grad.data() + off, n);
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.square();
    w = (w - step * m / ((v * inv_bc2).sqrt() + c.adam_eps)).cast<float>().cast<double>();
  }
}

// ---- training ----

namespace {

double validation_metric(const ModelParams& params, const EmbeddedView& val) {
  const auto out = predict_view(params, val);
  if (params.config.task == Task::Classification) return classification_metrics(out, val.labels).f1;
  try {
    return regression_metrics(out, val.labels).r2;
  } catch (const Error& e) {
    if (e.code() != Errc::ZeroVariance) throw;
    return -mse_loss(out, val.labels);
  }
}

double resolve_pos_weight(const ModelConfig& config, const EmbeddedView& train_view) {
  if (config.task != Task::Classification) return 1.0;
  if (config.w_pos_policy != "auto") {
    try {
      return std::stod(config.w_pos_policy);
    } catch (const std::exception&) {
      throw Error(Errc::Config, "w_pos_policy must be 'auto' or a number");
    }
  }
  std::size_t pos = 0;
  for (double y : train_view.labels) pos += y > 0.5;
  return compute_pos_weight(train_view.size() - pos, pos);
}

}  // namespace

TrainResult train(const EmbeddedView& train_view, const EmbeddedView& val_view,
                  const ModelConfig& config, const ModelParams* start) {
  if (train_view.size() == 0 || val_view.size() == 0) {
    throw Error(Errc::EmptyView, "train and val views must be nonempty");
  }
  ModelParams params = start ? *start : init_params(config, config.seed);
  if (!start) fit_input_means(params, train_view);
  if (start) {
    auto frozen = params.frozen_groups;
    auto transform = params.target_transform;
    params.config = config;
    params.frozen_groups = frozen;
    params.target_transform = transform;
    if (make_layout(config).values.size() != params.values.size()) {
      throw Error(Errc::Config, "starting parameters do not match the config");
    }
  }

  TrainResult result;
  auto& h = result.history;
  h.w_pos = resolve_pos_weight(config, train_view);

  AdamState adam;
  ModelParams best = params;
  double best_metric = -INFINITY;
  std::size_t since_best = 0;
  std::vector<double> grad;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const auto batches = make_batches(train_view.size(), config.batch_size, mix_seed(config.seed, epoch));
    double epoch_loss = 0;
    for (const auto& batch : batches) {
      const auto sub = train_view.subset(batch);
      const double loss = loss_and_gradient(params, sub.input(), sub.labels, h.w_pos, &grad);
      if (!std::isfinite(loss)) {
        throw Error(Errc::Diverged, "non-finite loss at epoch " + std::to_string(epoch + 1));
      }
      for (double g : grad) {
        if (!std::isfinite(g)) throw Error(Errc::Diverged, "non-finite gradient");
      }
      adam_step(params, grad, adam);
      epoch_loss += loss * static_cast<double>(batch.size());
    }
    h.train_loss.push_back(epoch_loss / static_cast<double>(train_view.size()));
    const double metric = validation_metric(params, val_view);
    h.val_metric.push_back(metric);
    if (metric > best_metric) {
      best_metric = metric;
      best.values = params.values;
      h.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      h.early_stopped = true;
      break;
    }
  }
  best.config = params.config;
  best.frozen_groups = params.frozen_groups;
  best.target_transform = params.target_transform;
  result.params = std::move(best);
  return result;
}

FinetuneResult finetune(const ModelParams& base, const EmbeddedView& data, const ModelConfig& config) {
  if (data.size() < 3) throw Error(Errc::EmptyView, "finetune needs at least 3 samples");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(config.seed, 0x46494e45ULL));
  rng.shuffle(std::span(order));
  const auto n = data.size();
  const auto n_train = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.70 * static_cast<double>(n))));
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n))));
  if (n_train + n_val >= n) throw Error(Errc::EmptyView, "finetune data too small for a 70:15:15 split");

  FinetuneResult r;
  r.train_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  r.val_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                    order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  r.test_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());

  ModelConfig cfg = config;
  cfg.task = base.config.task;
  cfg.modality = base.config.modality;
  cfg.protein_dim = base.config.protein_dim;
  cfg.text_dim = base.config.text_dim;
  cfg.d_shared = base.config.d_shared;
  cfg.tokens = base.config.tokens;
  cfg.heads = base.config.heads;
  cfg.mlp_hidden = base.config.mlp_hidden;
  ModelParams start = base;
  start.frozen_groups = {"projection", "fusion"};
  auto trained = train(data.subset(r.train_rows), data.subset(r.val_rows), cfg, &start);
  r.params = std::move(trained.params);
  r.params.frozen_groups = base.frozen_groups;
  r.history = std::move(trained.history);
  r.test_metrics = evaluate(r.params, data.subset(r.test_rows));
  return r;
}

}  // namespace nanopro
