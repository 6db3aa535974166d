#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "nanopro/boxcox.hpp"
#include "nanopro/embedding.hpp"
#include "nanopro/split.hpp"

namespace nanopro {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

enum class ModalitySpec { Fused, ProteinOnly, TextOnly };

std::string_view modality_spec_name(ModalitySpec m);
std::optional<ModalitySpec> parse_modality_spec(std::string_view text);

struct ModelConfig {
  std::size_t protein_dim = 2560;
  std::size_t text_dim = 4096;
  std::size_t d_shared = 1024;
  std::size_t tokens = 8;
  std::size_t heads = 8;
  std::vector<std::size_t> mlp_hidden{512, 128};
  Task task = Task::Classification;
  ModalitySpec modality = ModalitySpec::Fused;

  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double ln_eps = 1e-5;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 1;
  // "auto" = 2 * n_neg / n_pos on the training view; otherwise a number.
  std::string w_pos_policy = "auto";

  std::size_t token_dim() const { return d_shared / tokens; }
  std::size_t head_dim() const { return token_dim() / heads; }
  std::size_t streams() const { return modality == ModalitySpec::Fused ? 2 : 1; }
  std::size_t head_input() const { return streams() * d_shared; }
  bool uses_protein() const { return modality != ModalitySpec::TextOnly; }
  bool uses_text() const { return modality != ModalitySpec::ProteinOnly; }

  // E_CONFIG unless T*token_dim = d_shared and H*head_dim = token_dim.
  void validate() const;

  // T=2, H=2 and small widths, for finite-difference checks.
  static ModelConfig tiny();
};

// Freeze groups: "projection", "fusion", "head". The "input" group holds the
// fitted embedding means and is never trained.
struct ParamBlock {
  std::string name;
  std::string group;
  std::size_t rows = 0;
  std::size_t cols = 1;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
};

// All parameters live in one flat vector; blocks index into it. Values are
// kept exactly representable as float so checkpoints roundtrip bit-exactly.
struct ModelParams {
  ModelConfig config;
  std::vector<ParamBlock> blocks;
  std::vector<double> values;
  std::set<std::string> frozen_groups;
  std::optional<BoxCoxTransform> target_transform;

  const ParamBlock& block(std::string_view name) const;
  const ParamBlock* find(std::string_view name) const;
  std::span<const double> data(std::string_view name) const;
  std::span<double> data(std::string_view name);
  bool frozen(const ParamBlock& b) const { return b.group == "input" || frozen_groups.count(b.group) > 0; }
  std::size_t count() const { return values.size(); }
};

// Block table for a config, values zeroed.
ModelParams make_layout(const ModelConfig& config);

// He-normal weights (std sqrt(2/fan_in)), zero biases and input means, unit
// layer-norm gains.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

struct EmbeddedView;

// Sets the input means to the column means of the view's embeddings.
void fit_input_means(ModelParams& params, const EmbeddedView& view);

void round_to_float(std::span<double> values);

// ---- building blocks ----

// Affine map of the mean-centered embedding into d_shared, reshaped row-major
// into T tokens.
Mat project(std::span<const double> embedding, const ModelParams& params, Modality which);

struct AttentionBlock {
  Mat W_Q, W_K, W_V, W_O;  // token_dim x token_dim, applied as x * W^T
  RowVec ln_gain, ln_bias;
  std::size_t heads = 1;
};

// Copies the weights of block "fusion.<direction>", direction in
// {"p2t", "t2p", "self"}.
AttentionBlock attention_block(const ModelParams& params, std::string_view direction);

struct AttentionOptions {
  bool residual = true;
  bool layer_norm = true;
  double ln_eps = 1e-5;
};

// One sample: queries and keys_values are T x token_dim. Per-head attention
// matrices are written to `weights` when given.
Mat cross_attention(const Mat& queries, const Mat& keys_values, const AttentionBlock& block,
                    const AttentionOptions& options = {}, std::vector<Mat>* weights = nullptr);

// Inputs for a batch; rows are samples. The matrix of an unused modality may
// be empty.
struct BatchInput {
  const Mat* protein = nullptr;
  const Mat* text = nullptr;
  std::size_t rows() const;
};

struct ForwardTrace;  // intermediates kept for backward

// Raw scalar per sample: a logit for classification, the Box-Cox value for
// regression. E_DIM on width mismatch; E_NONFINITE on non-finite results.
std::vector<double> forward(const ModelParams& params, const BatchInput& input,
                            ForwardTrace* trace = nullptr);

// Probabilities for classification, raw values for regression.
std::vector<double> predict_outputs(const ModelParams& params, const BatchInput& input);

double sigmoid(double z);

// ---- losses ----

// 2 * n_neg / n_pos; E_NO_POSITIVES when n_pos = 0.
double compute_pos_weight(std::size_t n_neg, std::size_t n_pos);
inline constexpr double kProbClamp = 1e-7;
double weighted_bce(std::span<const double> probabilities, std::span<const double> labels,
                    double w_pos);
double mse_loss(std::span<const double> predictions, std::span<const double> targets);

// Mean batch loss; when `grad` is given it receives d(loss)/d(values) in the
// flat layout, with zeros for frozen blocks.
double loss_and_gradient(const ModelParams& params, const BatchInput& input,
                         std::span<const double> labels, double w_pos, std::vector<double>* grad);

// ---- metrics ----

struct ClassificationMetrics {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  std::optional<double> auc;  // nullopt when only one class is present
};

// Mann-Whitney with midranks; nullopt for single-class labels.
std::optional<double> rank_auc(std::span<const double> scores, std::span<const double> labels);
ClassificationMetrics classification_metrics(std::span<const double> scores,
                                             std::span<const double> labels,
                                             double threshold = 0.5);

struct RegressionMetrics {
  double r2 = 0, mse = 0, mae = 0;
  // Raw RPA space, after inverting predictions (clipped) and targets.
  std::optional<double> raw_r2, raw_mse, raw_mae;
};

// E_ZERO_VARIANCE for constant targets.
RegressionMetrics regression_metrics(std::span<const double> predictions,
                                     std::span<const double> targets,
                                     const BoxCoxTransform* transform = nullptr);

// ---- training ----

struct EmbeddedView {
  Task task = Task::Classification;
  Mat protein;  // n x protein_dim (empty when unused)
  Mat text;     // n x text_dim
  std::vector<double> labels;
  std::vector<std::string> sample_ids;

  std::size_t size() const { return labels.size(); }
  BatchInput input() const { return {protein.size() ? &protein : nullptr, text.size() ? &text : nullptr}; }
  EmbeddedView subset(std::span<const std::size_t> rows) const;
};

struct MetricsReport {
  Task task = Task::Classification;
  std::size_t n = 0;
  std::optional<ClassificationMetrics> classification;
  std::optional<RegressionMetrics> regression;
  // F1 for classification, R^2 (Box-Cox space) for regression.
  double primary() const;
};

std::vector<double> predict_view(const ModelParams& params, const EmbeddedView& view);
MetricsReport evaluate(const ModelParams& params, const EmbeddedView& view);

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_metric;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
  double w_pos = 1.0;
};

struct TrainResult {
  ModelParams params;
  TrainHistory history;
};

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t step = 0;
};

void adam_step(ModelParams& params, const std::vector<double>& grad, AdamState& state);

// Adam over seeded batches; best-val parameters are returned. A fresh model
// fits its input means on `train_view`; a `start` model keeps its own and its
// frozen groups are respected. E_DIVERGED on a non-finite loss.
TrainResult train(const EmbeddedView& train_view, const EmbeddedView& val_view,
                  const ModelConfig& config, const ModelParams* start = nullptr);

struct FinetuneResult {
  ModelParams params;
  TrainHistory history;
  std::vector<std::size_t> train_rows, val_rows, test_rows;
  MetricsReport test_metrics;
};

// Seeded 70:15:15 split of `data`; projection and fusion frozen, head trained.
FinetuneResult finetune(const ModelParams& base, const EmbeddedView& data, const ModelConfig& config);

// ---- persistence ----

inline constexpr std::string_view kCheckpointSchema = "nanopro-checkpoint/1";

// Writes <dir>/manifest.json and <dir>/params.bin (float32 LE, manifest order).
void save_checkpoint(const ModelParams& params, const std::filesystem::path& dir);
// E_VERSION on schema mismatch, E_CORRUPT on shape or byte-count mismatch.
ModelParams load_checkpoint(const std::filesystem::path& dir);

}  // namespace nanopro
