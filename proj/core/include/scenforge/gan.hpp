#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "scenforge/dataset.hpp"
#include "scenforge/layers.hpp"
#include "scenforge/optim.hpp"
#include "scenforge/rng.hpp"
#include "scenforge/tape.hpp"

namespace scenforge::gan {

using nn::Tensor;
using nn::Var;

// ---------------------------------------------------------------------------
// Architecture specs

struct GeneratorSpec {
  std::size_t noise_dim = 8;
  std::size_t embedding_dim = 8;
  std::size_t lstm_hidden = 64;
  std::size_t head_size = 64;
  nn::Activation output_activation = nn::Activation::kLinear;
  bool batch_norm = true;
  double dropout = 0.25;
  std::size_t variables = 2;
  std::size_t window = 24;
  std::size_t sensor_vocab = 35;
};

struct CriticSpec {
  std::size_t embedding_dim = 8;
  std::size_t conv1_channels = 64;
  std::size_t conv2_channels = 128;
  std::size_t kernel = 5;
  std::size_t stride = 2;
  std::size_t dense_size = 128;
  bool skip_connection = false;
  bool spectral_norm = true;
  std::size_t power_iterations = 1;
  std::size_t variables = 2;
  std::size_t window = 24;  // the critic scores window+1 steps
  std::size_t sensor_vocab = 35;
};

struct TrainConfig {
  std::size_t batch_size = 64;
  double lambda = 10.0;  // gradient-penalty coefficient
  std::size_t n_critic = 5;
  double lr_critic = 4e-4;
  double lr_generator = 1e-4;
  bool ttur = true;
  nn::OptimKind optimizer = nn::OptimKind::kAdaBelief;
  std::size_t iterations = 2000;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // generator iterations between checkpoints; 0 disables
  std::string checkpoint_dir;
  std::size_t log_every = 100;  // progress cadence; 0 silences
};

/// Enforces the update-rule contract: with TTUR the critic learning rate must
/// exceed the generator's; without it they must be equal.
void validate(const TrainConfig& cfg);

/// Scaler and split provenance carried inside checkpoints so generation and
/// evaluation rebind to the training-time data preparation.
struct DataBinding {
  data::ScalerParams scaler;
  std::size_t window = 24;
  double split_train = 0.75, split_val = 0.10, split_test = 0.15;
  std::uint64_t split_seed = 0;
  data::SplitMode split_mode = data::SplitMode::kPerWindow;
};

// ---------------------------------------------------------------------------
// Networks

/// Conditional generator: (sensor id, history window, Gaussian noise) -> next
/// step. Embedding handles the id, an LSTM summarizes the history, the noise
/// enters through a dense pathway; the three join in a dense head.
class Generator {
 public:
  Generator(GeneratorSpec spec, std::uint64_t seed) : Generator(spec, nn::Rng(seed)) {}

  Var forward(nn::Tape& tape, const Tensor& ids, Var history, Var z, bool training = false,
              nn::Rng* dropout_rng = nullptr);
  /// Evaluation-mode forward over plain tensors; returns [N, V].
  Tensor predict(const Tensor& ids, const Tensor& history, const Tensor& z);

  std::vector<nn::Parameter*> parameters();
  std::size_t trainable_parameter_count();
  const GeneratorSpec& spec() const { return spec_; }

 private:
  Generator(GeneratorSpec spec, nn::Rng rng);

  GeneratorSpec spec_;
  nn::EmbeddingLayer embed_;
  nn::RecurrentLayer lstm_;
  nn::DenseLayer znet_;
  nn::DenseLayer head_;
  std::optional<nn::BatchNormLayer> bn_;
  nn::DropoutLayer dropout_;
  nn::DenseLayer out_;
};

/// Conditional Wasserstein critic: (sensor id, sequence of window+1 steps) ->
/// unbounded scalar score. Conv1d stack over the channel-joined sequence with
/// optional spectral normalization and skip connection.
class Critic {
 public:
  Critic(CriticSpec spec, std::uint64_t seed) : Critic(spec, nn::Rng(seed)) {}

  Var score(nn::Tape& tape, const Tensor& ids, Var sequence);
  Tensor score_values(const Tensor& ids, const Tensor& sequence);

  std::vector<nn::Parameter*> parameters();
  std::size_t trainable_parameter_count();
  const CriticSpec& spec() const { return spec_; }

  /// Largest spectral-norm estimate across the normalized weight matrices
  /// (50 power iterations each); meaningful only with spectral_norm enabled.
  double max_normalized_sigma();

 private:
  Critic(CriticSpec spec, nn::Rng rng);

  CriticSpec spec_;
  nn::EmbeddingLayer embed_;
  nn::Conv1dLayer conv1_, conv2_;
  nn::DenseLayer dense_, out_;
  std::optional<nn::DenseLayer> skip_;
};

// ---------------------------------------------------------------------------
// WGAN-GP pieces

/// Per-item convex combination eps*real + (1-eps)*fake, one eps ~ U[0,1) per
/// batch item. Shapes must match.
Tensor interpolate(const Tensor& real, const Tensor& fake, nn::Rng& rng);

/// Deterministic core of interpolate(): eps[i] supplied per batch item.
Tensor interpolate_with(const Tensor& real, const Tensor& fake, std::span<const double> eps);

/// Critic scoring hook: maps a [N,T,V] tape node to [N,1] scores.
using ScoreFn = std::function<Var(nn::Tape&, Var)>;

struct CriticLossVars {
  Var loss;     // mean(D(fake)) - mean(D(real)) + lambda * penalty
  Var gap;      // mean(D(fake)) - mean(D(real))
  Var penalty;  // mean((||grad_xhat D(xhat)||_2 - 1)^2)
};

/// Builds the minimized critic loss on the tape. The penalty's input
/// gradient is itself a tape node, so backward() reaches the critic
/// parameters through it (double backprop).
CriticLossVars wgan_critic_loss(nn::Tape& tape, const ScoreFn& score, const Tensor& real, const Tensor& fake,
                                double lambda, nn::Rng& rng);

/// -mean(scores): the generator ascends critic scores.
Var wgan_generator_loss(nn::Tape& tape, Var fake_scores);

// ---------------------------------------------------------------------------
// Model bundle, training, checkpointing

struct LossRecord {
  std::size_t iteration = 0;
  double critic_loss = 0, penalty = 0, generator_loss = 0;
};

struct GanModel {
  GeneratorSpec gspec;
  CriticSpec dspec;
  TrainConfig train_cfg;
  DataBinding binding;
  std::size_t iteration = 0;
  std::unique_ptr<Generator> generator;
  std::unique_ptr<Critic> critic;
  std::unique_ptr<nn::Optimizer> opt_generator;
  std::unique_ptr<nn::Optimizer> opt_critic;
  std::vector<LossRecord> history;
};

GanModel build_model(const GeneratorSpec& gspec, const CriticSpec& dspec, const TrainConfig& cfg,
                     const DataBinding& binding);

/// Raised when any loss stops being finite; carries the iteration snapshot.
class TrainDivergence : public std::runtime_error {
 public:
  TrainDivergence(std::size_t iteration, double critic_loss, double penalty, double generator_loss);
  std::size_t iteration;
  double critic_loss, penalty, generator_loss;
};

/// Per generator iteration: n_critic critic updates on fresh batches (fake
/// data detached), then one generator update. Deterministic under
/// (model, windows, cfg.seed).
void train(GanModel& model, const data::WindowSet& windows, const TrainConfig& cfg, std::ostream* log = nullptr);

void save_model(const GanModel& model, const std::string& path);
GanModel load_model(const std::string& path);

void write_loss_history(const GanModel& model, const std::string& path);

}  // namespace scenforge::gan
