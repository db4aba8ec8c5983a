#pragma once

#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "scenforge/rng.hpp"
#include "scenforge/tape.hpp"
#include "scenforge/tensor.hpp"

namespace scenforge::nn {

enum class Activation { kLinear, kTanh, kLeakyRelu, kSigmoid };

constexpr double kLeakySlope = 0.2;

Var activate(Tape& tape, Var x, Activation act, double leaky_slope = kLeakySlope);

// ---------------------------------------------------------------------------
// Layer specifications

struct DenseSpec {
  std::size_t in = 0, out = 0;
  Activation act = Activation::kLinear;
};
struct RecurrentSpec {
  std::size_t in = 0, hidden = 0;
};
struct Conv1dSpec {
  std::size_t in_c = 0, out_c = 0, kernel = 1, stride = 1, pad = 0;
  Activation act = Activation::kLinear;
};
struct EmbeddingSpec {
  std::size_t vocab = 0, dim = 0;
};
struct BatchNormSpec {
  std::size_t features = 0;
  double eps = 1e-5;
  double momentum = 0.9;
};
struct DropoutSpec {
  double rate = 0.0;
};
struct SpectralNormSpec {
  std::variant<DenseSpec, Conv1dSpec> inner;
  std::size_t power_iterations = 1;
};

using LayerSpec =
    std::variant<DenseSpec, RecurrentSpec, Conv1dSpec, EmbeddingSpec, BatchNormSpec, DropoutSpec, SpectralNormSpec>;

/// Throws std::invalid_argument on non-positive extents, dropout rate outside
/// [0,1), or power iterations < 1.
void validate_spec(const LayerSpec& spec);

// ---------------------------------------------------------------------------
// Spectral normalization (power iteration with persistent vectors)

struct SpectralState {
  Tensor u, v;
  bool initialized = false;
  bool warned_zero = false;
};

/// Power-iteration estimate of the largest singular value of a matrix given
/// as (rows x cols) over flat data. Left/right vectors persist in `state`.
double spectral_sigma(const Tensor& w, std::size_t rows, std::size_t cols, std::size_t iterations,
                      SpectralState& state);

/// weight / sigma for a rank-2 weight. A zero matrix is returned unchanged
/// (sigma clamped at 1e-12) with state.warned_zero set.
Tensor spectral_normalize(const Tensor& weight, std::size_t iterations, SpectralState& state,
                          double* sigma_out = nullptr);

// ---------------------------------------------------------------------------
// Dropout

/// Inverted-dropout mask: Bernoulli(1-rate) scaled by 1/(1-rate). All ones
/// when training is false or rate is 0.
Tensor dropout_mask(const Shape& shape, double rate, Rng& rng, bool training = true);

// ---------------------------------------------------------------------------
// Layers

struct ApplyCtx {
  bool training = false;
  Rng* rng = nullptr;  // dropout noise source; required when training with dropout
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Var apply(Tape& tape, Var x, const ApplyCtx& ctx) = 0;
  virtual void collect(std::vector<Parameter*>& out) = 0;
  virtual const std::string& name() const = 0;
};

class DenseLayer : public Layer {
 public:
  DenseLayer(std::string name, DenseSpec spec, Rng& init, bool spectral = false, std::size_t power_iterations = 1);
  Var apply(Tape& tape, Var x, const ApplyCtx& ctx) override;
  void collect(std::vector<Parameter*>& out) override;
  const std::string& name() const override { return name_; }
  Parameter& weight() { return w_; }
  Parameter& bias() { return b_; }
  bool spectral() const { return spectral_; }
  SpectralState& spectral_state() { return sn_state_; }

 private:
  std::string name_;
  DenseSpec spec_;
  Parameter w_, b_;
  bool spectral_;
  std::size_t power_iterations_;
  SpectralState sn_state_;
};

class Conv1dLayer : public Layer {
 public:
  Conv1dLayer(std::string name, Conv1dSpec spec, Rng& init, bool spectral = false, std::size_t power_iterations = 1);
  Var apply(Tape& tape, Var x, const ApplyCtx& ctx) override;
  void collect(std::vector<Parameter*>& out) override;
  const std::string& name() const override { return name_; }
  Parameter& weight() { return w_; }
  const Conv1dSpec& spec() const { return spec_; }
  bool spectral() const { return spectral_; }
  SpectralState& spectral_state() { return sn_state_; }

 private:
  std::string name_;
  Conv1dSpec spec_;
  Parameter w_, b_;
  bool spectral_;
  std::size_t power_iterations_;
  SpectralState sn_state_;
};

class EmbeddingLayer : public Layer {
 public:
  EmbeddingLayer(std::string name, EmbeddingSpec spec, Rng& init);
  /// x carries integral ids in a rank-1 tensor.
  Var apply(Tape& tape, Var x, const ApplyCtx& ctx) override;
  Var lookup(Tape& tape, const std::vector<std::size_t>& ids);
  void collect(std::vector<Parameter*>& out) override;
  const std::string& name() const override { return name_; }
  Parameter& table() { return table_; }

 private:
  std::string name_;
  EmbeddingSpec spec_;
  Parameter table_;
};

/// LSTM cell with [input | forget | candidate | output] gate layout and the
/// forget-gate bias initialized to 1.
class RecurrentLayer : public Layer {
 public:
  RecurrentLayer(std::string name, RecurrentSpec spec, Rng& init);
  /// x is a [N,T,in] sequence; returns the final hidden state [N,hidden].
  Var apply(Tape& tape, Var x, const ApplyCtx& ctx) override;
  /// One gated-recurrence update; returns {h', c'}.
  std::pair<Var, Var> step(Tape& tape, Var x, Var h, Var c);
  void collect(std::vector<Parameter*>& out) override;
  const std::string& name() const override { return name_; }
  const RecurrentSpec& spec() const { return spec_; }
  Parameter& wx() { return wx_; }
  Parameter& wh() { return wh_; }
  Parameter& bias() { return b_; }

 private:
  std::string name_;
  RecurrentSpec spec_;
  Parameter wx_, wh_, b_;
};

class BatchNormLayer : public Layer {
 public:
  BatchNormLayer(std::string name, BatchNormSpec spec);
  Var apply(Tape& tape, Var x, const ApplyCtx& ctx) override;
  void collect(std::vector<Parameter*>& out) override;
  const std::string& name() const override { return name_; }
  Parameter& running_mean() { return running_mean_; }
  Parameter& running_var() { return running_var_; }

 private:
  std::string name_;
  BatchNormSpec spec_;
  Parameter gamma_, beta_;
  Parameter running_mean_, running_var_;  // non-trainable buffers
};

class DropoutLayer : public Layer {
 public:
  DropoutLayer(std::string name, DropoutSpec spec);
  Var apply(Tape& tape, Var x, const ApplyCtx& ctx) override;
  void collect(std::vector<Parameter*>&) override {}
  const std::string& name() const override { return name_; }

 private:
  std::string name_;
  DropoutSpec spec_;
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const std::string& name, Rng& init);

/// A layer program applied in sequence; the graph records enough for
/// backward().
class Sequential {
 public:
  Sequential(const std::vector<LayerSpec>& specs, const std::string& name, Rng& init);
  Var apply(Tape& tape, Var x, const ApplyCtx& ctx = {});
  std::vector<Parameter*> parameters();
  std::size_t trainable_count() const;

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Glorot-uniform fill used by affine and convolution weights.
void init_glorot(Tensor& w, std::size_t fan_in, std::size_t fan_out, Rng& rng);

std::size_t trainable_count(const std::vector<Parameter*>& params);

}  // namespace scenforge::nn
