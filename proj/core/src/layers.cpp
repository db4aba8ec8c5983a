#include "scenforge/layers.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace scenforge::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

[[noreturn]] void shape_error(const std::string& layer, const Shape& got, const std::string& expected) {
  throw std::runtime_error(layer + ": input shape " + shape_str(got) + " incompatible with expected " + expected);
}

void check_positive(std::size_t v, const char* what) {
  if (v == 0) throw std::invalid_argument(std::string("layer spec: ") + what + " must be positive");
}

}  // namespace

Var activate(Tape& tape, Var x, Activation act, double leaky_slope) {
  switch (act) {
    case Activation::kLinear: return x;
    case Activation::kTanh: return tape.tanh(x);
    case Activation::kLeakyRelu: return tape.leaky_relu(x, leaky_slope);
    case Activation::kSigmoid: return tape.sigmoid(x);
  }
  throw std::logic_error("activate: unknown activation");
}

void validate_spec(const LayerSpec& spec) {
  std::visit(
      [](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, DenseSpec>) {
          check_positive(s.in, "dense in");
          check_positive(s.out, "dense out");
        } else if constexpr (std::is_same_v<T, RecurrentSpec>) {
          check_positive(s.in, "recurrent in");
          check_positive(s.hidden, "recurrent hidden");
        } else if constexpr (std::is_same_v<T, Conv1dSpec>) {
          check_positive(s.in_c, "conv in channels");
          check_positive(s.out_c, "conv out channels");
          check_positive(s.kernel, "conv kernel");
          check_positive(s.stride, "conv stride");
        } else if constexpr (std::is_same_v<T, EmbeddingSpec>) {
          check_positive(s.vocab, "embedding vocab");
          check_positive(s.dim, "embedding dim");
        } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
          check_positive(s.features, "batch norm features");
        } else if constexpr (std::is_same_v<T, DropoutSpec>) {
          if (s.rate < 0.0 || s.rate >= 1.0)
            throw std::invalid_argument("layer spec: dropout rate must lie in [0,1)");
        } else if constexpr (std::is_same_v<T, SpectralNormSpec>) {
          if (s.power_iterations < 1)
            throw std::invalid_argument("layer spec: power iterations must be >= 1");
          std::visit([](const auto& inner) { validate_spec(LayerSpec{inner}); }, s.inner);
        }
      },
      spec);
}

void init_glorot(Tensor& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-bound, bound);
}

std::size_t trainable_count(const std::vector<Parameter*>& params) {
  std::size_t n = 0;
  for (const Parameter* p : params)
    if (p->trainable) n += p->value.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Spectral normalization

double spectral_sigma(const Tensor& w, std::size_t rows, std::size_t cols, std::size_t iterations,
                      SpectralState& state) {
  if (!state.initialized) {
    state.u = Tensor::full({rows}, 1.0 / std::sqrt(static_cast<double>(rows)));
    state.v = Tensor::zeros({cols});
    state.initialized = true;
  }
  ConstMap mw(w.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  Eigen::Map<Eigen::VectorXd> u(state.u.data(), static_cast<Eigen::Index>(rows));
  Eigen::Map<Eigen::VectorXd> v(state.v.data(), static_cast<Eigen::Index>(cols));
  for (std::size_t it = 0; it < iterations; ++it) {
    Eigen::VectorXd vt = mw.transpose() * u;
    double nv = vt.norm();
    if (nv < 1e-24) {
      state.warned_zero = true;
      return 0.0;
    }
    v = vt / nv;
    Eigen::VectorXd ut = mw * v;
    double nu = ut.norm();
    if (nu < 1e-24) {
      state.warned_zero = true;
      return 0.0;
    }
    u = ut / nu;
  }
  return u.dot(mw * v);
}

Tensor spectral_normalize(const Tensor& weight, std::size_t iterations, SpectralState& state, double* sigma_out) {
  if (weight.rank() != 2) throw std::invalid_argument("spectral_normalize: rank-2 weight required");
  double sigma = spectral_sigma(weight, weight.rows(), weight.cols(), iterations, state);
  if (sigma < 1e-12) {
    state.warned_zero = true;
    if (sigma_out) *sigma_out = 1e-12;
    return weight;
  }
  if (sigma_out) *sigma_out = sigma;
  Tensor out(weight.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = weight[i] / sigma;
  return out;
}

// ---------------------------------------------------------------------------
// Dropout

Tensor dropout_mask(const Shape& shape, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout_mask: rate must lie in [0,1)");
  if (!training || rate == 0.0) return Tensor::ones(shape);
  double keep = 1.0 - rate;
  Tensor mask(shape);
  for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return mask;
}

// ---------------------------------------------------------------------------
// Dense

DenseLayer::DenseLayer(std::string name, DenseSpec spec, Rng& init, bool spectral, std::size_t power_iterations)
    : name_(std::move(name)),
      spec_(spec),
      w_(name_ + ".w", Tensor({spec.in, spec.out})),
      b_(name_ + ".b", Tensor({spec.out})),
      spectral_(spectral),
      power_iterations_(power_iterations) {
  validate_spec(LayerSpec{spec});
  init_glorot(w_.value, spec.in, spec.out, init);
}

Var DenseLayer::apply(Tape& tape, Var x, const ApplyCtx&) {
  const Tensor& tx = tape.value(x);
  if (tx.rank() != 2 || tx.cols() != spec_.in)
    shape_error(name_, tx.shape(), "[*x" + std::to_string(spec_.in) + "]");
  const std::size_t n = tx.rows();
  Var wv = tape.param(w_);
  if (spectral_) {
    double sigma = spectral_sigma(w_.value, spec_.in, spec_.out, power_iterations_, sn_state_);
    if (sigma >= 1e-12) wv = tape.scale(wv, 1.0 / sigma);
  }
  Var y = tape.add(tape.matmul(x, wv), tape.broadcast_row(tape.param(b_), n));
  return activate(tape, y, spec_.act);
}

void DenseLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&w_);
  out.push_back(&b_);
}

// ---------------------------------------------------------------------------
// Conv1d

Conv1dLayer::Conv1dLayer(std::string name, Conv1dSpec spec, Rng& init, bool spectral, std::size_t power_iterations)
    : name_(std::move(name)),
      spec_(spec),
      w_(name_ + ".w", Tensor({spec.out_c, spec.in_c, spec.kernel})),
      b_(name_ + ".b", Tensor({spec.out_c})),
      spectral_(spectral),
      power_iterations_(power_iterations) {
  validate_spec(LayerSpec{spec});
  init_glorot(w_.value, spec.in_c * spec.kernel, spec.out_c * spec.kernel, init);
}

Var Conv1dLayer::apply(Tape& tape, Var x, const ApplyCtx&) {
  const Tensor& tx = tape.value(x);
  if (tx.rank() != 3 || tx.dim(1) != spec_.in_c)
    shape_error(name_, tx.shape(), "[*x" + std::to_string(spec_.in_c) + "xT]");
  Var wv = tape.param(w_);
  if (spectral_) {
    // Convolution kernels are viewed as (out_c) x (in_c*kernel) for the norm.
    double sigma = spectral_sigma(w_.value, spec_.out_c, spec_.in_c * spec_.kernel, power_iterations_, sn_state_);
    if (sigma >= 1e-12) wv = tape.scale(wv, 1.0 / sigma);
  }
  ConvDesc desc{spec_.in_c, spec_.out_c, spec_.kernel, spec_.stride, spec_.pad};
  Var y = tape.add_chan_bias(tape.conv1d(x, wv, desc), tape.param(b_));
  return activate(tape, y, spec_.act);
}

void Conv1dLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&w_);
  out.push_back(&b_);
}

// ---------------------------------------------------------------------------
// Embedding

EmbeddingLayer::EmbeddingLayer(std::string name, EmbeddingSpec spec, Rng& init)
    : name_(std::move(name)), spec_(spec), table_(name_ + ".table", init.normal_tensor({spec.vocab, spec.dim})) {
  validate_spec(LayerSpec{spec});
}

Var EmbeddingLayer::apply(Tape& tape, Var x, const ApplyCtx&) {
  const Tensor& tx = tape.value(x);
  if (tx.rank() != 1) shape_error(name_, tx.shape(), "[N] of ids");
  auto ids = std::make_shared<std::vector<std::size_t>>();
  ids->reserve(tx.numel());
  for (std::size_t i = 0; i < tx.numel(); ++i) ids->push_back(static_cast<std::size_t>(tx[i]));
  return tape.gather_rows(tape.param(table_), GatherDesc{std::move(ids), spec_.vocab});
}

Var EmbeddingLayer::lookup(Tape& tape, const std::vector<std::size_t>& ids) {
  auto copy = std::make_shared<std::vector<std::size_t>>(ids);
  return tape.gather_rows(tape.param(table_), GatherDesc{std::move(copy), spec_.vocab});
}

void EmbeddingLayer::collect(std::vector<Parameter*>& out) { out.push_back(&table_); }

// ---------------------------------------------------------------------------
// Recurrent (LSTM)

RecurrentLayer::RecurrentLayer(std::string name, RecurrentSpec spec, Rng& init)
    : name_(std::move(name)),
      spec_(spec),
      wx_(name_ + ".wx", Tensor({spec.in, 4 * spec.hidden})),
      wh_(name_ + ".wh", Tensor({spec.hidden, 4 * spec.hidden})),
      b_(name_ + ".b", Tensor({4 * spec.hidden})) {
  validate_spec(LayerSpec{spec});
  init_glorot(wx_.value, spec.in, spec.hidden, init);
  init_glorot(wh_.value, spec.hidden, spec.hidden, init);
  for (std::size_t j = spec.hidden; j < 2 * spec.hidden; ++j) b_.value[j] = 1.0;  // forget gate
}

std::pair<Var, Var> RecurrentLayer::step(Tape& tape, Var x, Var h, Var c) {
  const Tensor& tx = tape.value(x);
  if (tx.rank() != 2 || tx.cols() != spec_.in)
    shape_error(name_, tx.shape(), "[*x" + std::to_string(spec_.in) + "]");
  Var hc = tape.lstm_cell(x, h, c, tape.param(wx_), tape.param(wh_), tape.param(b_), spec_.hidden);
  Var h_new = tape.slice_axis1(hc, 0, spec_.hidden);
  Var c_new = tape.slice_axis1(hc, spec_.hidden, spec_.hidden);
  return {h_new, c_new};
}

Var RecurrentLayer::apply(Tape& tape, Var x, const ApplyCtx&) {
  const Tensor& tx = tape.value(x);
  if (tx.rank() != 3 || tx.dim(2) != spec_.in)
    shape_error(name_, tx.shape(), "[*xTx" + std::to_string(spec_.in) + "]");
  const std::size_t n = tx.dim(0), t_len = tx.dim(1);
  Var h = tape.constant(Tensor::zeros({n, spec_.hidden}));
  Var c = tape.constant(Tensor::zeros({n, spec_.hidden}));
  for (std::size_t t = 0; t < t_len; ++t) {
    auto [h2, c2] = step(tape, tape.slice_time(x, t), h, c);
    h = h2;
    c = c2;
  }
  return h;
}

void RecurrentLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&wx_);
  out.push_back(&wh_);
  out.push_back(&b_);
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNormLayer::BatchNormLayer(std::string name, BatchNormSpec spec)
    : name_(std::move(name)),
      spec_(spec),
      gamma_(name_ + ".gamma", Tensor::ones({spec.features})),
      beta_(name_ + ".beta", Tensor::zeros({spec.features})),
      running_mean_(name_ + ".running_mean", Tensor::zeros({spec.features}), false),
      running_var_(name_ + ".running_var", Tensor::ones({spec.features}), false) {
  validate_spec(LayerSpec{spec});
}

Var BatchNormLayer::apply(Tape& tape, Var x, const ApplyCtx& ctx) {
  const Tensor& tx = tape.value(x);
  if (tx.rank() != 2 || tx.cols() != spec_.features)
    shape_error(name_, tx.shape(), "[*x" + std::to_string(spec_.features) + "]");
  const std::size_t n = tx.rows();
  if (ctx.training) {
    Tensor batch_mean, batch_var;
    Var y = tape.batch_norm_train(x, tape.param(gamma_), tape.param(beta_), spec_.eps, &batch_mean, &batch_var);
    for (std::size_t j = 0; j < spec_.features; ++j) {
      running_mean_.value[j] = spec_.momentum * running_mean_.value[j] + (1.0 - spec_.momentum) * batch_mean[j];
      running_var_.value[j] = spec_.momentum * running_var_.value[j] + (1.0 - spec_.momentum) * batch_var[j];
    }
    return y;
  }
  Tensor invstd({spec_.features});
  for (std::size_t j = 0; j < spec_.features; ++j) invstd[j] = 1.0 / std::sqrt(running_var_.value[j] + spec_.eps);
  Var centered = tape.sub(x, tape.broadcast_row(tape.constant(running_mean_.value), n));
  Var scaled = tape.mul(centered, tape.broadcast_row(tape.constant(std::move(invstd)), n));
  return tape.add(tape.mul(scaled, tape.broadcast_row(tape.param(gamma_), n)),
                  tape.broadcast_row(tape.param(beta_), n));
}

void BatchNormLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

// ---------------------------------------------------------------------------
// Dropout layer

DropoutLayer::DropoutLayer(std::string name, DropoutSpec spec) : name_(std::move(name)), spec_(spec) {
  validate_spec(LayerSpec{spec});
}

Var DropoutLayer::apply(Tape& tape, Var x, const ApplyCtx& ctx) {
  if (!ctx.training || spec_.rate == 0.0) return x;
  if (!ctx.rng) throw std::logic_error(name_ + ": dropout in training mode needs an rng");
  return tape.mul(x, tape.constant(dropout_mask(tape.value(x).shape(), spec_.rate, *ctx.rng, true)));
}

// ---------------------------------------------------------------------------
// Factory and Sequential

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const std::string& name, Rng& init) {
  validate_spec(spec);
  return std::visit(
      [&](const auto& s) -> std::unique_ptr<Layer> {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, DenseSpec>) {
          return std::make_unique<DenseLayer>(name, s, init);
        } else if constexpr (std::is_same_v<T, RecurrentSpec>) {
          return std::make_unique<RecurrentLayer>(name, s, init);
        } else if constexpr (std::is_same_v<T, Conv1dSpec>) {
          return std::make_unique<Conv1dLayer>(name, s, init);
        } else if constexpr (std::is_same_v<T, EmbeddingSpec>) {
          return std::make_unique<EmbeddingLayer>(name, s, init);
        } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
          return std::make_unique<BatchNormLayer>(name, s);
        } else if constexpr (std::is_same_v<T, DropoutSpec>) {
          return std::make_unique<DropoutLayer>(name, s);
        } else {
          const SpectralNormSpec& sn = s;
          return std::visit(
              [&](const auto& inner) -> std::unique_ptr<Layer> {
                using I = std::decay_t<decltype(inner)>;
                if constexpr (std::is_same_v<I, DenseSpec>) {
                  return std::make_unique<DenseLayer>(name, inner, init, true, sn.power_iterations);
                } else {
                  return std::make_unique<Conv1dLayer>(name, inner, init, true, sn.power_iterations);
                }
              },
              sn.inner);
        }
      },
      spec);
}

Sequential::Sequential(const std::vector<LayerSpec>& specs, const std::string& name, Rng& init) {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    layers_.push_back(make_layer(specs[i], name + "/layer" + std::to_string(i), init));
  }
}

Var Sequential::apply(Tape& tape, Var x, const ApplyCtx& ctx) {
  for (auto& layer : layers_) x = layer->apply(tape, x, ctx);
  return x;
}

std::vector<Parameter*> Sequential::parameters() {
  std::vector<Parameter*> out;
  for (auto& layer : layers_) layer->collect(out);
  return out;
}

std::size_t Sequential::trainable_count() const {
  std::vector<Parameter*> out;
  for (auto& layer : const_cast<Sequential*>(this)->layers_) layer->collect(out);
  return nn::trainable_count(out);
}

}  // namespace scenforge::nn
