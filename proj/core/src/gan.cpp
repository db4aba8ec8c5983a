#include "scenforge/gan.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "scenforge/checkpoint.hpp"

namespace scenforge::gan {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error(what); }

std::vector<std::size_t> ids_of(const Tensor& ids) {
  std::vector<std::size_t> out;
  out.reserve(ids.numel());
  for (std::size_t i = 0; i < ids.numel(); ++i) out.push_back(static_cast<std::size_t>(ids[i]));
  return out;
}

const char* activation_name(nn::Activation a) {
  switch (a) {
    case nn::Activation::kLinear: return "linear";
    case nn::Activation::kTanh: return "tanh";
    case nn::Activation::kLeakyRelu: return "leaky_relu";
    case nn::Activation::kSigmoid: return "sigmoid";
  }
  return "?";
}

nn::Activation activation_from(const std::string& s) {
  if (s == "linear") return nn::Activation::kLinear;
  if (s == "tanh") return nn::Activation::kTanh;
  if (s == "leaky_relu") return nn::Activation::kLeakyRelu;
  if (s == "sigmoid") return nn::Activation::kSigmoid;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

std::size_t conv_len(std::size_t t, std::size_t kernel, std::size_t stride) {
  if (t < kernel) fail("critic spec: sequence length " + std::to_string(t) + " shorter than kernel");
  return (t - kernel) / stride + 1;
}

// [N,W,V] + [N,V] -> [N,W+1,V]
Tensor append_step(const Tensor& history, const Tensor& next) {
  const std::size_t n = history.dim(0), w = history.dim(1), v = history.dim(2);
  Tensor out({n, w + 1, v});
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(history.data() + b * w * v, w * v, out.data() + b * (w + 1) * v);
    std::copy_n(next.data() + b * v, v, out.data() + (b * (w + 1) + w) * v);
  }
  return out;
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.batch_size < 1) fail("train config: batch_size must be >= 1");
  if (cfg.lambda <= 0.0) fail("train config: lambda must be positive");
  if (cfg.n_critic < 1) fail("train config: n_critic must be >= 1");
  if (cfg.lr_critic <= 0.0 || cfg.lr_generator <= 0.0) fail("train config: learning rates must be positive");
  if (cfg.ttur && !(cfg.lr_critic > cfg.lr_generator)) fail("train config: TTUR requires lr_critic > lr_generator");
  if (!cfg.ttur && cfg.lr_critic != cfg.lr_generator)
    fail("train config: without TTUR the learning rates must be equal");
}

// ---------------------------------------------------------------------------
// Generator

Generator::Generator(GeneratorSpec spec, nn::Rng rng)
    : spec_(spec),
      embed_("generator/embed", nn::EmbeddingSpec{spec.sensor_vocab, spec.embedding_dim}, rng),
      lstm_("generator/lstm", nn::RecurrentSpec{spec.variables, spec.lstm_hidden}, rng),
      znet_("generator/znet", nn::DenseSpec{spec.noise_dim, 4 * spec.noise_dim, nn::Activation::kLeakyRelu}, rng),
      head_("generator/head",
            nn::DenseSpec{spec.lstm_hidden + 4 * spec.noise_dim + spec.embedding_dim, spec.head_size,
                          nn::Activation::kLeakyRelu},
            rng),
      dropout_("generator/dropout", nn::DropoutSpec{spec.dropout}),
      out_("generator/out", nn::DenseSpec{spec.head_size, spec.variables, spec.output_activation}, rng) {
  if (spec.batch_norm) bn_.emplace("generator/bn", nn::BatchNormSpec{spec.head_size});
}

Var Generator::forward(nn::Tape& tape, const Tensor& ids, Var history, Var z, bool training, nn::Rng* dropout_rng) {
  const Tensor& th = tape.value(history);
  if (th.rank() != 3 || th.dim(1) != spec_.window || th.dim(2) != spec_.variables)
    fail("generator: history shape " + nn::shape_str(th.shape()) + " incompatible with expected [*x" +
         std::to_string(spec_.window) + "x" + std::to_string(spec_.variables) + "]");
  const Tensor& tz = tape.value(z);
  if (tz.rank() != 2 || tz.cols() != spec_.noise_dim)
    fail("generator: noise shape " + nn::shape_str(tz.shape()) + " incompatible with expected [*x" +
         std::to_string(spec_.noise_dim) + "]");
  if (ids.numel() != th.dim(0)) fail("generator: id count does not match batch size");

  nn::ApplyCtx ctx{training, dropout_rng};
  Var emb = embed_.lookup(tape, ids_of(ids));
  Var summary = lstm_.apply(tape, history, ctx);
  Var zf = znet_.apply(tape, z, ctx);
  std::vector<Var> parts{summary, zf, emb};
  Var joint = tape.concat_axis1(parts);
  Var h = head_.apply(tape, joint, ctx);
  if (bn_) h = bn_->apply(tape, h, ctx);
  h = dropout_.apply(tape, h, ctx);
  return out_.apply(tape, h, ctx);
}

Tensor Generator::predict(const Tensor& ids, const Tensor& history, const Tensor& z) {
  nn::Tape tape;
  Var out = forward(tape, ids, tape.constant(history), tape.constant(z), false, nullptr);
  return tape.value(out);
}

std::vector<nn::Parameter*> Generator::parameters() {
  std::vector<nn::Parameter*> out;
  embed_.collect(out);
  lstm_.collect(out);
  znet_.collect(out);
  head_.collect(out);
  if (bn_) bn_->collect(out);
  out_.collect(out);
  return out;
}

std::size_t Generator::trainable_parameter_count() { return nn::trainable_count(parameters()); }

// ---------------------------------------------------------------------------
// Critic

Critic::Critic(CriticSpec spec, nn::Rng rng)
    : spec_(spec),
      embed_("critic/embed", nn::EmbeddingSpec{spec.sensor_vocab, spec.embedding_dim}, rng),
      conv1_("critic/conv1",
             nn::Conv1dSpec{spec.variables + spec.embedding_dim, spec.conv1_channels, spec.kernel, spec.stride, 0,
                            nn::Activation::kLeakyRelu},
             rng, spec.spectral_norm, spec.power_iterations),
      conv2_("critic/conv2",
             nn::Conv1dSpec{spec.conv1_channels, spec.conv2_channels, spec.kernel, spec.stride, 0,
                            nn::Activation::kLeakyRelu},
             rng, spec.spectral_norm, spec.power_iterations),
      dense_("critic/dense",
             nn::DenseSpec{spec.conv2_channels * conv_len(conv_len(spec.window + 1, spec.kernel, spec.stride),
                                                          spec.kernel, spec.stride),
                           spec.dense_size, nn::Activation::kLinear},
             rng, spec.spectral_norm, spec.power_iterations),
      out_("critic/out", nn::DenseSpec{spec.dense_size, 1, nn::Activation::kLinear}, rng, spec.spectral_norm,
           spec.power_iterations) {
  if (spec.skip_connection) {
    skip_.emplace("critic/skip",
                  nn::DenseSpec{spec.variables + spec.embedding_dim, spec.dense_size, nn::Activation::kLinear}, rng,
                  spec.spectral_norm, spec.power_iterations);
  }
}

Var Critic::score(nn::Tape& tape, const Tensor& ids, Var sequence) {
  const Tensor& ts = tape.value(sequence);
  const std::size_t t_expected = spec_.window + 1;
  if (ts.rank() != 3 || ts.dim(1) != t_expected || ts.dim(2) != spec_.variables)
    fail("critic: sequence shape " + nn::shape_str(ts.shape()) + " incompatible with expected [*x" +
         std::to_string(t_expected) + "x" + std::to_string(spec_.variables) + "]");
  if (ids.numel() != ts.dim(0)) fail("critic: id count does not match batch size");
  const std::size_t t_len = ts.dim(1);

  Var channels = tape.swap_axes12(sequence);  // [N,V,T]
  Var emb = embed_.lookup(tape, ids_of(ids));
  Var emb_t = tape.broadcast_time(emb, t_len);  // [N,E,T]
  std::vector<Var> parts{channels, emb_t};
  Var joined = tape.concat_axis1(parts);  // [N,V+E,T]

  nn::ApplyCtx ctx{};
  Var h = conv1_.apply(tape, joined, ctx);
  h = conv2_.apply(tape, h, ctx);
  const nn::Shape& hs = tape.value(h).shape();
  Var flat = tape.reshape(h, {hs[0], hs[1] * hs[2]});
  Var pen = dense_.apply(tape, flat, ctx);
  if (skip_) {
    Var pooled = tape.scale(tape.sum_time(joined), 1.0 / static_cast<double>(t_len));
    pen = tape.add(pen, skip_->apply(tape, pooled, ctx));
  }
  pen = tape.leaky_relu(pen, nn::kLeakySlope);
  return out_.apply(tape, pen, ctx);
}

Tensor Critic::score_values(const Tensor& ids, const Tensor& sequence) {
  nn::Tape tape;
  Var s = score(tape, ids, tape.constant(sequence));
  return tape.value(s);
}

std::vector<nn::Parameter*> Critic::parameters() {
  std::vector<nn::Parameter*> out;
  embed_.collect(out);
  conv1_.collect(out);
  conv2_.collect(out);
  dense_.collect(out);
  if (skip_) skip_->collect(out);
  out_.collect(out);
  return out;
}

std::size_t Critic::trainable_parameter_count() { return nn::trainable_count(parameters()); }

double Critic::max_normalized_sigma() {
  auto sigma_of = [](const Tensor& w, std::size_t rows, std::size_t cols) {
    nn::SpectralState norm_state;
    Tensor flat = w.reshaped({rows, cols});
    Tensor normalized = nn::spectral_normalize(flat, 50, norm_state);
    nn::SpectralState check_state;
    return nn::spectral_sigma(normalized, rows, cols, 50, check_state);
  };
  double worst = 0.0;
  worst = std::max(worst, sigma_of(conv1_.weight().value, spec_.conv1_channels,
                                   (spec_.variables + spec_.embedding_dim) * spec_.kernel));
  worst = std::max(worst, sigma_of(conv2_.weight().value, spec_.conv2_channels, spec_.conv1_channels * spec_.kernel));
  worst = std::max(worst, sigma_of(dense_.weight().value, dense_.weight().value.rows(), dense_.weight().value.cols()));
  worst = std::max(worst, sigma_of(out_.weight().value, out_.weight().value.rows(), out_.weight().value.cols()));
  if (skip_)
    worst = std::max(worst, sigma_of(skip_->weight().value, skip_->weight().value.rows(),
                                     skip_->weight().value.cols()));
  return worst;
}

// ---------------------------------------------------------------------------
// WGAN-GP losses

Tensor interpolate_with(const Tensor& real, const Tensor& fake, std::span<const double> eps) {
  if (!real.same_shape(fake))
    fail("interpolate: shape mismatch " + nn::shape_str(real.shape()) + " vs " + nn::shape_str(fake.shape()));
  const std::size_t n = real.dim(0), block = real.numel() / n;
  if (eps.size() != n) fail("interpolate: need one epsilon per batch item");
  Tensor out(real.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const double* r = real.data() + b * block;
    const double* f = fake.data() + b * block;
    double* o = out.data() + b * block;
    for (std::size_t i = 0; i < block; ++i) o[i] = eps[b] * r[i] + (1.0 - eps[b]) * f[i];
  }
  return out;
}

Tensor interpolate(const Tensor& real, const Tensor& fake, nn::Rng& rng) {
  if (!real.same_shape(fake))
    fail("interpolate: shape mismatch " + nn::shape_str(real.shape()) + " vs " + nn::shape_str(fake.shape()));
  std::vector<double> eps(real.dim(0));
  for (double& e : eps) e = rng.uniform();
  return interpolate_with(real, fake, eps);
}

CriticLossVars wgan_critic_loss(nn::Tape& tape, const ScoreFn& score, const Tensor& real, const Tensor& fake,
                                double lambda, nn::Rng& rng) {
  if (!real.same_shape(fake))
    fail("critic_loss: shape mismatch " + nn::shape_str(real.shape()) + " vs " + nn::shape_str(fake.shape()));
  const std::size_t n = real.dim(0), block = real.numel() / n;

  // Separate forward passes for the real and fake batches.
  Var s_real = score(tape, tape.constant(real));
  Var s_fake = score(tape, tape.constant(fake));
  Var gap = tape.sub(tape.mean(s_fake), tape.mean(s_real));

  Var x_hat = tape.input(interpolate(real, fake, rng));
  Var s_hat = score(tape, x_hat);
  // Summing the per-item scores yields each item's own input gradient.
  Var g = tape.gradient_of(tape.sum(s_hat), x_hat);
  // The 1e-30 floor keeps the degenerate zero-gradient case differentiable
  // while staying far below the closed-form tolerances.
  Var norms = tape.sqrt(tape.add_scalar(tape.sum_axis1(tape.reshape(tape.square(g), {n, block})), 1e-30));
  Var penalty = tape.mean(tape.square(tape.add_scalar(norms, -1.0)));
  Var loss = tape.add(gap, tape.scale(penalty, lambda));
  return {loss, gap, penalty};
}

Var wgan_generator_loss(nn::Tape& tape, Var fake_scores) { return tape.neg(tape.mean(fake_scores)); }

// ---------------------------------------------------------------------------
// Model bundle

GanModel build_model(const GeneratorSpec& gspec, const CriticSpec& dspec, const TrainConfig& cfg,
                     const DataBinding& binding) {
  validate(cfg);
  GanModel model;
  model.gspec = gspec;
  model.dspec = dspec;
  model.train_cfg = cfg;
  model.binding = binding;
  model.generator = std::make_unique<Generator>(gspec, nn::Rng::derive(cfg.seed, 101));
  model.critic = std::make_unique<Critic>(dspec, nn::Rng::derive(cfg.seed, 202));
  model.opt_generator = std::make_unique<nn::Optimizer>(cfg.optimizer, cfg.lr_generator);
  model.opt_critic = std::make_unique<nn::Optimizer>(cfg.optimizer, cfg.lr_critic);
  return model;
}

TrainDivergence::TrainDivergence(std::size_t it, double c, double p, double g)
    : std::runtime_error("training diverged at iteration " + std::to_string(it) + " (critic_loss=" +
                         std::to_string(c) + " penalty=" + std::to_string(p) + " generator_loss=" +
                         std::to_string(g) + ")"),
      iteration(it),
      critic_loss(c),
      penalty(p),
      generator_loss(g) {}

void train(GanModel& model, const data::WindowSet& windows, const TrainConfig& cfg, std::ostream* log) {
  validate(cfg);
  if (windows.window != model.gspec.window)
    fail("train: window length " + std::to_string(windows.window) + " does not match the model's " +
         std::to_string(model.gspec.window));
  std::vector<std::size_t> train_idx = data::windows_with_tag(windows, data::Split::kTrain);
  if (train_idx.empty()) fail("train: no training windows");

  const std::size_t batch = cfg.batch_size;
  nn::Rng rng(nn::Rng::derive(cfg.seed, 0xA11CE0 + model.iteration));

  auto draw = [&]() {
    std::vector<std::size_t> pick(batch);
    for (std::size_t i = 0; i < batch; ++i) pick[i] = train_idx[rng.uniform_index(train_idx.size())];
    return data::assemble_batch(windows, pick);
  };

  auto generator_params = model.generator->parameters();
  auto critic_params = model.critic->parameters();

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    double last_critic = 0.0, last_penalty = 0.0;

    for (std::size_t k = 0; k < cfg.n_critic; ++k) {
      data::Batch b = draw();
      Tensor z = rng.normal_tensor({batch, model.gspec.noise_dim});
      Tensor fake_next;
      {
        // Fake samples are detached: the generator runs on its own tape.
        nn::Tape gt;
        Var out = model.generator->forward(gt, b.ids, gt.constant(b.history), gt.constant(z), true, &rng);
        fake_next = gt.value(out);
      }
      Tensor fake_seq = append_step(b.history, fake_next);

      for (nn::Parameter* p : critic_params) p->zero_grad();
      nn::Tape tape;
      ScoreFn score = [&](nn::Tape& t, Var x) { return model.critic->score(t, b.ids, x); };
      CriticLossVars lv = wgan_critic_loss(tape, score, b.sequence, fake_seq, cfg.lambda, rng);
      last_critic = tape.scalar_value(lv.loss);
      last_penalty = tape.scalar_value(lv.penalty);
      if (!std::isfinite(last_critic) || !std::isfinite(last_penalty))
        throw TrainDivergence(model.iteration, last_critic, last_penalty, 0.0);
      tape.backward(lv.loss);
      model.opt_critic->step(critic_params);
    }

    data::Batch b = draw();
    Tensor z = rng.normal_tensor({batch, model.gspec.noise_dim});
    for (nn::Parameter* p : generator_params) p->zero_grad();
    for (nn::Parameter* p : critic_params) p->zero_grad();
    nn::Tape tape;
    Var history = tape.constant(b.history);
    Var next = model.generator->forward(tape, b.ids, history, tape.constant(z), true, &rng);
    std::vector<Var> seq_parts{history, tape.reshape(next, {batch, 1, model.gspec.variables})};
    Var fake_seq = tape.concat_axis1(seq_parts);
    Var scores = model.critic->score(tape, b.ids, fake_seq);
    Var gloss = wgan_generator_loss(tape, scores);
    double gval = tape.scalar_value(gloss);
    if (!std::isfinite(gval)) throw TrainDivergence(model.iteration, last_critic, last_penalty, gval);
    tape.backward(gloss);
    model.opt_generator->step(generator_params);

    model.history.push_back(LossRecord{model.iteration, last_critic, last_penalty, gval});
    ++model.iteration;

    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && model.iteration % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%08zu.ckpt", model.iteration);
      save_model(model, cfg.checkpoint_dir + "/" + name);
    }
    if (log && cfg.log_every > 0 && (model.iteration % cfg.log_every == 0 || it + 1 == cfg.iterations)) {
      char line[160];
      std::snprintf(line, sizeof(line), "[train] it=%zu critic_loss=%.6f penalty=%.6f gen_loss=%.6f\n",
                    model.iteration, last_critic, last_penalty, gval);
      *log << line << std::flush;
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpointing

namespace {

constexpr const char* kModelHeader = "SCENFORGE-GAN v1";

void put(std::ostream& os, const std::string& key, const std::string& value) { os << key << '=' << value << '\n'; }
void put(std::ostream& os, const std::string& key, std::uint64_t v) { put(os, key, std::to_string(v)); }
void put(std::ostream& os, const std::string& key, bool v) { put(os, key, std::string(v ? "true" : "false")); }
void putd(std::ostream& os, const std::string& key, double v) { put(os, key, data::format_double(v)); }

class MetaMap {
 public:
  explicit MetaMap(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}
  const std::string& str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) fail("checkpoint: missing metadata key '" + key + "'");
    return it->second;
  }
  std::size_t num(const std::string& key) const { return static_cast<std::size_t>(std::stoull(str(key))); }
  std::uint64_t u64(const std::string& key) const { return std::stoull(str(key)); }
  double real(const std::string& key) const { return std::stod(str(key)); }
  bool flag(const std::string& key) const { return str(key) == "true"; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace

void save_model(const GanModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("save_model: cannot open '" + path + "'");
  os << kModelHeader << '\n';
  os << "[meta]\n";
  put(os, "format", std::string("1"));
  put(os, "iteration", model.iteration);
  const GeneratorSpec& g = model.gspec;
  put(os, "gspec.noise_dim", g.noise_dim);
  put(os, "gspec.embedding_dim", g.embedding_dim);
  put(os, "gspec.lstm_hidden", g.lstm_hidden);
  put(os, "gspec.head_size", g.head_size);
  put(os, "gspec.output_activation", std::string(activation_name(g.output_activation)));
  put(os, "gspec.batch_norm", g.batch_norm);
  putd(os, "gspec.dropout", g.dropout);
  put(os, "gspec.variables", g.variables);
  put(os, "gspec.window", g.window);
  put(os, "gspec.sensor_vocab", g.sensor_vocab);
  const CriticSpec& d = model.dspec;
  put(os, "dspec.embedding_dim", d.embedding_dim);
  put(os, "dspec.conv1_channels", d.conv1_channels);
  put(os, "dspec.conv2_channels", d.conv2_channels);
  put(os, "dspec.kernel", d.kernel);
  put(os, "dspec.stride", d.stride);
  put(os, "dspec.dense_size", d.dense_size);
  put(os, "dspec.skip_connection", d.skip_connection);
  put(os, "dspec.spectral_norm", d.spectral_norm);
  put(os, "dspec.power_iterations", d.power_iterations);
  put(os, "dspec.variables", d.variables);
  put(os, "dspec.window", d.window);
  put(os, "dspec.sensor_vocab", d.sensor_vocab);
  const TrainConfig& t = model.train_cfg;
  put(os, "train.batch_size", t.batch_size);
  putd(os, "train.lambda", t.lambda);
  put(os, "train.n_critic", t.n_critic);
  putd(os, "train.lr_critic", t.lr_critic);
  putd(os, "train.lr_generator", t.lr_generator);
  put(os, "train.ttur", t.ttur);
  put(os, "train.optimizer", std::string(nn::optim_kind_name(t.optimizer)));
  put(os, "train.iterations", t.iterations);
  put(os, "train.seed", t.seed);
  const DataBinding& bind = model.binding;
  putd(os, "binding.temp_min", bind.scaler.temp_min);
  putd(os, "binding.temp_max", bind.scaler.temp_max);
  putd(os, "binding.hum_min", bind.scaler.hum_min);
  putd(os, "binding.hum_max", bind.scaler.hum_max);
  put(os, "binding.window", bind.window);
  putd(os, "binding.split_train", bind.split_train);
  putd(os, "binding.split_val", bind.split_val);
  putd(os, "binding.split_test", bind.split_test);
  put(os, "binding.split_seed", bind.split_seed);
  put(os, "binding.split_mode", std::string(bind.split_mode == data::SplitMode::kPerWindow ? "window" : "block"));
  put(os, "opt_g.t", model.opt_generator->step_count());
  put(os, "opt_d.t", model.opt_critic->step_count());
  for (const LossRecord& r : model.history) {
    os << "hist=" << r.iteration << ',' << data::format_double(r.critic_loss) << ','
       << data::format_double(r.penalty) << ',' << data::format_double(r.generator_loss) << '\n';
  }

  os << "[params]\n";
  std::vector<nn::CheckpointRecord> records;
  auto add_params = [&records](const std::vector<nn::Parameter*>& params) {
    for (const nn::Parameter* p : params) records.push_back({p->name, p->value});
  };
  add_params(model.generator->parameters());
  add_params(model.critic->parameters());

  auto add_moments = [&records](const std::string& prefix, nn::Optimizer& opt,
                                const std::vector<nn::Parameter*>& params) {
    auto& slots = opt.slots();
    for (std::size_t i = 0; i < slots.size() && i < params.size(); ++i) {
      if (!slots[i].initialized) continue;
      records.push_back({prefix + ".m." + params[i]->name, slots[i].m});
      records.push_back({prefix + ".s." + params[i]->name, slots[i].s});
    }
  };
  add_moments("optim_g", *model.opt_generator, model.generator->parameters());
  add_moments("optim_d", *model.opt_critic, model.critic->parameters());

  nn::write_records(os, records);
}

GanModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("load_model: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != kModelHeader)
    fail("load_model: version mismatch: expected '" + std::string(kModelHeader) + "', found '" + line + "'");
  if (!std::getline(is, line) || line != "[meta]") fail("load_model: missing [meta] section");

  std::map<std::string, std::string> kv;
  std::vector<LossRecord> history;
  while (std::getline(is, line)) {
    if (line == "[params]") break;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) fail("load_model: malformed metadata line '" + line + "'");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "hist") {
      LossRecord r;
      if (std::sscanf(value.c_str(), "%zu,%lf,%lf,%lf", &r.iteration, &r.critic_loss, &r.penalty,
                      &r.generator_loss) != 4)
        fail("load_model: malformed history line '" + value + "'");
      history.push_back(r);
    } else {
      kv[key] = value;
    }
  }
  if (line != "[params]") fail("load_model: truncated file, missing [params] section");
  MetaMap meta(std::move(kv));

  GeneratorSpec g;
  g.noise_dim = meta.num("gspec.noise_dim");
  g.embedding_dim = meta.num("gspec.embedding_dim");
  g.lstm_hidden = meta.num("gspec.lstm_hidden");
  g.head_size = meta.num("gspec.head_size");
  g.output_activation = activation_from(meta.str("gspec.output_activation"));
  g.batch_norm = meta.flag("gspec.batch_norm");
  g.dropout = meta.real("gspec.dropout");
  g.variables = meta.num("gspec.variables");
  g.window = meta.num("gspec.window");
  g.sensor_vocab = meta.num("gspec.sensor_vocab");

  CriticSpec d;
  d.embedding_dim = meta.num("dspec.embedding_dim");
  d.conv1_channels = meta.num("dspec.conv1_channels");
  d.conv2_channels = meta.num("dspec.conv2_channels");
  d.kernel = meta.num("dspec.kernel");
  d.stride = meta.num("dspec.stride");
  d.dense_size = meta.num("dspec.dense_size");
  d.skip_connection = meta.flag("dspec.skip_connection");
  d.spectral_norm = meta.flag("dspec.spectral_norm");
  d.power_iterations = meta.num("dspec.power_iterations");
  d.variables = meta.num("dspec.variables");
  d.window = meta.num("dspec.window");
  d.sensor_vocab = meta.num("dspec.sensor_vocab");

  TrainConfig t;
  t.batch_size = meta.num("train.batch_size");
  t.lambda = meta.real("train.lambda");
  t.n_critic = meta.num("train.n_critic");
  t.lr_critic = meta.real("train.lr_critic");
  t.lr_generator = meta.real("train.lr_generator");
  t.ttur = meta.flag("train.ttur");
  t.optimizer = nn::optim_kind_from(meta.str("train.optimizer"));
  t.iterations = meta.num("train.iterations");
  t.seed = meta.u64("train.seed");

  DataBinding bind;
  bind.scaler = data::ScalerParams{meta.real("binding.temp_min"), meta.real("binding.temp_max"),
                                   meta.real("binding.hum_min"), meta.real("binding.hum_max")};
  bind.window = meta.num("binding.window");
  bind.split_train = meta.real("binding.split_train");
  bind.split_val = meta.real("binding.split_val");
  bind.split_test = meta.real("binding.split_test");
  bind.split_seed = meta.u64("binding.split_seed");
  bind.split_mode = meta.str("binding.split_mode") == "block" ? data::SplitMode::kBlock : data::SplitMode::kPerWindow;

  GanModel model = build_model(g, d, t, bind);
  model.iteration = meta.num("iteration");
  model.history = std::move(history);

  std::vector<nn::CheckpointRecord> records = nn::read_records(is);
  std::map<std::string, nn::CheckpointRecord*> by_name;
  for (auto& r : records) {
    if (!by_name.emplace(r.name, &r).second) fail("load_model: duplicate record '" + r.name + "'");
  }
  std::size_t used = 0;
  auto restore_params = [&](const std::vector<nn::Parameter*>& params) {
    for (nn::Parameter* p : params) {
      auto it = by_name.find(p->name);
      if (it == by_name.end()) fail("load_model: parameter '" + p->name + "' missing from checkpoint");
      if (it->second->tensor.shape() != p->value.shape())
        fail("load_model: parameter '" + p->name + "' has shape " + nn::shape_str(it->second->tensor.shape()) +
             ", expected " + nn::shape_str(p->value.shape()));
      p->value = it->second->tensor;
      ++used;
    }
  };
  restore_params(model.generator->parameters());
  restore_params(model.critic->parameters());

  auto restore_moments = [&](const std::string& prefix, nn::Optimizer& opt,
                             const std::vector<nn::Parameter*>& params) {
    auto& slots = opt.slots();
    slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto mit = by_name.find(prefix + ".m." + params[i]->name);
      auto sit = by_name.find(prefix + ".s." + params[i]->name);
      if (mit == by_name.end() && sit == by_name.end()) continue;
      if (mit == by_name.end() || sit == by_name.end())
        fail("load_model: incomplete optimizer state for '" + params[i]->name + "'");
      slots[i].m = mit->second->tensor;
      slots[i].s = sit->second->tensor;
      slots[i].initialized = true;
      used += 2;
    }
  };
  restore_moments("optim_g", *model.opt_generator, model.generator->parameters());
  restore_moments("optim_d", *model.opt_critic, model.critic->parameters());
  model.opt_generator->set_step_count(meta.num("opt_g.t"));
  model.opt_critic->set_step_count(meta.num("opt_d.t"));

  if (used != records.size()) fail("load_model: checkpoint contains unrecognized records");
  return model;
}

void write_loss_history(const GanModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("write_loss_history: cannot open '" + path + "'");
  os << "iteration,critic_loss,gradient_penalty,generator_loss\n";
  for (const LossRecord& r : model.history) {
    os << r.iteration << ',' << data::format_double(r.critic_loss) << ',' << data::format_double(r.penalty) << ','
       << data::format_double(r.generator_loss) << '\n';
  }
}

}  // namespace scenforge::gan
