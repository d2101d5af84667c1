#include "kbprobe/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "kbprobe/detail/binary_io.hpp"
#include "kbprobe/error.hpp"
#include "kbprobe/rng.hpp"

namespace kbprobe {

namespace {

constexpr char kModelMagic[5] = {'K', 'B', 'M', 'L', 'P'};
constexpr std::uint16_t kModelVersion = 1;
constexpr std::uint64_t kShuffleSalt = 0xD1B54A32D192ED03ULL;

// log(1 + exp(x)) without overflow.
double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Four partial sums keep the dependency chain short; order is fixed so the
// result is deterministic.
double dot(const float* w, const double* x, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += w[i] * x[i];
    s1 += w[i + 1] * x[i + 1];
    s2 += w[i + 2] * x[i + 2];
    s3 += w[i + 3] * x[i + 3];
  }
  for (; i < n; ++i) s0 += w[i] * x[i];
  return (s0 + s1) + (s2 + s3);
}

// Activations for one sample: act[0] is the input, act[l + 1] the output of
// layer l (post-ReLU for hidden layers, logits for the last).
struct Workspace {
  std::array<std::vector<double>, kNumLayers + 1> act;
  std::array<std::vector<double>, kNumLayers> delta;

  explicit Workspace(const EstimatorModel& m) {
    act[0].resize(m.layers[0].in);
    for (std::size_t l = 0; l < kNumLayers; ++l) {
      act[l + 1].resize(m.layers[l].out);
      delta[l].resize(m.layers[l].out);
    }
  }
};

void check_state(const EstimatorModel& model, std::span<const float> state) {
  if (state.size() != model.h()) {
    throw Error(Errc::dimension_mismatch, "state width " + std::to_string(state.size()) +
                                              " does not match estimator width " +
                                              std::to_string(model.h()));
  }
}

void run_forward(const EstimatorModel& model, std::span<const float> state, Workspace& ws) {
  std::copy(state.begin(), state.end(), ws.act[0].begin());
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    const auto& layer = model.layers[l];
    const double* in = ws.act[l].data();
    double* out = ws.act[l + 1].data();
    const bool hidden = l + 1 < kNumLayers;
    for (std::size_t j = 0; j < layer.out; ++j) {
      const double z = layer.bias[j] + dot(&layer.weight[j * layer.in], in, layer.in);
      out[j] = hidden ? std::max(z, 0.0) : z;
    }
  }
}

// Cross-entropy of one sample given its logits; class 1 probability is
// sigmoid(l1 - l0).
double sample_loss(const std::vector<double>& logits, std::uint8_t label) {
  const double margin = logits[1] - logits[0];
  return label ? softplus(-margin) : softplus(margin);
}

// Accumulates this sample's gradient into `g`. Requires run_forward first.
void run_backward(const EstimatorModel& model, std::uint8_t label, Workspace& ws, Gradients& g) {
  const auto& logits = ws.act[kNumLayers];
  const double p1 = sigmoid(logits[1] - logits[0]);
  const double y = label ? 1.0 : 0.0;
  ws.delta[kNumLayers - 1][0] = y - p1;  // d/dl0 of -log p_y
  ws.delta[kNumLayers - 1][1] = p1 - y;

  for (std::size_t l = kNumLayers; l-- > 0;) {
    const auto& layer = model.layers[l];
    const double* in = ws.act[l].data();
    const double* d = ws.delta[l].data();
    auto& gw = g.weight[l];
    auto& gb = g.bias[l];
    for (std::size_t j = 0; j < layer.out; ++j) {
      if (d[j] == 0.0) continue;
      gb[j] += d[j];
      double* row = &gw[j * layer.in];
      for (std::size_t i = 0; i < layer.in; ++i) row[i] += d[j] * in[i];
    }
    if (l == 0) break;

    // Propagate through W^T and the ReLU of the previous layer.
    auto& prev = ws.delta[l - 1];
    std::fill(prev.begin(), prev.end(), 0.0);
    for (std::size_t j = 0; j < layer.out; ++j) {
      if (d[j] == 0.0) continue;
      const float* row = &layer.weight[j * layer.in];
      for (std::size_t i = 0; i < layer.in; ++i) prev[i] += row[i] * d[j];
    }
    for (std::size_t i = 0; i < prev.size(); ++i) {
      if (in[i] <= 0.0) prev[i] = 0.0;
    }
  }
}

struct EvalStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

EvalStats evaluate(const EstimatorModel& model, std::span<const Sample> samples, Workspace& ws) {
  double loss = 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    run_forward(model, s.state, ws);
    const auto& logits = ws.act[kNumLayers];
    loss += sample_loss(logits, s.label);
    const std::uint8_t c = logits[1] > logits[0] ? 1 : 0;
    hits += c == s.label;
  }
  const double n = static_cast<double>(samples.size());
  return {loss / n, static_cast<double>(hits) / n};
}

class Adam {
 public:
  Adam(const EstimatorModel& model, const TrainConfig& cfg)
      : cfg_(cfg), m_(Gradients::zeros_like(model)), v_(Gradients::zeros_like(model)) {}

  void step(EstimatorModel& model, const Gradients& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
    for (std::size_t l = 0; l < kNumLayers; ++l) {
      update(model.layers[l].weight, g.weight[l], m_.weight[l], v_.weight[l], c1, c2);
      update(model.layers[l].bias, g.bias[l], m_.bias[l], v_.bias[l], c1, c2);
    }
  }

 private:
  void update(std::vector<float>& p, const std::vector<double>& g, std::vector<double>& m,
              std::vector<double>& v, double c1, double c2) const {
    const double b1 = cfg_.adam_beta1;
    const double b2 = cfg_.adam_beta2;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] = static_cast<float>(p[i] - cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.adam_eps));
    }
  }

  const TrainConfig& cfg_;
  Gradients m_;
  Gradients v_;
  std::uint64_t t_ = 0;
};

std::pair<EstimatorModel, SeedReport> train_one(std::span<const Sample> samples, std::size_t h,
                                                std::uint64_t seed, Pooling pooling,
                                                const TrainConfig& cfg, const Dataset* dev) {
  EstimatorModel model = init_model(h, seed, cfg.hidden);
  model.pooling_policy = pooling;
  Workspace ws(model);
  Adam adam(model, cfg);
  Gradients grads = Gradients::zeros_like(model);
  SplitMix64 rng(seed ^ kShuffleSalt);

  SeedReport report;
  report.seed = seed;
  auto stats = evaluate(model, samples, ws);
  report.epoch_loss.push_back(stats.mean_loss);

  std::vector<std::size_t> order(samples.size());
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      for (std::size_t l = 0; l < kNumLayers; ++l) {
        std::fill(grads.weight[l].begin(), grads.weight[l].end(), 0.0);
        std::fill(grads.bias[l].begin(), grads.bias[l].end(), 0.0);
      }
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = samples[order[k]];
        run_forward(model, s.state, ws);
        run_backward(model, s.label, ws, grads);
      }
      adam.step(model, grads);
    }
    model.epochs_trained = epoch + 1;
    stats = evaluate(model, samples, ws);
    report.epoch_loss.push_back(stats.mean_loss);
  }
  report.train_accuracy = stats.accuracy;

  if (dev != nullptr && !dev->records.empty()) {
    std::vector<Outcome> rows;
    rows.reserve(dev->records.size());
    const std::span<const EstimatorModel> one(&model, 1);
    for (const auto& r : dev->records) {
      rows.push_back({r.label, predict(one, r.states.get(pooling)).c});
    }
    report.dev = compute_metrics(rows);
  }
  return {std::move(model), std::move(report)};
}

}  // namespace

std::array<std::size_t, kNumLayers + 1> EstimatorModel::dims() const noexcept {
  return {layers[0].in, layers[0].out, layers[1].out, layers[2].out, layers[3].out};
}

std::size_t EstimatorModel::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void EstimatorModel::validate() const {
  if (h() == 0) throw Error(Errc::dimension_mismatch, "estimator input width is 0");
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    const auto& layer = layers[l];
    if (layer.out == 0 || layer.weight.size() != layer.in * layer.out ||
        layer.bias.size() != layer.out || (l > 0 && layer.in != layers[l - 1].out)) {
      throw Error(Errc::dimension_mismatch, "estimator layer " + std::to_string(l) + " has inconsistent shape");
    }
    const auto finite = [](float x) { return std::isfinite(x); };
    if (!std::all_of(layer.weight.begin(), layer.weight.end(), finite) ||
        !std::all_of(layer.bias.begin(), layer.bias.end(), finite)) {
      throw Error(Errc::non_finite, "estimator layer " + std::to_string(l) + " has non-finite parameters");
    }
  }
  if (layers.back().out != kNumClasses) {
    throw Error(Errc::dimension_mismatch, "estimator must end in 2 logits");
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(Errc::invalid_argument, "learning_rate must be > 0");
  if (seeds.empty()) throw Error(Errc::invalid_argument, "at least one seed is required");
  if (batch_size == 0) throw Error(Errc::invalid_argument, "batch_size must be >= 1");
  if (std::any_of(hidden.begin(), hidden.end(), [](std::size_t d) { return d == 0; })) {
    throw Error(Errc::invalid_argument, "hidden widths must be positive");
  }
}

Gradients Gradients::zeros_like(const EstimatorModel& model) {
  Gradients g;
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    g.weight[l].assign(model.layers[l].weight.size(), 0.0);
    g.bias[l].assign(model.layers[l].bias.size(), 0.0);
  }
  return g;
}

EstimatorModel init_model(std::size_t h, std::uint64_t seed, std::array<std::size_t, 3> hidden) {
  if (h == 0) throw Error(Errc::invalid_argument, "init_model: hidden width h must be > 0");
  const std::array<std::size_t, kNumLayers + 1> dims = {h, hidden[0], hidden[1], hidden[2], kNumClasses};
  EstimatorModel model;
  model.seed = seed;
  SplitMix64 rng(seed);
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    auto& layer = model.layers[l];
    layer.in = dims[l];
    layer.out = dims[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(layer.in));
    layer.weight.resize(layer.in * layer.out);
    for (float& w : layer.weight) w = static_cast<float>(rng.uniform(-bound, bound));
    layer.bias.assign(layer.out, 0.0f);
  }
  return model;
}

ForwardResult forward(const EstimatorModel& model, std::span<const float> state) {
  check_state(model, state);
  Workspace ws(model);
  run_forward(model, state, ws);
  const auto& logits = ws.act[kNumLayers];
  return {sigmoid(logits[1] - logits[0]), {logits[0], logits[1]}};
}

LossAndGrads loss_and_grads(const EstimatorModel& model, std::span<const Sample> batch) {
  if (batch.empty()) throw Error(Errc::invalid_argument, "loss_and_grads: empty batch");
  LossAndGrads out{0.0, Gradients::zeros_like(model)};
  Workspace ws(model);
  for (const auto& s : batch) {
    check_state(model, s.state);
    if (s.label > 1) throw Error(Errc::invalid_argument, "loss_and_grads: non-binary label");
    run_forward(model, s.state, ws);
    out.loss += sample_loss(ws.act[kNumLayers], s.label);
    run_backward(model, s.label, ws, out.grads);
  }
  return out;
}

double batch_loss(const EstimatorModel& model, std::span<const Sample> batch) {
  Workspace ws(model);
  double loss = 0.0;
  for (const auto& s : batch) {
    check_state(model, s.state);
    run_forward(model, s.state, ws);
    loss += sample_loss(ws.act[kNumLayers], s.label);
  }
  return loss;
}

std::vector<Sample> make_samples(const Dataset& dataset, Pooling pooling) {
  std::vector<Sample> samples;
  samples.reserve(dataset.records.size());
  for (const auto& r : dataset.records) {
    const auto& v = r.states.get(pooling);
    if (v.size() != dataset.h || v.empty()) {
      throw Error(Errc::dimension_mismatch, "record '" + r.id + "' is missing its " +
                                                std::string(to_string(pooling)) + " state");
    }
    samples.push_back({v, r.label});
  }
  return samples;
}

TrainResult train(const Dataset& dataset, Pooling pooling, const TrainConfig& cfg, const Dataset* dev) {
  cfg.validate();
  if (dataset.records.empty()) throw Error(Errc::invalid_argument, "train: empty dataset");
  const auto samples = make_samples(dataset, pooling);

  const std::size_t n_seeds = cfg.seeds.size();
  std::vector<std::optional<std::pair<EstimatorModel, SeedReport>>> results(n_seeds);
  auto run = [&](std::size_t i) {
    results[i] = train_one(samples, dataset.h, cfg.seeds[i], pooling, cfg, dev);
  };
  if (cfg.threads > 1 && n_seeds > 1) {
    std::vector<std::jthread> workers;
    for (std::size_t i = 0; i < n_seeds; ++i) workers.emplace_back(run, i);
  } else {
    for (std::size_t i = 0; i < n_seeds; ++i) run(i);
  }

  TrainResult out;
  out.report.pooling = pooling;
  std::vector<MetricsReport> devs;
  for (auto& r : results) {
    out.models.push_back(std::move(r->first));
    if (r->second.dev) devs.push_back(*r->second.dev);
    out.report.seeds.push_back(std::move(r->second));
  }
  if (!devs.empty()) out.report.dev_mean = average_reports(devs);
  return out;
}

Prediction predict(std::span<const EstimatorModel> models, std::span<const float> state) {
  if (models.empty()) throw Error(Errc::invalid_argument, "predict: no models");
  Prediction p;
  std::size_t ones = 0;
  for (const auto& m : models) {
    const auto f = forward(m, state);
    // p1 > p0 strictly; equality (p1 == 0.5) resolves to 0.
    const std::uint8_t c = f.logits[1] > f.logits[0] ? 1 : 0;
    ones += c;
    p.votes.push_back(c);
    p.p1.push_back(f.p1);
  }
  p.c = 2 * ones > models.size() ? 1 : 0;
  return p;
}

void save_model(const EstimatorModel& model, std::ostream& out) {
  model.validate();
  using detail::put_le;
  out.write(kModelMagic, sizeof kModelMagic);
  put_le<std::uint16_t>(out, kModelVersion);
  put_le<std::uint32_t>(out, kNumLayers + 1);
  for (std::size_t d : model.dims()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put_le<std::uint64_t>(out, model.seed);
  put_le<std::uint32_t>(out, model.epochs_trained);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(model.pooling_policy));
  for (const auto& layer : model.layers) {
    detail::put_f32s(out, layer.weight);
    detail::put_f32s(out, layer.bias);
  }
  if (!out) throw Error(Errc::io, "failed writing model");
}

EstimatorModel load_model(std::istream& in) {
  using detail::get_le;
  char magic[sizeof kModelMagic];
  in.read(magic, sizeof magic);
  if (in.gcount() != static_cast<std::streamsize>(sizeof magic)) {
    throw Error(Errc::truncated, "truncated file while reading magic");
  }
  if (!std::equal(std::begin(magic), std::end(magic), std::begin(kModelMagic))) {
    throw Error(Errc::bad_magic, "bad magic: not a KBMLP model file");
  }
  const auto version = get_le<std::uint16_t>(in, "version");
  if (version != kModelVersion) {
    throw Error(Errc::version_mismatch, "model version " + std::to_string(version) + " unsupported");
  }
  const auto n_dims = get_le<std::uint32_t>(in, "dim count");
  if (n_dims != kNumLayers + 1) {
    throw Error(Errc::dimension_mismatch, "model declares " + std::to_string(n_dims) +
                                              " dims, expected " + std::to_string(kNumLayers + 1));
  }
  std::array<std::size_t, kNumLayers + 1> dims{};
  for (auto& d : dims) {
    d = get_le<std::uint32_t>(in, "dims");
    if (d == 0 || d > (1u << 24)) throw Error(Errc::dimension_mismatch, "model has an implausible layer width");
  }
  if (dims.back() != kNumClasses) throw Error(Errc::dimension_mismatch, "model must end in 2 logits");

  EstimatorModel model;
  model.seed = get_le<std::uint64_t>(in, "seed");
  model.epochs_trained = get_le<std::uint32_t>(in, "epochs");
  const auto pooling = get_le<std::uint8_t>(in, "pooling");
  if (pooling > static_cast<std::uint8_t>(Pooling::avg)) {
    throw Error(Errc::invalid_argument, "model has unknown pooling code");
  }
  model.pooling_policy = static_cast<Pooling>(pooling);
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    auto& layer = model.layers[l];
    layer.in = dims[l];
    layer.out = dims[l + 1];
    layer.weight = detail::get_f32_vector(in, layer.in * layer.out, "weights");
    layer.bias = detail::get_f32_vector(in, layer.out, "biases");
  }
  return model;
}

void save_model(const EstimatorModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot open '" + path.string() + "' for writing");
  save_model(model, out);
}

EstimatorModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open model '" + path.string() + "'");
  return load_model(in);
}

}  // namespace kbprobe
