#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "kbprobe/metrics.hpp"
#include "kbprobe/state_store.hpp"

namespace kbprobe {

inline constexpr std::array<std::size_t, 3> kDefaultHidden = {512, 64, 32};
inline constexpr std::size_t kNumLayers = 4;
inline constexpr std::size_t kNumClasses = 2;

// Dense layer, weight is out x in, row-major.
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<float> weight;
  std::vector<float> bias;

  float w(std::size_t row, std::size_t col) const noexcept { return weight[row * in + col]; }
  bool operator==(const DenseLayer&) const = default;
};

// Four dense layers h -> 512 -> 64 -> 32 -> 2 with ReLU between them.
struct EstimatorModel {
  std::array<DenseLayer, kNumLayers> layers;
  std::uint64_t seed = 0;
  std::uint32_t epochs_trained = 0;
  Pooling pooling_policy = Pooling::last;

  std::size_t h() const noexcept { return layers[0].in; }
  std::array<std::size_t, kNumLayers + 1> dims() const noexcept;
  std::size_t parameter_count() const noexcept;
  void validate() const;

  bool operator==(const EstimatorModel&) const = default;
};

struct TrainConfig {
  double learning_rate = 5e-5;
  std::uint32_t epochs = 30;
  std::vector<std::uint64_t> seeds = {0, 42, 100};
  std::size_t batch_size = 64;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::array<std::size_t, 3> hidden = kDefaultHidden;
  // Seeds are independent; >1 trains them on separate threads.
  unsigned threads = 1;

  void validate() const;
};

EstimatorModel init_model(std::size_t h, std::uint64_t seed,
                          std::array<std::size_t, 3> hidden = kDefaultHidden);

struct ForwardResult {
  double p1 = 0.5;
  std::array<double, 2> logits{};
};

ForwardResult forward(const EstimatorModel& model, std::span<const float> state);

// Same shape as the model's parameters, double precision.
struct Gradients {
  std::array<std::vector<double>, kNumLayers> weight;
  std::array<std::vector<double>, kNumLayers> bias;

  static Gradients zeros_like(const EstimatorModel& model);
};

struct Sample {
  std::span<const float> state;
  std::uint8_t label = 0;
};

struct LossAndGrads {
  double loss = 0.0;  // summed over the batch
  Gradients grads;
};

LossAndGrads loss_and_grads(const EstimatorModel& model, std::span<const Sample> batch);

// Summed cross-entropy without gradients.
double batch_loss(const EstimatorModel& model, std::span<const Sample> batch);

struct SeedReport {
  std::uint64_t seed = 0;
  // Full training-set loss (mean per sample): index 0 before training,
  // index e after epoch e.
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  std::optional<MetricsReport> dev;
};

struct TrainReport {
  Pooling pooling = Pooling::last;
  std::vector<SeedReport> seeds;
  std::optional<MetricsReport> dev_mean;  // per-seed dev metrics averaged
};

struct TrainResult {
  std::vector<EstimatorModel> models;
  TrainReport report;
};

// Samples drawn from `dataset` using one pooled vector per record.
std::vector<Sample> make_samples(const Dataset& dataset, Pooling pooling);

TrainResult train(const Dataset& dataset, Pooling pooling, const TrainConfig& cfg,
                  const Dataset* dev = nullptr);

struct Prediction {
  std::uint8_t c = 0;  // ensemble verdict
  std::vector<std::uint8_t> votes;
  std::vector<double> p1;
};

// Per model: argmax of the two class probabilities, ties toward 0.
// Ensemble: strict majority of votes, ties toward 0.
Prediction predict(std::span<const EstimatorModel> models, std::span<const float> state);

// Model file "KBMLP"; see README for the layout.
void save_model(const EstimatorModel& model, std::ostream& out);
EstimatorModel load_model(std::istream& in);
void save_model(const EstimatorModel& model, const std::filesystem::path& path);
EstimatorModel load_model(const std::filesystem::path& path);

}  // namespace kbprobe
