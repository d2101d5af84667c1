#pragma once

// Central finite differences of the summed cross-entropy, computed in double
// from a copy of the model's parameters. Perturbing one parameter only moves
// one pre-activation, so each evaluation restarts from cached activations
// at that unit instead of redoing the whole forward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "kbprobe/estimator.hpp"

namespace kbtest {

struct FdResult {
  std::size_t checked = 0;
  std::size_t excluded = 0;  // perturbation crossed a ReLU kink
  double max_rel_err = 0.0;  // worst single parameter
  double max_abs_err = 0.0;
  // ||analytic - numeric|| / max(||analytic||, ||numeric||) over checked parameters.
  double vector_rel_err = 0.0;
};

class FdOracle {
 public:
  FdOracle(const kbprobe::EstimatorModel& model, std::span<const kbprobe::Sample> batch) {
    for (std::size_t l = 0; l < kbprobe::kNumLayers; ++l) {
      const auto& L = model.layers[l];
      in_[l] = L.in;
      out_[l] = L.out;
      w_[l].assign(L.weight.begin(), L.weight.end());
      b_[l].assign(L.bias.begin(), L.bias.end());
    }
    for (const auto& s : batch) {
      Cache c;
      c.label = s.label;
      c.a[0].assign(s.state.begin(), s.state.end());
      for (std::size_t l = 0; l < kbprobe::kNumLayers; ++l) {
        c.z[l] = affine(l, c.a[l]);
        c.a[l + 1] = l + 1 < kbprobe::kNumLayers ? relu(c.z[l]) : c.z[l];
      }
      cache_.push_back(std::move(c));
    }
  }

  // Summed loss of the unperturbed model.
  double loss() const {
    double s = 0.0;
    for (const auto& c : cache_) s += loss_of(c.a[kbprobe::kNumLayers], c.label);
    return s;
  }

  // d loss / d param by central differences. `row`,`col` address the weight;
  // col == npos addresses the bias of `row`. Sets `kink` if any ReLU input
  // changes sign under either perturbation.
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  double derivative(std::size_t layer, std::size_t row, std::size_t col, double step, bool& kink) const {
    kink = false;
    double plus = 0.0;
    double minus = 0.0;
    for (const auto& c : cache_) {
      const double x = col == npos ? 1.0 : c.a[layer][col];
      plus += perturbed_loss(c, layer, row, step * x, kink);
      minus += perturbed_loss(c, layer, row, -step * x, kink);
    }
    return (plus - minus) / (2.0 * step);
  }

 private:
  static constexpr std::size_t N = kbprobe::kNumLayers;

  struct Cache {
    std::array<std::vector<double>, N + 1> a;  // a[0] input, a[N] logits
    std::array<std::vector<double>, N> z;
    std::uint8_t label = 0;
  };

  std::vector<double> affine(std::size_t l, const std::vector<double>& x) const {
    std::vector<double> z(out_[l]);
    for (std::size_t r = 0; r < out_[l]; ++r) {
      double s = b_[l][r];
      for (std::size_t i = 0; i < in_[l]; ++i) s += w_[l][r * in_[l] + i] * x[i];
      z[r] = s;
    }
    return z;
  }

  static std::vector<double> relu(std::vector<double> v) {
    for (auto& x : v) x = std::max(x, 0.0);
    return v;
  }

  static double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

  static double loss_of(const std::vector<double>& logits, std::uint8_t label) {
    const double d = logits[1] - logits[0];
    return label ? softplus(-d) : softplus(d);
  }

  double perturbed_loss(const Cache& c, std::size_t layer, std::size_t row, double dz, bool& kink) const {
    const bool last = layer + 1 == N;
    const double z_old = c.z[layer][row];
    const double z_new = z_old + dz;
    if (last) {
      auto logits = c.a[N];
      logits[row] = z_new;
      return loss_of(logits, c.label);
    }
    if ((z_old > 0) != (z_new > 0)) kink = true;
    const double da = std::max(z_new, 0.0) - std::max(z_old, 0.0);

    // Next layer's pre-activation moves along one weight column.
    std::size_t l = layer + 1;
    std::vector<double> z = c.z[l];
    for (std::size_t r = 0; r < out_[l]; ++r) z[r] += w_[l][r * in_[l] + row] * da;
    for (;;) {
      if (l + 1 == N) return loss_of(z, c.label);
      for (std::size_t r = 0; r < z.size(); ++r) {
        if ((z[r] > 0) != (c.z[l][r] > 0)) kink = true;
      }
      const auto a = relu(z);
      ++l;
      z = affine(l, a);
    }
  }

  std::array<std::size_t, N> in_{};
  std::array<std::size_t, N> out_{};
  std::array<std::vector<double>, N> w_;
  std::array<std::vector<double>, N> b_;
  std::vector<Cache> cache_;
};

// Relative error with a floor on the denominator so that gradients at the
// level of double round-off are compared absolutely.
inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline FdResult check_gradients(const kbprobe::EstimatorModel& model, std::span<const kbprobe::Sample> batch,
                                double step = 1e-3) {
  const auto analytic = kbprobe::loss_and_grads(model, batch);
  const FdOracle oracle(model, batch);
  FdResult res;
  double diff2 = 0.0, ana2 = 0.0, num2 = 0.0;
  for (std::size_t l = 0; l < kbprobe::kNumLayers; ++l) {
    const auto& L = model.layers[l];
    for (std::size_t r = 0; r < L.out; ++r) {
      for (std::size_t c = 0; c <= L.in; ++c) {
        const bool bias = c == L.in;
        bool kink = false;
        const double num = oracle.derivative(l, r, bias ? FdOracle::npos : c, step, kink);
        if (kink) {
          ++res.excluded;
          continue;
        }
        const double ana = bias ? analytic.grads.bias[l][r] : analytic.grads.weight[l][r * L.in + c];
        ++res.checked;
        res.max_rel_err = std::max(res.max_rel_err, rel_err(ana, num));
        res.max_abs_err = std::max(res.max_abs_err, std::abs(ana - num));
        diff2 += (ana - num) * (ana - num);
        ana2 += ana * ana;
        num2 += num * num;
      }
    }
  }
  res.vector_rel_err = std::sqrt(diff2) / std::max({std::sqrt(ana2), std::sqrt(num2), 1e-12});
  return res;
}

}  // namespace kbtest
