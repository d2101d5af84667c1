#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "kbprobe/error.hpp"
#include "kbprobe/rng.hpp"
#include "kbprobe/state_store.hpp"

namespace kbtest {

namespace fs = std::filesystem;

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "kbprobe") {
    static std::uint64_t counter = 0;
    kbprobe::SplitMix64 rng(static_cast<std::uint64_t>(
        std::chrono::steady_clock::now().time_since_epoch().count()) + counter++);
    path_ = fs::temp_directory_path() / (tag + "-" + std::to_string(rng.next() % 1000000000ULL));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

inline std::vector<float> random_vector(kbprobe::SplitMix64& rng, std::size_t h, double scale = 1.0) {
  std::vector<float> v(h);
  for (auto& x : v) x = static_cast<float>(scale * rng.normal());
  return v;
}

// Random valid dataset. Texts are arbitrary UTF-8-safe ASCII; labels follow
// containment so the records pass make_record's rule.
inline kbprobe::Dataset random_dataset(kbprobe::SplitMix64& rng, std::size_t n, std::size_t h) {
  kbprobe::Dataset ds;
  ds.h = h;
  for (std::size_t i = 0; i < n; ++i) {
    kbprobe::HiddenStateRecord r;
    r.id = "q" + std::to_string(i) + "-" + std::to_string(rng.below(1000));
    r.question = "question " + std::to_string(rng.next());
    r.gold_answers = {"gold" + std::to_string(rng.below(100))};
    r.label = static_cast<std::uint8_t>(rng.below(2));
    r.response = r.label ? "it is " + r.gold_answers[0] : "no idea";
    r.prompt_style = static_cast<kbprobe::PromptStyle>(rng.below(5));
    r.states.pre = random_vector(rng, h);
    r.states.last = random_vector(rng, h);
    r.states.avg = random_vector(rng, h);
    if (rng.below(2)) {
      const auto m = 1 + rng.below(6);
      for (std::size_t t = 0; t < m; ++t) r.token_logprobs.push_back(static_cast<float>(-rng.uniform(0.0, 5.0)));
    }
    r.layer = static_cast<int>(rng.below(40));
    r.k = static_cast<int>(rng.below(9));
    ds.records.push_back(std::move(r));
  }
  return ds;
}

// Bitwise float equality (distinguishes -0 from 0).
inline bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  }
  return true;
}

template <typename F>
kbprobe::Errc error_code_of(F&& f) {
  try {
    f();
  } catch (const kbprobe::Error& e) {
    return e.code();
  }
  throw std::runtime_error("expected a kbprobe::Error");
}

}  // namespace kbtest
