#pragma once

#include <cstdint>

namespace stochinv {

// Counter-based generator: the i-th draw of stream s under seed k is a pure
// function of (k, s, i), so results never depend on call interleaving
// between streams.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t next();
  // Uniform in the open interval (0, 1).
  double uniform();
  double normal();

  std::uint64_t counter() const { return counter_; }
  CounterRng substream(std::uint64_t stream) const { return CounterRng(seed_, stream); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stochinv
