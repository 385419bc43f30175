#pragma once

#include <string>
#include <vector>

namespace lpf {

// Fixed-length fingerprint representation; the matching currency.
struct Embedding {
  std::vector<float> vector;
  std::string sample_id;
  bool normalized = false;
};

}  // namespace lpf
