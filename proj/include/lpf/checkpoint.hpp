#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lpf/tensor.hpp"

namespace lpf {

// Weight checkpoint directory:
//   meta.json    variant / seed / training step / config echo
//   index.json   parameter name -> { shape, byte offset, element count }
//   params.bin   concatenated 32-bit little-endian floats
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> params;  // insertion order kept

  void save(const std::string& dir) const;
  static Checkpoint load(const std::string& dir);

  const Tensor* find(const std::string& name) const;
};

}  // namespace lpf
