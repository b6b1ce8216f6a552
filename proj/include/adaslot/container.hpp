#pragma once

#include <string>
#include <vector>

#include "adaslot/tensor.hpp"

namespace adaslot {

// Tensor container file: 8-byte magic "ADSLOT01", one UTF-8 header line
// `name dtype=f64 shape=d0,d1,...` per tensor, a blank line, then raw
// little-endian f64 payloads in header order.  Used for checkpoints and
// datasets.
struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

void write_container(const std::string& path,
                     const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_container(const std::string& path);

// Lookup by name; nullptr when absent.
const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors,
                               const std::string& name);

}  // namespace adaslot
