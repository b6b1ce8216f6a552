#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "adaslot/container.hpp"
#include "adaslot/tensor.hpp"

namespace adaslot {

// One learnable parameter with its Adam moments.
struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> m;  // first moment
  std::vector<double> v;  // second moment
};

// Owns parameters in creation order; addresses are stable.
class ParamStore {
 public:
  Param& create(const std::string& name, Shape shape,
                std::vector<double> init);
  bool has(const std::string& name) const;
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  std::vector<std::unique_ptr<Param>>& all() { return params_; }
  const std::vector<std::unique_ptr<Param>>& all() const { return params_; }
  std::int64_t total_size() const;

  // Serialization: values as "<name>", moments as "adam.m.<name>" and
  // "adam.v.<name>" when requested.
  std::vector<NamedTensor> to_tensors(bool with_moments) const;
  // Strict: every stored param must be present with matching shape; moments
  // loaded when present.
  void load_tensors(const std::vector<NamedTensor>& tensors);

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Memoizes one tracked leaf per parameter for a single forward/backward
// step, so reuse of a parameter accumulates gradient into one buffer.
class StepGraph {
 public:
  explicit StepGraph(ParamStore& store) : store_(&store) {}

  Tensor use(const std::string& name);

  // Touched parameters in first-use order, paired with their leaves.
  const std::vector<std::pair<Param*, Tensor>>& used() const { return used_; }

 private:
  ParamStore* store_;
  std::unordered_map<std::string, std::size_t> pos_;
  std::vector<std::pair<Param*, Tensor>> used_;
};

}  // namespace adaslot
