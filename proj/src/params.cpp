#include "adaslot/params.hpp"

#include "adaslot/errors.hpp"

namespace adaslot {

Param& ParamStore::create(const std::string& name, Shape shape,
                          std::vector<double> init) {
  if (index_.count(name))
    throw ContractError("param '" + name + "' already exists");
  if (numel(shape) != static_cast<std::int64_t>(init.size()))
    throw ShapeError("param '" + name + "': " + std::to_string(init.size()) +
                     " values for shape " + shape_str(shape));
  auto p = std::make_unique<Param>();
  p->name = name;
  p->shape = std::move(shape);
  p->value = std::move(init);
  p->m.assign(p->value.size(), 0.0);
  p->v.assign(p->value.size(), 0.0);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

bool ParamStore::has(const std::string& name) const {
  return index_.count(name) != 0;
}

Param& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown param '" + name + "'");
  return *params_[it->second];
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown param '" + name + "'");
  return *params_[it->second];
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += static_cast<std::int64_t>(p->value.size());
  return n;
}

std::vector<NamedTensor> ParamStore::to_tensors(bool with_moments) const {
  std::vector<NamedTensor> out;
  for (const auto& p : params_) out.push_back({p->name, p->shape, p->value});
  if (with_moments) {
    for (const auto& p : params_)
      out.push_back({"adam.m." + p->name, p->shape, p->m});
    for (const auto& p : params_)
      out.push_back({"adam.v." + p->name, p->shape, p->v});
  }
  return out;
}

void ParamStore::load_tensors(const std::vector<NamedTensor>& tensors) {
  for (auto& p : params_) {
    const NamedTensor* t = find_tensor(tensors, p->name);
    if (!t) throw FormatError("checkpoint missing param '" + p->name + "'");
    if (t->shape != p->shape)
      throw FormatError("checkpoint param '" + p->name + "' has shape " +
                        shape_str(t->shape) + ", expected " +
                        shape_str(p->shape));
    p->value = t->values;
    if (const NamedTensor* m = find_tensor(tensors, "adam.m." + p->name)) {
      if (m->shape != p->shape)
        throw FormatError("checkpoint moment 'adam.m." + p->name +
                          "' shape mismatch");
      p->m = m->values;
    }
    if (const NamedTensor* v = find_tensor(tensors, "adam.v." + p->name)) {
      if (v->shape != p->shape)
        throw FormatError("checkpoint moment 'adam.v." + p->name +
                          "' shape mismatch");
      p->v = v->values;
    }
  }
}

Tensor StepGraph::use(const std::string& name) {
  auto it = pos_.find(name);
  if (it != pos_.end()) return used_[it->second].second;
  Param& p = store_->at(name);
  Tensor leaf = Tensor::leaf(p.shape, p.value);
  pos_[name] = used_.size();
  used_.emplace_back(&p, leaf);
  return leaf;
}

}  // namespace adaslot
