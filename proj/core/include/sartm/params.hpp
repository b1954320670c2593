#pragma once

#include <string>
#include <vector>

#include "sartm/error.hpp"
#include "sartm/tensor.hpp"

SARTM_NS_BEGIN

struct ParamEntry {
  std::string name;
  Tensor tensor;
};

// Flat, ordered view of a model's named parameters. Trainability is carried
// by each tensor's requires_grad flag; frozen buffers are registered too so
// checkpoints capture the complete state.
class ParamRegistry {
 public:
  void add(std::string name, const Tensor& tensor) {
    for (const auto& e : entries_) {
      if (e.name == name) throw ConfigError("duplicate parameter name: " + name);
    }
    entries_.push_back({std::move(name), tensor});
  }

  const std::vector<ParamEntry>& entries() const { return entries_; }

  std::vector<ParamEntry> trainable() const {
    std::vector<ParamEntry> out;
    for (const auto& e : entries_)
      if (e.tensor.requires_grad()) out.push_back(e);
    return out;
  }

  std::vector<ParamEntry> frozen() const {
    std::vector<ParamEntry> out;
    for (const auto& e : entries_)
      if (!e.tensor.requires_grad()) out.push_back(e);
    return out;
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

 private:
  std::vector<ParamEntry> entries_;
};

SARTM_NS_END
