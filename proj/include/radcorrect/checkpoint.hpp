#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "radcorrect/nn.hpp"
#include "radcorrect/tensor.hpp"

namespace radcorrect {

struct NamedTensorData {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

// Versioned container of named tensors plus the producing world's fingerprint
// and a JSON blob describing the model hyperparameters.
struct Checkpoint {
  std::string kind;  // "detector" | "corrector" | "retrieval"
  std::uint64_t world_fingerprint = 0;
  std::string config_json;
  std::vector<NamedTensorData> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);  // DataError on malformed input

// Collects every named tensor of a ParamSet into checkpoint entries.
std::vector<NamedTensorData> snapshot(const ParamSet& params);

// Copies checkpoint entries back into the matching ParamSet leaves; throws
// DataError on a missing name or shape mismatch, and when counts differ.
void restore_into(const std::vector<NamedTensorData>& tensors, ParamSet& params);

}  // namespace radcorrect
