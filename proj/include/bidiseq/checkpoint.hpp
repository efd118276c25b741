#pragma once

// Checkpoint files.
//
// Layout: the 8 bytes "BIDISEQ1", a 4-byte little-endian header length, a
// UTF-8 JSON header, then raw little-endian float32 tensor data. The header
// holds the format version, the model config, the vocabulary, and a manifest
// giving each tensor's name, shape and byte offset into the data section.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bidiseq/core.hpp"
#include "bidiseq/model.hpp"

namespace bidiseq::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Adam moments, shaped like the model tensors.
struct OptimizerState {
    std::uint64_t step = 0;
    std::vector<Matrix<float>> first_moment;
    std::vector<Matrix<float>> second_moment;
};

struct Checkpoint {
    ModelConfig config;
    Vocabulary vocab;
    std::vector<NamedTensor<float>> tensors;
    std::optional<OptimizerState> optimizer;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    // Free-form run settings (objective, UNK policy, ...) stored as strings.
    std::map<std::string, std::string> metadata;

    Transformer<float> model() const;
};

Checkpoint make_checkpoint(const Transformer<float>& model, const Vocabulary& vocab);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& checkpoint);

// Throws on a bad magic, a version mismatch, a manifest that disagrees with the
// model layout, or truncated data. With `expected_vocab`, also throws when the
// stored vocabulary hash differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocabulary* expected_vocab = nullptr);
Checkpoint parse_checkpoint(const std::string& bytes, const Vocabulary* expected_vocab = nullptr);

}  // namespace bidiseq::model
