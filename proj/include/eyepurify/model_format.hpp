#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace eyepurify {

// Named f32 tensor as stored in the model container.
struct NamedTensor {
    std::string name;
    std::vector<long> shape;
    std::vector<float> data;
};

enum class ModelPreset : uint32_t {
    TransformShapePreserving = 1,
    TransformTableFaithful = 2,
    LossNet = 100,
};

// One model file: little-endian binary, header = magic "EPNN", format
// version u32, preset tag u32, tensor count u32; per tensor: name length +
// name bytes, dtype tag (1 = f32), rank + u64 extents, raw f32 data;
// trailing CRC-32 over every preceding byte including the magic.
struct ModelFile {
    uint32_t version = 1;
    ModelPreset preset = ModelPreset::LossNet;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
};

// Serializes and writes atomically.
void write_model(const ModelFile& model, const std::string& path);

// Validates magic, version, CRC, and structural sanity; bad files raise
// IoError with the failing detail, never a partial model.
ModelFile read_model(const std::string& path);

}  // namespace eyepurify
