// SPDX-License-Identifier: Apache-2.0
//
// Single-file model artifact.
//
//   "MTRA" | u32 version | u32 section count
//   section table: { char tag[4], u64 offset, u64 length, u32 crc32 } * count
//   payloads
//
// All integers and floats are little-endian. Tensor payloads (BASE, BANK,
// GATE) are sequences of named f32 records; CONF and META are JSON text.
// Sections with unknown tags are skipped with a warning.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "meteora/toy_model.hpp"

namespace meteora {

inline constexpr std::uint32_t kArtifactVersion = 1;

struct ArtifactSection {
    std::string tag;  // exactly four characters
    std::vector<std::uint8_t> payload;

    bool operator==(const ArtifactSection&) const = default;
};

struct ArtifactFile {
    std::uint32_t version = kArtifactVersion;
    std::vector<ArtifactSection> sections;

    const ArtifactSection* find(const std::string& tag) const;
    bool has(const std::string& tag) const { return find(tag) != nullptr; }
    /// Replace the section with this tag or append it.
    void put(ArtifactSection section);
};

std::vector<std::uint8_t> encode_artifact(const ArtifactFile& file);
/// Throws CorruptFileError (naming the section on checksum failure).
ArtifactFile decode_artifact(const std::vector<std::uint8_t>& bytes, std::vector<std::string>* warnings = nullptr);

void save_artifact(const std::filesystem::path& path, const ArtifactFile& file);
ArtifactFile load_artifact(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr);

struct NamedTensor {
    std::string name;
    Tensor value;
};

std::vector<std::uint8_t> encode_tensors(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_tensors(const std::vector<std::uint8_t>& payload, const std::string& tag);

/// CONF, BASE and (when banks are attached) BANK and GATE, plus META.
ArtifactFile model_to_artifact(const ToyModel& model, const nlohmann::ordered_json& meta = nlohmann::ordered_json::object());
ToyModel model_from_artifact(const ArtifactFile& file);
nlohmann::ordered_json artifact_meta(const ArtifactFile& file);

} // namespace meteora
