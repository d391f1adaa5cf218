#pragma once

// Versioned binary checkpoint container.
//
//   "TWOPASS-CKPT\n"
//   key=value lines, ending with "end\n"
//   per blob: "blob <name> <dtype> <d0>x<d1>... <bytes>\n" then raw little-endian data
//   4-byte little-endian CRC-32 of everything before it
//
// Serialisation is a pure function of the Checkpoint value, so
// load -> save reproduces the file byte for byte.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "twopass/corpus.hpp"
#include "twopass/model.hpp"
#include "twopass/tensor.hpp"

namespace twopass {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Blob {
  std::string name;
  std::string dtype;  // "f32" or "f64"
  Shape shape;
  std::vector<std::byte> data;

  friend bool operator==(const Blob&, const Blob&) = default;
};

struct Checkpoint {
  /// Ordered header entries: model kind and config, support
  /// mode, vocab/partition checksums, progress counters, rng state.
  std::map<std::string, std::string> header;
  std::string partition_text;  // VocabPartition::serialize output
  std::vector<Blob> parameters;
  std::vector<Blob> adam_m;
  std::vector<Blob> adam_v;

  const std::string& get(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool has(const std::string& key) const { return header.count(key) != 0; }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::string serialize_checkpoint(const Checkpoint& c);
/// Throws DataError on bad magic, version, truncation or CRC mismatch.
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
Blob to_blob(const std::string& name, std::span<const T> values, const Shape& shape);
/// Converts between f32 and f64 when the blob's dtype differs from T.
template <typename T>
std::vector<T> from_blob(const Blob& b);

/// Model identity and parameters. Progress and optimizer state are added by
/// the trainer.
template <typename T>
Checkpoint make_checkpoint(const LanguageModel<T>& model, const Vocab& vocab);

/// Rebuilds the model recorded in `c`. The vocab must match the recorded
/// checksum and the stored partition must match its checksum.
template <typename T>
std::unique_ptr<LanguageModel<T>> model_from_checkpoint(const Checkpoint& c, const Vocab& vocab);

/// Copies parameter values by name; shapes must match exactly.
template <typename T>
void restore_parameters(LanguageModel<T>& model, const Checkpoint& c);

/// Human-readable summary for inspect-checkpoint.
std::string describe_checkpoint(const Checkpoint& c);

}  // namespace twopass
