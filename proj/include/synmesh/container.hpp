#pragma once

// Binary container shared by templates, datasets, checkpoints and
// prediction files.
//
//   magic        raw ASCII bytes, e.g. "SYNMESH-DS-v1"
//   u64          record count
//   record*      u64 byte length, then u32 entry count, then entries
//   entry        u32 name length, name bytes, u8 flags, u8 dtype tag,
//                u32 rank, i64 dims[rank], payload
//
// Everything is little-endian. Payloads are dense row-major.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace synmesh::io {

enum class DType : std::uint8_t { F32 = 0, F64 = 1, I64 = 2, U8 = 3, Text = 4 };

enum EntryFlags : std::uint8_t { kNone = 0, kFrozen = 1 };

struct Entry {
  std::string name;
  torch::Tensor value;  // CPU; Text entries hold a kUInt8 tensor of the bytes
  std::uint8_t flags = kNone;
  bool is_text = false;
};

class Record {
public:
  void put(std::string name, const torch::Tensor& value, std::uint8_t flags = kNone);
  void put_text(std::string name, std::string_view text);
  void put_int(std::string name, std::int64_t value);
  void put_double(std::string name, double value);

  bool has(std::string_view name) const;
  const Entry& entry(std::string_view name) const;
  const torch::Tensor& get(std::string_view name) const;
  std::string text(std::string_view name) const;
  std::int64_t get_int(std::string_view name) const;
  double get_double(std::string_view name) const;

  const std::vector<Entry>& entries() const { return entries_; }

private:
  std::vector<Entry> entries_;
};

// Magic strings have the form "<family>-v<version>".
inline constexpr std::string_view kTemplateMagic = "SYNMESH-TPL-v1";
inline constexpr std::string_view kDatasetMagic = "SYNMESH-DS-v1";
inline constexpr std::string_view kCheckpointMagic = "SYNMESH-CKPT-v1";
inline constexpr std::string_view kPredictionMagic = "SYNMESH-PRED-v1";

void write_container(const std::string& path, std::string_view magic,
                     const std::vector<Record>& records);

// Throws MissingInputError when the file does not exist, FormatError on a
// foreign magic or version mismatch, IoError (with offset) on truncation.
std::vector<Record> read_container(const std::string& path, std::string_view magic);

// In-memory variants; the file functions are thin wrappers.
std::string encode_container(std::string_view magic, const std::vector<Record>& records);
std::vector<Record> decode_container(std::string_view bytes, std::string_view magic);

}  // namespace synmesh::io
