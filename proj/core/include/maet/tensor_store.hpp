#pragma once

// Single-file checkpoint store.
//
// Layout (little-endian):
//   [0, 8)        u64 N, length of the header text
//   [8, 8 + N)    UTF-8 JSON object: name -> {"dtype", "shape", "data_offsets"},
//                 plus an optional "__metadata__" string -> string map
//   [8 + N, EOF)  raw tensor bytes, addressed by data_offsets relative to 8 + N
//
// Canonical files store tensors contiguously in ascending name order, carry a
// compact header with sorted keys, and pad the header with spaces to an 8-byte
// boundary.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "maet/dtype.hpp"

namespace maet {

using Shape = std::vector<std::uint64_t>;
using Metadata = std::map<std::string, std::string>;

/// Product of the dimensions; 1 for a scalar. Throws on u64 overflow.
std::uint64_t element_count(const Shape& shape);

std::string shape_to_string(const Shape& shape);

struct TensorMeta {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::uint64_t begin = 0;  // data_offsets, relative to the end of the header
  std::uint64_t end = 0;

  std::uint64_t numel() const { return element_count(shape); }
};

struct TensorSpec {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
};

using TensorValues = std::variant<std::vector<float>, std::vector<std::uint64_t>>;

/// A fully materialized tensor, used for small stores and tests.
struct Tensor {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  TensorValues values;
};

/// Immutable, lazily read view of a checkpoint. Copies share the backing
/// bytes; concurrent reads from any number of threads are safe.
class TensorStore {
 public:
  static TensorStore open(const std::filesystem::path& path);
  static TensorStore from_bytes(std::string bytes, std::string label = "<memory>");

  /// Entries sorted by name.
  const std::vector<TensorMeta>& entries() const { return entries_; }
  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  bool contains(std::string_view name) const;
  const TensorMeta& meta(std::string_view name) const;
  const Metadata& metadata() const { return metadata_; }
  std::optional<std::string> metadata_value(const std::string& key) const;
  const std::string& label() const { return label_; }
  std::uint64_t file_size() const;

  /// Decodes a floating tensor to binary32. Throws if the tensor holds a
  /// NaN or infinity, naming the tensor and the first offending flat index.
  std::vector<float> read_f32(std::string_view name) const;
  /// As read_f32 but passes non-finite values through.
  std::vector<float> read_f32_unchecked(std::string_view name) const;
  std::vector<std::uint64_t> read_u64(std::string_view name) const;
  /// Undecoded little-endian payload of one tensor.
  std::vector<std::byte> read_raw(std::string_view name) const;

  /// Hex SHA-256 of the complete file contents.
  std::string digest() const;

  class Backing;

 private:
  TensorStore() = default;
  static TensorStore parse(std::shared_ptr<const Backing> backing, std::string label);

  std::shared_ptr<const Backing> backing_;
  std::vector<TensorMeta> entries_;
  Metadata metadata_;
  std::uint64_t data_start_ = 0;
  std::string label_;
};

/// Streams a canonical store to `out`. The header is emitted by the
/// constructor; tensors must then be written in ascending name order.
class StoreWriter {
 public:
  StoreWriter(std::ostream& out, std::vector<TensorSpec> specs, const Metadata& metadata);

  /// Specs in write order (ascending name).
  const std::vector<TensorSpec>& specs() const { return specs_; }
  /// Name of the tensor expected next, or empty once all were written.
  std::string_view next_name() const;

  /// Narrows `values` to the declared dtype (round to nearest even) and
  /// appends them. Throws on non-finite or unrepresentable values.
  void write_f32(std::string_view name, std::span<const float> values);
  void write_u64(std::string_view name, std::span<const std::uint64_t> values);
  void finish();

 private:
  const TensorSpec& expect(std::string_view name, std::uint64_t count);

  std::ostream& out_;
  std::vector<TensorSpec> specs_;
  std::size_t next_ = 0;
};

/// Canonical header text (including alignment padding) for the given tensors.
std::string encode_header(std::vector<TensorSpec> specs, const Metadata& metadata);

std::string encode_store(std::vector<Tensor> tensors, const Metadata& metadata = {});
void write_store(std::vector<Tensor> tensors, const Metadata& metadata,
                 const std::filesystem::path& path);

/// Where an operation puts the store it produces.
class Destination {
 public:
  static Destination memory(std::string label = "<memory>");
  static Destination file(std::filesystem::path path);

  bool is_file() const { return path_.has_value(); }
  const std::filesystem::path& path() const { return *path_; }
  const std::string& label() const { return label_; }

 private:
  std::optional<std::filesystem::path> path_;
  std::string label_;
};

/// Builds a store by running `produce` against a writer bound to `dest`.
/// File destinations are written to a sibling ".partial" file that is renamed
/// into place on success and deleted on failure.
TensorStore emit_store(const Destination& dest, std::vector<TensorSpec> specs,
                       const Metadata& metadata,
                       const std::function<void(StoreWriter&)>& produce);

/// Reads every tensor of `store` fully into memory.
std::vector<Tensor> load_all(const TensorStore& store);

}  // namespace maet
