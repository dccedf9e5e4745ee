#include "maet/tensor_store.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <system_error>

#include "maet/digest.hpp"
#include "maet/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are copied as host-order little-endian words");

namespace maet {

using json = nlohmann::json;

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;
constexpr std::string_view kMetadataKey = "__metadata__";

}  // namespace

std::uint64_t element_count(const Shape& shape) {
  std::uint64_t count = 1;
  for (std::uint64_t dim : shape) {
    if (dim != 0 && count > std::numeric_limits<std::uint64_t>::max() / dim) {
      throw Error("shape " + shape_to_string(shape) + " overflows the element count");
    }
    count *= dim;
  }
  return count;
}

std::string shape_to_string(const Shape& shape) {
  std::string text = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) text += ",";
    text += std::to_string(shape[i]);
  }
  return text + "]";
}

// ---------------------------------------------------------------------------
// Byte sources

class TensorStore::Backing {
 public:
  virtual ~Backing() = default;
  virtual std::uint64_t size() const = 0;
  virtual void read_at(std::uint64_t offset, std::span<std::byte> out) const = 0;
};

namespace {

class FileBacking final : public TensorStore::Backing {
 public:
  explicit FileBacking(const std::filesystem::path& path) : path_(path.string()) {
    fd_ = ::open(path_.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) throw Error("cannot open '" + path_ + "': " + std::strerror(errno));
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      const int err = errno;
      ::close(fd_);
      throw Error("cannot stat '" + path_ + "': " + std::strerror(err));
    }
    size_ = static_cast<std::uint64_t>(st.st_size);
  }
  ~FileBacking() override { ::close(fd_); }
  FileBacking(const FileBacking&) = delete;
  FileBacking& operator=(const FileBacking&) = delete;

  std::uint64_t size() const override { return size_; }

  void read_at(std::uint64_t offset, std::span<std::byte> out) const override {
    std::size_t done = 0;
    while (done < out.size()) {
      const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done,
                                static_cast<off_t>(offset + done));
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error("read failed on '" + path_ + "': " + std::strerror(errno));
      }
      if (n == 0) throw Error("unexpected end of file in '" + path_ + "'");
      done += static_cast<std::size_t>(n);
    }
  }

 private:
  std::string path_;
  int fd_ = -1;
  std::uint64_t size_ = 0;
};

class BufferBacking final : public TensorStore::Backing {
 public:
  explicit BufferBacking(std::string bytes) : bytes_(std::move(bytes)) {}
  std::uint64_t size() const override { return bytes_.size(); }
  void read_at(std::uint64_t offset, std::span<std::byte> out) const override {
    if (offset > bytes_.size() || out.size() > bytes_.size() - offset) {
      throw Error("read past end of in-memory store");
    }
    std::memcpy(out.data(), bytes_.data() + offset, out.size());
  }

 private:
  std::string bytes_;
};

std::uint64_t read_le_u64(const std::byte* p) {
  std::uint64_t value = 0;
  for (int i = 7; i >= 0; --i) value = (value << 8) | static_cast<std::uint64_t>(p[i]);
  return value;
}

[[noreturn]] void malformed(const std::string& what) {
  throw Error("malformed header: " + what);
}

std::uint64_t json_u64(const json& value, const std::string& where) {
  if (!value.is_number_unsigned()) malformed(where + " must be a non-negative integer");
  return value.get<std::uint64_t>();
}

TensorMeta parse_entry(const std::string& name, const json& entry) {
  if (!entry.is_object()) malformed("entry '" + name + "' is not an object");
  if (entry.size() != 3 || !entry.contains("dtype") || !entry.contains("shape") ||
      !entry.contains("data_offsets")) {
    malformed("entry '" + name + "' must have exactly dtype, shape and data_offsets");
  }
  TensorMeta meta;
  meta.name = name;
  const json& dtype = entry.at("dtype");
  if (!dtype.is_string()) malformed("entry '" + name + "' dtype is not a string");
  meta.dtype = parse_dtype(dtype.get<std::string>());

  const json& shape = entry.at("shape");
  if (!shape.is_array()) malformed("entry '" + name + "' shape is not an array");
  for (const json& dim : shape) meta.shape.push_back(json_u64(dim, "shape of '" + name + "'"));

  const json& offsets = entry.at("data_offsets");
  if (!offsets.is_array() || offsets.size() != 2) {
    malformed("entry '" + name + "' data_offsets must be [begin, end]");
  }
  meta.begin = json_u64(offsets[0], "data_offsets of '" + name + "'");
  meta.end = json_u64(offsets[1], "data_offsets of '" + name + "'");
  if (meta.end < meta.begin) malformed("entry '" + name + "' has end < begin");
  return meta;
}

template <typename Word>
std::vector<Word> read_words(const TensorStore::Backing& backing, std::uint64_t offset,
                             std::uint64_t count) {
  std::vector<Word> words(count);
  backing.read_at(offset, std::as_writable_bytes(std::span(words)));
  return words;
}

}  // namespace

// ---------------------------------------------------------------------------
// TensorStore

TensorStore TensorStore::open(const std::filesystem::path& path) {
  return parse(std::make_shared<FileBacking>(path), path.string());
}

TensorStore TensorStore::from_bytes(std::string bytes, std::string label) {
  return parse(std::make_shared<BufferBacking>(std::move(bytes)), std::move(label));
}

TensorStore TensorStore::parse(std::shared_ptr<const Backing> backing, std::string label) {
  const std::uint64_t total = backing->size();
  if (total < 8) malformed("file shorter than the 8-byte length prefix");
  std::array<std::byte, 8> prefix{};
  backing->read_at(0, prefix);
  const std::uint64_t header_len = read_le_u64(prefix.data());
  if (header_len > total - 8) malformed("header length exceeds file size");
  if (header_len > kMaxHeaderBytes) malformed("header length exceeds 100 MiB");

  std::string text(header_len, '\0');
  backing->read_at(8, std::as_writable_bytes(std::span(text)));

  std::set<std::string> seen;
  std::string duplicate;
  json header;
  try {
    header = json::parse(text, [&](int depth, json::parse_event_t event, json& parsed) {
      if (event == json::parse_event_t::key && depth == 1 &&
          !seen.insert(parsed.get<std::string>()).second) {
        duplicate = parsed.get<std::string>();
      }
      return true;
    });
  } catch (const json::exception& e) {
    malformed(std::string("invalid JSON (") + e.what() + ")");
  }
  if (!header.is_object()) malformed("top level is not an object");
  if (!duplicate.empty()) malformed("duplicate tensor name '" + duplicate + "'");

  TensorStore store;
  store.backing_ = std::move(backing);
  store.label_ = std::move(label);
  store.data_start_ = 8 + header_len;
  const std::uint64_t data_size = total - store.data_start_;

  for (const auto& [key, value] : header.items()) {
    if (key == kMetadataKey) {
      if (!value.is_object()) malformed("__metadata__ is not an object");
      for (const auto& [mkey, mvalue] : value.items()) {
        if (!mvalue.is_string()) malformed("__metadata__ value for '" + mkey + "' is not a string");
        store.metadata_.emplace(mkey, mvalue.get<std::string>());
      }
      continue;
    }
    TensorMeta meta = parse_entry(key, value);
    const std::uint64_t expected = meta.numel() * byte_width(meta.dtype);
    if (meta.numel() != 0 && expected / meta.numel() != byte_width(meta.dtype)) {
      malformed("entry '" + key + "' byte size overflows");
    }
    if (meta.end - meta.begin != expected) {
      throw Error("declared size mismatch for '" + key + "': offsets span " +
                  std::to_string(meta.end - meta.begin) + " bytes, " + std::string(to_string(meta.dtype)) +
                  shape_to_string(meta.shape) + " needs " + std::to_string(expected));
    }
    if (meta.end > data_size) {
      throw Error("declared size mismatch for '" + key + "': data_offsets end " +
                  std::to_string(meta.end) + " beyond data section of " + std::to_string(data_size) +
                  " bytes");
    }
    store.entries_.push_back(std::move(meta));
  }

  // nlohmann orders object keys lexicographically, but sort explicitly so the
  // invariant does not depend on the JSON container.
  std::sort(store.entries_.begin(), store.entries_.end(),
            [](const TensorMeta& a, const TensorMeta& b) { return a.name < b.name; });

  std::vector<const TensorMeta*> by_offset;
  for (const TensorMeta& meta : store.entries_) {
    if (meta.end > meta.begin) by_offset.push_back(&meta);
  }
  std::sort(by_offset.begin(), by_offset.end(),
            [](const TensorMeta* a, const TensorMeta* b) { return a->begin < b->begin; });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    if (by_offset[i]->begin < by_offset[i - 1]->end) {
      throw Error("overlapping offsets: '" + by_offset[i - 1]->name + "' and '" +
                  by_offset[i]->name + "'");
    }
  }
  return store;
}

std::vector<std::string> TensorStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const TensorMeta& meta : entries_) out.push_back(meta.name);
  return out;
}

bool TensorStore::contains(std::string_view name) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), name,
                             [](const TensorMeta& m, std::string_view n) { return m.name < n; });
  return it != entries_.end() && it->name == name;
}

const TensorMeta& TensorStore::meta(std::string_view name) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), name,
                             [](const TensorMeta& m, std::string_view n) { return m.name < n; });
  if (it == entries_.end() || it->name != name) {
    throw Error("unknown tensor '" + std::string(name) + "' in " + label_);
  }
  return *it;
}

std::optional<std::string> TensorStore::metadata_value(const std::string& key) const {
  auto it = metadata_.find(key);
  if (it == metadata_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t TensorStore::file_size() const { return backing_->size(); }

std::vector<float> TensorStore::read_f32_unchecked(std::string_view name) const {
  const TensorMeta& m = meta(name);
  const std::uint64_t offset = data_start_ + m.begin;
  const std::uint64_t count = m.numel();
  switch (m.dtype) {
    case DType::F32:
      return read_words<float>(*backing_, offset, count);
    case DType::F16: {
      const auto bits = read_words<std::uint16_t>(*backing_, offset, count);
      std::vector<float> values(count);
      std::transform(bits.begin(), bits.end(), values.begin(), half_to_float);
      return values;
    }
    case DType::BF16: {
      const auto bits = read_words<std::uint16_t>(*backing_, offset, count);
      std::vector<float> values(count);
      std::transform(bits.begin(), bits.end(), values.begin(), bf16_to_float);
      return values;
    }
    case DType::U64:
      break;
  }
  throw Error("tensor '" + m.name + "' is U64, not a floating tensor");
}

std::vector<float> TensorStore::read_f32(std::string_view name) const {
  std::vector<float> values = read_f32_unchecked(name);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw Error("non-finite value in tensor '" + std::string(name) + "' at flat index " +
                  std::to_string(i));
    }
  }
  return values;
}

std::vector<std::uint64_t> TensorStore::read_u64(std::string_view name) const {
  const TensorMeta& m = meta(name);
  if (m.dtype != DType::U64) {
    throw Error("tensor '" + m.name + "' is " + std::string(to_string(m.dtype)) + ", not U64");
  }
  return read_words<std::uint64_t>(*backing_, data_start_ + m.begin, m.numel());
}

std::vector<std::byte> TensorStore::read_raw(std::string_view name) const {
  const TensorMeta& m = meta(name);
  std::vector<std::byte> bytes(m.end - m.begin);
  backing_->read_at(data_start_ + m.begin, bytes);
  return bytes;
}

std::string TensorStore::digest() const {
  constexpr std::uint64_t kChunk = 1 << 16;
  Sha256 hasher;
  std::vector<std::byte> buffer(std::min<std::uint64_t>(kChunk, backing_->size()));
  for (std::uint64_t offset = 0; offset < backing_->size(); offset += kChunk) {
    const auto n = std::min<std::uint64_t>(kChunk, backing_->size() - offset);
    std::span<std::byte> chunk(buffer.data(), n);
    backing_->read_at(offset, chunk);
    hasher.update(chunk);
  }
  return hasher.hex_digest();
}

// ---------------------------------------------------------------------------
// Writing

namespace {

void sort_and_check_specs(std::vector<TensorSpec>& specs) {
  std::sort(specs.begin(), specs.end(),
            [](const TensorSpec& a, const TensorSpec& b) { return a.name < b.name; });
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].name == kMetadataKey) throw Error("tensor name '__metadata__' is reserved");
    if (i > 0 && specs[i].name == specs[i - 1].name) {
      throw Error("duplicate tensor name '" + specs[i].name + "'");
    }
  }
}

}  // namespace

std::string encode_header(std::vector<TensorSpec> specs, const Metadata& metadata) {
  sort_and_check_specs(specs);
  json header = json::object();
  std::uint64_t offset = 0;
  for (const TensorSpec& spec : specs) {
    const std::uint64_t bytes = element_count(spec.shape) * byte_width(spec.dtype);
    header[spec.name] = {{"dtype", to_string(spec.dtype)},
                         {"shape", spec.shape},
                         {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!metadata.empty()) header[std::string(kMetadataKey)] = metadata;
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');
  return text;
}

StoreWriter::StoreWriter(std::ostream& out, std::vector<TensorSpec> specs, const Metadata& metadata)
    : out_(out), specs_(std::move(specs)) {
  const std::string header = encode_header(specs_, metadata);
  sort_and_check_specs(specs_);
  std::array<char, 8> prefix{};
  std::uint64_t length = header.size();
  for (char& c : prefix) {
    c = static_cast<char>(length & 0xFF);
    length >>= 8;
  }
  out_.write(prefix.data(), prefix.size());
  out_.write(header.data(), static_cast<std::streamsize>(header.size()));
  if (!out_) throw Error("write failed while emitting header");
}

std::string_view StoreWriter::next_name() const {
  return next_ < specs_.size() ? std::string_view(specs_[next_].name) : std::string_view();
}

const TensorSpec& StoreWriter::expect(std::string_view name, std::uint64_t count) {
  if (next_ >= specs_.size()) {
    throw Error("tensor '" + std::string(name) + "' written after all declared tensors");
  }
  const TensorSpec& spec = specs_[next_];
  if (spec.name != name) {
    throw Error("tensor '" + std::string(name) + "' written out of order; expected '" + spec.name + "'");
  }
  if (element_count(spec.shape) != count) {
    throw Error("tensor '" + spec.name + "' has " + std::to_string(count) + " values but shape " +
                shape_to_string(spec.shape) + " needs " + std::to_string(element_count(spec.shape)));
  }
  return spec;
}

void StoreWriter::write_f32(std::string_view name, std::span<const float> values) {
  const TensorSpec& spec = expect(name, values.size());
  auto unencodable = [&](std::size_t i) -> Error {
    return Error("tensor '" + spec.name + "' value " + std::to_string(values[i]) + " at flat index " +
                 std::to_string(i) + " is not representable as " + std::string(to_string(spec.dtype)));
  };
  switch (spec.dtype) {
    case DType::F32: {
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) throw unencodable(i);
      }
      out_.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size_bytes()));
      break;
    }
    case DType::F16:
    case DType::BF16: {
      std::vector<std::uint16_t> bits(values.size());
      const auto encode = spec.dtype == DType::F16 ? float_to_half : float_to_bf16;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto encoded = encode(values[i]);
        if (!encoded) throw unencodable(i);
        bits[i] = *encoded;
      }
      out_.write(reinterpret_cast<const char*>(bits.data()),
                 static_cast<std::streamsize>(bits.size() * sizeof(std::uint16_t)));
      break;
    }
    case DType::U64:
      throw Error("tensor '" + spec.name + "' is declared U64 but floating values were written");
  }
  if (!out_) throw Error("write failed for tensor '" + spec.name + "'");
  ++next_;
}

void StoreWriter::write_u64(std::string_view name, std::span<const std::uint64_t> values) {
  const TensorSpec& spec = expect(name, values.size());
  if (spec.dtype != DType::U64) {
    throw Error("tensor '" + spec.name + "' is declared " + std::string(to_string(spec.dtype)) +
                " but integer values were written");
  }
  out_.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size_bytes()));
  if (!out_) throw Error("write failed for tensor '" + spec.name + "'");
  ++next_;
}

void StoreWriter::finish() {
  if (next_ != specs_.size()) {
    throw Error("store incomplete: tensor '" + specs_[next_].name + "' was never written");
  }
  out_.flush();
  if (!out_) throw Error("flush failed");
}

namespace {

void put_all(StoreWriter& writer, std::vector<Tensor>& tensors) {
  std::sort(tensors.begin(), tensors.end(),
            [](const Tensor& a, const Tensor& b) { return a.name < b.name; });
  for (const Tensor& t : tensors) {
    if (const auto* f = std::get_if<std::vector<float>>(&t.values)) {
      writer.write_f32(t.name, *f);
    } else {
      writer.write_u64(t.name, std::get<std::vector<std::uint64_t>>(t.values));
    }
  }
}

std::vector<TensorSpec> specs_of(const std::vector<Tensor>& tensors) {
  std::vector<TensorSpec> specs;
  specs.reserve(tensors.size());
  for (const Tensor& t : tensors) specs.push_back({t.name, t.dtype, t.shape});
  return specs;
}

}  // namespace

std::string encode_store(std::vector<Tensor> tensors, const Metadata& metadata) {
  std::ostringstream out(std::ios::binary);
  StoreWriter writer(out, specs_of(tensors), metadata);
  put_all(writer, tensors);
  writer.finish();
  return std::move(out).str();
}

void write_store(std::vector<Tensor> tensors, const Metadata& metadata,
                 const std::filesystem::path& path) {
  emit_store(Destination::file(path), specs_of(tensors), metadata,
             [&](StoreWriter& writer) { put_all(writer, tensors); });
}

Destination Destination::memory(std::string label) {
  Destination d;
  d.label_ = std::move(label);
  return d;
}

Destination Destination::file(std::filesystem::path path) {
  Destination d;
  d.label_ = path.string();
  d.path_ = std::move(path);
  return d;
}

TensorStore emit_store(const Destination& dest, std::vector<TensorSpec> specs,
                       const Metadata& metadata,
                       const std::function<void(StoreWriter&)>& produce) {
  if (!dest.is_file()) {
    std::ostringstream out(std::ios::binary);
    StoreWriter writer(out, std::move(specs), metadata);
    produce(writer);
    writer.finish();
    return TensorStore::from_bytes(std::move(out).str(), dest.label());
  }

  const std::filesystem::path& target = dest.path();
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  std::filesystem::path partial = target;
  partial += ".partial";
  try {
    {
      std::ofstream out(partial, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot create '" + partial.string() + "'");
      StoreWriter writer(out, std::move(specs), metadata);
      produce(writer);
      writer.finish();
    }
    std::filesystem::rename(partial, target);
  } catch (...) {
    std::error_code ignored;
    std::filesystem::remove(partial, ignored);
    throw;
  }
  return TensorStore::open(target);
}

std::vector<Tensor> load_all(const TensorStore& store) {
  std::vector<Tensor> tensors;
  tensors.reserve(store.size());
  for (const TensorMeta& m : store.entries()) {
    Tensor t{m.name, m.dtype, m.shape, {}};
    if (is_floating(m.dtype)) {
      t.values = store.read_f32(m.name);
    } else {
      t.values = store.read_u64(m.name);
    }
    tensors.push_back(std::move(t));
  }
  return tensors;
}

}  // namespace maet
