#include "synmesh/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "synmesh/errors.hpp"

namespace synmesh::io {
namespace {

template <typename T>
void append_le(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(bytes, sizeof(T));
}

DType dtype_of(const Entry& e) {
  if (e.is_text) return DType::Text;
  switch (e.value.scalar_type()) {
    case torch::kFloat32: return DType::F32;
    case torch::kFloat64: return DType::F64;
    case torch::kInt64: return DType::I64;
    case torch::kUInt8: return DType::U8;
    default:
      throw ConfigError("container: unsupported tensor dtype for entry '" + e.name + "'");
  }
}

std::size_t element_size(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::I64: return 8;
    case DType::U8:
    case DType::Text: return 1;
  }
  return 0;
}

torch::ScalarType scalar_type(DType t) {
  switch (t) {
    case DType::F32: return torch::kFloat32;
    case DType::F64: return torch::kFloat64;
    case DType::I64: return torch::kInt64;
    case DType::U8:
    case DType::Text: return torch::kUInt8;
  }
  return torch::kUInt8;
}

void append_payload(std::string& out, const torch::Tensor& t, DType tag) {
  const auto c = t.contiguous();
  const auto n = static_cast<std::size_t>(c.numel());
  const auto* raw = static_cast<const char*>(c.data_ptr());
  const std::size_t es = element_size(tag);
  if constexpr (std::endian::native == std::endian::little) {
    out.append(raw, n * es);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::string elem(raw + i * es, es);
      std::reverse(elem.begin(), elem.end());
      out += elem;
    }
  }
}

class Reader {
public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T read() {
    need(sizeof(T));
    char buf[sizeof(T)];
    std::memcpy(buf, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("container: truncated data", pos_);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Record::put(std::string name, const torch::Tensor& value, std::uint8_t flags) {
  Entry e{std::move(name), value.detach().to(torch::kCPU).contiguous().clone(), flags, false};
  dtype_of(e);
  entries_.push_back(std::move(e));
}

void Record::put_text(std::string name, std::string_view text) {
  auto t = torch::empty({static_cast<std::int64_t>(text.size())}, torch::kUInt8);
  if (!text.empty()) std::memcpy(t.data_ptr(), text.data(), text.size());
  entries_.push_back(Entry{std::move(name), t, kNone, true});
}

void Record::put_int(std::string name, std::int64_t value) {
  put(std::move(name), torch::tensor({value}, torch::kInt64));
}

void Record::put_double(std::string name, double value) {
  put(std::move(name), torch::tensor({value}, torch::kFloat64));
}

bool Record::has(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

const Entry& Record::entry(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw StateError("container: record has no entry '" + std::string(name) + "'");
}

const torch::Tensor& Record::get(std::string_view name) const { return entry(name).value; }

std::string Record::text(std::string_view name) const {
  const auto& t = entry(name).value;
  return std::string(static_cast<const char*>(t.data_ptr()), static_cast<std::size_t>(t.numel()));
}

std::int64_t Record::get_int(std::string_view name) const { return get(name).item<std::int64_t>(); }

double Record::get_double(std::string_view name) const { return get(name).item<double>(); }

std::string encode_container(std::string_view magic, const std::vector<Record>& records) {
  std::string out(magic);
  append_le<std::uint64_t>(out, records.size());
  for (const auto& rec : records) {
    std::string body;
    append_le<std::uint32_t>(body, static_cast<std::uint32_t>(rec.entries().size()));
    for (const auto& e : rec.entries()) {
      const DType tag = dtype_of(e);
      append_le<std::uint32_t>(body, static_cast<std::uint32_t>(e.name.size()));
      body += e.name;
      append_le<std::uint8_t>(body, e.flags);
      append_le<std::uint8_t>(body, static_cast<std::uint8_t>(tag));
      append_le<std::uint32_t>(body, static_cast<std::uint32_t>(e.value.dim()));
      for (auto d : e.value.sizes()) append_le<std::int64_t>(body, d);
      append_payload(body, e.value, tag);
    }
    append_le<std::uint64_t>(out, body.size());
    out += body;
  }
  return out;
}

std::vector<Record> decode_container(std::string_view bytes, std::string_view magic) {
  // "<family>-v<n>": a matching family with another version is a version
  // mismatch; anything else is a foreign file.
  const auto vpos = magic.rfind("-v");
  const std::string_view family = magic.substr(0, vpos + 2);
  if (bytes.substr(0, magic.size()) != magic) {
    if (bytes.substr(0, family.size()) == family)
      throw FormatError("container: schema version mismatch (expected " + std::string(magic) + ")",
                        family.size());
    throw FormatError("container: bad magic (expected " + std::string(magic) + ")", 0);
  }
  Reader r(bytes);
  r.take(magic.size());
  const auto count = r.read<std::uint64_t>();
  std::vector<Record> records;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.read<std::uint64_t>();
    const std::size_t start = r.pos();
    if (r.remaining() < len) throw IoError("container: truncated record " + std::to_string(i), start);
    Reader body(r.take(len));
    Record rec;
    const auto n_entries = body.read<std::uint32_t>();
    for (std::uint32_t k = 0; k < n_entries; ++k) {
      const auto name_len = body.read<std::uint32_t>();
      std::string name(body.take(name_len));
      const auto flags = body.read<std::uint8_t>();
      const auto tag_raw = body.read<std::uint8_t>();
      if (tag_raw > static_cast<std::uint8_t>(DType::Text))
        throw FormatError("container: unknown dtype tag", start + body.pos());
      const auto tag = static_cast<DType>(tag_raw);
      const auto rank = body.read<std::uint32_t>();
      std::vector<std::int64_t> dims(rank);
      std::int64_t numel = 1;
      for (auto& d : dims) {
        d = body.read<std::int64_t>();
        if (d < 0) throw FormatError("container: negative dimension", start + body.pos());
        numel *= d;
      }
      const std::size_t nbytes = static_cast<std::size_t>(numel) * element_size(tag);
      if (body.remaining() < nbytes) throw IoError("container: truncated payload", start + body.pos());
      auto payload = body.take(nbytes);
      auto t = torch::empty(dims, scalar_type(tag));
      if (nbytes > 0) std::memcpy(t.data_ptr(), payload.data(), nbytes);
      if constexpr (std::endian::native == std::endian::big) {
        // Byte-swap each element in place.
        auto* p = static_cast<char*>(t.data_ptr());
        const std::size_t es = element_size(tag);
        for (std::int64_t e = 0; e < numel; ++e) std::reverse(p + e * es, p + (e + 1) * es);
      }
      if (tag == DType::Text) {
        rec.put_text(name, std::string_view(payload.data(), payload.size()));
      } else {
        rec.put(name, t, flags);
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_container(const std::string& path, std::string_view magic, const std::vector<Record>& records) {
  const auto bytes = encode_container(magic, records);
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("container: cannot open '" + path + "' for writing", 0);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("container: write failed for '" + path + "'", 0);
}

std::vector<Record> read_container(const std::string& path, std::string_view magic) {
  if (!std::filesystem::exists(path)) throw MissingInputError("missing input file '" + path + "'");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("container: cannot open '" + path + "'", 0);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes, magic);
}

}  // namespace synmesh::io
