#include "msdpn/tensor_io.hpp"

#include "msdpn/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace msdpn {

static_assert(std::endian::native == std::endian::little, "tensor records assume a little-endian host");

namespace {

constexpr std::uint8_t kMagic[4] = {'M', 'S', 'D', 'T'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

void need(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t n, const char* what) {
  if (offset + n > bytes.size()) {
    throw FormatError(std::string("truncated tensor record: missing ") + what,
                      static_cast<std::int64_t>(bytes.size()));
  }
}

}  // namespace

void append_tensor_record(std::vector<std::uint8_t>& out, const Tensor& t) {
  if (t.rank() < 1 || t.rank() > 255) throw FormatError("tensor record rank must be in [1, 255]");
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kVersion);
  out.push_back(kDtypeF32);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) {
    if (d > 0xFFFFFFFFLL) throw FormatError("tensor extent exceeds u32");
    const auto v = static_cast<std::uint32_t>(d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + 4);
  }
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
  out.insert(out.end(), p, p + sizeof(float) * static_cast<std::size_t>(t.numel()));
}

Tensor parse_tensor_record(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  const std::size_t start = offset;
  need(bytes, offset, 7, "header");
  if (std::memcmp(bytes.data() + offset, kMagic, 4) != 0) {
    throw FormatError("bad tensor magic", static_cast<std::int64_t>(start));
  }
  if (bytes[offset + 4] != kVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(bytes[offset + 4]),
                      static_cast<std::int64_t>(start + 4));
  }
  if (bytes[offset + 5] != kDtypeF32) {
    throw FormatError("unsupported tensor dtype " + std::to_string(bytes[offset + 5]),
                      static_cast<std::int64_t>(start + 5));
  }
  const int rank = bytes[offset + 6];
  if (rank == 0) throw FormatError("rank-0 tensor records are not allowed", static_cast<std::int64_t>(start + 6));
  offset += 7;
  need(bytes, offset, 4 * static_cast<std::size_t>(rank), "extents");
  Shape shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + offset, 4);
    shape[static_cast<std::size_t>(i)] = v;
    offset += 4;
  }
  const auto count = static_cast<std::size_t>(shape_numel(shape));
  need(bytes, offset, count * sizeof(float), "payload");
  std::vector<float> data(count);
  std::memcpy(data.data(), bytes.data() + offset, count * sizeof(float));
  offset += count * sizeof(float);
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFileError(path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw MissingFileError(path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::vector<std::uint8_t> bytes;
  append_tensor_record(bytes, t);
  write_file_bytes(path, bytes);
}

Tensor read_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t off = 0;
  try {
    Tensor t = parse_tensor_record(bytes, off);
    if (off != bytes.size()) {
      throw FormatError("trailing bytes after tensor record", static_cast<std::int64_t>(off));
    }
    return t;
  } catch (const FormatError& e) {
    throw e.with_context(path.string());
  }
}

}  // namespace msdpn
