#pragma once

#include "msdpn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace msdpn {

// Tensor record: "MSDT", u8 version = 1, u8 dtype = 0 (f32), u8 rank (>= 1),
// rank x u32 LE extents, row-major LE f32 payload.

void append_tensor_record(std::vector<std::uint8_t>& out, const Tensor& t);

/// Decodes one record starting at `offset` and advances it. Throws FormatError
/// carrying the absolute byte offset of the problem.
Tensor parse_tensor_record(std::span<const std::uint8_t> bytes, std::size_t& offset);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace msdpn
