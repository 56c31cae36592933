#include "stampnet/tensor.hpp"

#include <istream>
#include <ostream>

#include "stampnet/binary_io.hpp"

namespace stampnet {

void write_tensor(std::ostream& out, const Tensor& t) {
  io::write_magic(out, "STNT");
  io::write_le<std::uint32_t>(out, kTensorFormatVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (Index e : t.shape()) io::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
  for (double v : t.values()) io::write_le<double>(out, v);
}

Tensor read_tensor(std::istream& in) {
  io::expect_magic(in, "STNT");
  const auto version = io::read_le<std::uint32_t>(in, "tensor version");
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported tensor format version " + std::to_string(version));
  }
  const auto rank = io::read_le<std::uint32_t>(in, "tensor rank");
  if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank) + io::offset_suffix(in));
  Shape shape(rank);
  for (auto& e : shape) {
    const auto extent = io::read_le<std::uint64_t>(in, "tensor extent");
    if (extent == 0 || extent > (std::uint64_t{1} << 40)) {
      throw FormatError("invalid tensor extent " + std::to_string(extent) + io::offset_suffix(in));
    }
    e = static_cast<Index>(extent);
  }
  if (shape_size(shape) > (Index{1} << 31)) {
    throw FormatError("implausible tensor size " + shape_string(shape) + io::offset_suffix(in));
  }
  Tensor t(shape);
  for (auto& v : t.values()) v = io::read_le<double>(in, "tensor data");
  return t;
}

}  // namespace stampnet
