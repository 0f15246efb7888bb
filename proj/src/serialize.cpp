// SPDX-License-Identifier: Apache-2.0
#include "amfn/serialize.hpp"

#include <cstring>
#include <fstream>

namespace amfn {
namespace {

constexpr char kMagic[4] = {'J', 'V', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

// Assumes a little-endian host (the container format is little-endian).
static_assert(sizeof(float) == 4 && sizeof(double) == 8);

void put_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}
template <class T>
void put_scalar(std::string& buf, T v) {
  put_bytes(buf, &v, sizeof(T));
}

template <class Real>
void put_tensor(std::string& buf, const Tensor<Real>& t) {
  put_bytes(buf, kMagic, 4);
  put_scalar<std::uint32_t>(buf, kVersion);
  put_scalar<std::uint8_t>(buf, dtype_code<Real>::value);
  put_scalar<std::uint8_t>(buf, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) put_scalar<std::uint64_t>(buf, static_cast<std::uint64_t>(e));
  put_bytes(buf, t.data().data(), t.numel() * sizeof(Real));
}

void put_any(std::string& buf, const AnyTensor& a) {
  if (a.dtype == 0)
    put_tensor(buf, a.f32);
  else
    put_tensor(buf, a.f64);
}

struct Reader {
  const std::string& buf;
  const std::string& path;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(path + ": " + what + " at byte offset " + std::to_string(pos));
  }
  void take(void* out, std::size_t n, const char* what) {
    if (pos + n > buf.size()) fail(std::string("truncated ") + what);
    std::memcpy(out, buf.data() + pos, n);
    pos += n;
  }
  template <class T>
  T scalar(const char* what) {
    T v;
    take(&v, sizeof(T), what);
    return v;
  }

  AnyTensor tensor() {
    char magic[4];
    const std::size_t magic_at = pos;
    take(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
      pos = magic_at;
      fail("bad magic (expected JVT1)");
    }
    const std::uint32_t version = scalar<std::uint32_t>("version");
    if (version != kVersion) fail("unsupported version " + std::to_string(version));
    const std::uint8_t dtype = scalar<std::uint8_t>("dtype");
    if (dtype > 1) fail("unknown dtype code " + std::to_string(dtype));
    const std::uint8_t rank = scalar<std::uint8_t>("rank");
    Shape shape(rank);
    for (std::uint8_t i = 0; i < rank; ++i) {
      const std::uint64_t e = scalar<std::uint64_t>("extent");
      if (e == 0) fail("zero extent");
      shape[i] = static_cast<std::size_t>(e);
    }
    const std::size_t n = shape_numel(shape);
    AnyTensor out;
    out.dtype = dtype;
    if (dtype == 0) {
      std::vector<float> vals(n);
      take(vals.data(), n * sizeof(float), "payload");
      out.f32 = Tensor<float>::from(shape, std::move(vals));
    } else {
      std::vector<double> vals(n);
      take(vals.data(), n * sizeof(double), "payload");
      out.f64 = Tensor<double>::from(shape, std::move(vals));
    }
    return out;
  }
};

void write_file(const std::string& path, const std::string& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path);
  return buf;
}

}  // namespace

Tensor<float> AnyTensor::as_f32(const std::string& context) const {
  if (dtype != 0) throw FormatError(context + ": expected f32 tensor, file holds f64");
  return f32;
}
Tensor<double> AnyTensor::as_f64(const std::string& context) const {
  if (dtype != 1) throw FormatError(context + ": expected f64 tensor, file holds f32");
  return f64;
}

void save_named_tensors(const std::string& path, const NamedTensors& entries) {
  std::string buf;
  put_scalar<std::uint32_t>(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (name.size() > 0xFFFF) throw UsageError("tensor name too long: " + name);
    put_scalar<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    put_bytes(buf, name.data(), name.size());
    put_any(buf, t);
  }
  write_file(path, buf);
}

NamedTensors load_named_tensors(const std::string& path) {
  const std::string buf = read_file(path);
  Reader r{buf, path};
  const std::uint32_t count = r.scalar<std::uint32_t>("entry count");
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.scalar<std::uint16_t>("name length");
    std::string name(len, '\0');
    r.take(name.data(), len, "name");
    out.emplace_back(std::move(name), r.tensor());
  }
  if (r.pos != buf.size()) r.fail("trailing bytes after last entry");
  return out;
}

template <class Real>
void save_tensor_file(const std::string& path, const Tensor<Real>& t) {
  std::string buf;
  put_tensor(buf, t);
  write_file(path, buf);
}

template void save_tensor_file<float>(const std::string&, const Tensor<float>&);
template void save_tensor_file<double>(const std::string&, const Tensor<double>&);

void save_param_set(const std::string& path, const ParamSet<float>& params) {
  NamedTensors entries;
  entries.reserve(params.size());
  for (const auto& [name, t] : params.entries()) entries.emplace_back(name, AnyTensor::wrap(t));
  save_named_tensors(path, entries);
}

ParamSet<float> load_param_set(const std::string& path) {
  ParamSet<float> out;
  for (auto& [name, t] : load_named_tensors(path)) out.add(name, t.as_f32(path + ":" + name));
  return out;
}

}  // namespace amfn
