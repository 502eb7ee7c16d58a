#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "divae/density.hpp"
#include "divae/synthgen.hpp"
#include "divae/autodiff/tensor.hpp"

namespace divae::io {

namespace fs = std::filesystem;

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kDensityVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in slices.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    c = ::crc32(c, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

/// Little-endian byte sink.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void f64s(const double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) f64(p[i]);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }

  /// Appends the CRC32 of everything written so far.
  std::vector<std::uint8_t> finish() {
    const std::uint32_t c = crc32_of(buf_);
    u32(c);
    return std::move(buf_);
  }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source with bounds checks reported as byte offsets.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  void need(std::size_t n) const {
    if (remaining() < n)
      throw FormatError(FormatError::Kind::truncated,
                        "unexpected end of data at byte offset " + std::to_string(pos_) + " (need " +
                            std::to_string(n) + " more bytes)");
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint32_t u32_be() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | data_[pos_++];
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void f64s(double* out, std::size_t n) {
    need(n * 8);
    for (std::size_t i = 0; i < n; ++i) out[i] = f64();
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  /// Reads a count and rejects values the remaining payload cannot hold.
  std::uint64_t count(std::size_t min_bytes_each) {
    const std::size_t at = pos_;
    const std::uint64_t n = u64();
    if (min_bytes_each > 0 && n > remaining() / min_bytes_each)
      throw FormatError(FormatError::Kind::parse, "implausible element count at byte offset " + std::to_string(at));
    return n;
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

/// Whole-file atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::io, "write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

inline void write_text_atomic(const fs::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Validates magic, CRC trailer, and version; returns a reader over the payload.
inline Reader open_envelope(std::span<const std::uint8_t> data, std::string_view magic, std::uint32_t max_version,
                            std::uint32_t& version) {
  if (data.size() < magic.size() || std::memcmp(data.data(), magic.data(), magic.size()) != 0)
    throw FormatError(FormatError::Kind::magic, "bad magic: expected '" + std::string(magic) + "'");
  if (data.size() < magic.size() + 8)
    throw FormatError(FormatError::Kind::checksum, "file too short for header and checksum");
  const auto body = data.first(data.size() - 4);
  Reader trailer(data.last(4));
  const std::uint32_t stored = trailer.u32();
  if (crc32_of(body) != stored)
    throw FormatError(FormatError::Kind::checksum, "checksum mismatch (file truncated or corrupted)");
  Reader r(body);
  r.take(magic.size());
  version = r.u32();
  if (version == 0 || version > max_version)
    throw FormatError(FormatError::Kind::version, "unsupported " + std::string(magic) + " version " +
                                                     std::to_string(version));
  return r;
}

inline void expect_consumed(const Reader& r, std::string_view what) {
  if (r.remaining() != 0)
    throw FormatError(FormatError::Kind::parse, std::string(what) + ": trailing bytes at offset " +
                                                    std::to_string(r.offset()));
}

// ---------------------------------------------------------------------------
// Dataset ("DIVD")

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  Writer w;
  w.magic("DIVD");
  w.u32(kDatasetVersion);
  const std::size_t N = ds.size(), D = ds.dim();
  w.u64(N);
  w.u64(D);
  w.u64(ds.is_synthetic() ? ds.gen().spec.k() : 0);
  w.u8(static_cast<std::uint8_t>(ds.split));
  w.u8(ds.is_synthetic() ? 1 : 0);
  w.f64s(ds.X.data(), N * D);
  w.u64(ds.labels.size());
  for (int l : ds.labels) w.i32(l);
  if (ds.is_synthetic()) {
    const auto& g = ds.gen();
    w.f64(g.sigma_pad);
    for (Eigen::Index i = 0; i < g.R.rows(); ++i)
      for (Eigen::Index j = 0; j < g.R.cols(); ++j) w.f64(g.R(i, j));
    for (Eigen::Index i = 0; i < g.Pi.rows(); ++i)
      for (Eigen::Index j = 0; j < g.Pi.cols(); ++j) w.f64(g.Pi(i, j));
    for (std::size_t c = 0; c < g.spec.k(); ++c) {
      w.f64(g.spec.weights[c]);
      w.f64(g.spec.means[c][0]);
      w.f64(g.spec.means[c][1]);
      for (double v : g.spec.covs[c]) w.f64(v);
    }
  }
  return w.finish();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> data) {
  std::uint32_t version = 0;
  Reader r = open_envelope(data, "DIVD", kDatasetVersion, version);
  const std::uint64_t N = r.u64(), D = r.u64(), k = r.u64();
  Dataset ds;
  const std::uint8_t split = r.u8();
  if (split > 1) throw FormatError(FormatError::Kind::parse, "DIVD: bad split tag");
  ds.split = static_cast<Split>(split);
  const bool has_gen = r.u8() != 0;
  if (D == 0 || N > r.remaining() / (8 * D)) throw FormatError(FormatError::Kind::parse, "DIVD: bad dimensions");
  ds.X.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  r.f64s(ds.X.data(), N * D);
  const std::uint64_t nl = r.count(4);
  ds.labels.resize(nl);
  for (auto& l : ds.labels) l = r.i32();
  if (has_gen) {
    Generator g;
    g.sigma_pad = r.f64();
    g.R.resize(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
    for (Eigen::Index i = 0; i < g.R.rows(); ++i)
      for (Eigen::Index j = 0; j < g.R.cols(); ++j) g.R(i, j) = r.f64();
    g.Pi.resize(2, static_cast<Eigen::Index>(D));
    for (Eigen::Index i = 0; i < 2; ++i)
      for (Eigen::Index j = 0; j < g.Pi.cols(); ++j) g.Pi(i, j) = r.f64();
    if (k > r.remaining() / 56) throw FormatError(FormatError::Kind::parse, "DIVD: bad component count");
    for (std::uint64_t c = 0; c < k; ++c) {
      g.spec.weights.push_back(r.f64());
      const double m0 = r.f64(), m1 = r.f64();
      g.spec.means.push_back({m0, m1});
      std::array<double, 4> cov{};
      for (auto& v : cov) v = r.f64();
      g.spec.covs.push_back(cov);
    }
    ds.generator = std::move(g);
  }
  expect_consumed(r, "DIVD");
  return ds;
}

inline void save_dataset(const fs::path& path, const Dataset& ds) { write_file_atomic(path, encode_dataset(ds)); }
inline Dataset load_dataset(const fs::path& path) { return decode_dataset(read_file(path)); }

// ---------------------------------------------------------------------------
// Density estimate ("DIVR")

inline std::vector<std::uint8_t> encode_density(const DensityEstimate& est) {
  Writer w;
  w.magic("DIVR");
  w.u32(kDensityVersion);
  w.u64(est.size());
  w.u8(static_cast<std::uint8_t>(est.tag));
  w.f64s(est.rho.data(), est.rho.size());
  w.f64s(est.sigma.data(), est.sigma.size());
  w.u64(est.fallback_count);
  const auto& p = est.projector;
  w.u64(p.out_dim());
  w.u64(p.in_dim());
  w.f64s(p.mean.data(), static_cast<std::size_t>(p.mean.size()));
  for (Eigen::Index i = 0; i < p.W.rows(); ++i)
    for (Eigen::Index j = 0; j < p.W.cols(); ++j) w.f64(p.W(i, j));
  w.u64(p.explained.size());
  w.f64s(p.explained.data(), p.explained.size());
  return w.finish();
}

inline DensityEstimate decode_density(std::span<const std::uint8_t> data) {
  std::uint32_t version = 0;
  Reader r = open_envelope(data, "DIVR", kDensityVersion, version);
  DensityEstimate est;
  const std::uint64_t N = r.u64();
  const std::uint8_t tag = r.u8();
  if (tag > 2) throw FormatError(FormatError::Kind::parse, "DIVR: bad estimator tag");
  est.tag = static_cast<Estimator>(tag);
  if (N > r.remaining() / 16) throw FormatError(FormatError::Kind::parse, "DIVR: bad point count");
  est.rho.resize(N);
  est.sigma.resize(N);
  r.f64s(est.rho.data(), N);
  r.f64s(est.sigma.data(), N);
  est.fallback_count = r.u64();
  const std::uint64_t d = r.u64(), D = r.u64();
  if (D > r.remaining() / 8 || (D > 0 && d > r.remaining() / (8 * D)))
    throw FormatError(FormatError::Kind::parse, "DIVR: bad projector shape");
  est.projector.mean.resize(static_cast<Eigen::Index>(D));
  r.f64s(est.projector.mean.data(), D);
  est.projector.W.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(D));
  for (Eigen::Index i = 0; i < est.projector.W.rows(); ++i)
    for (Eigen::Index j = 0; j < est.projector.W.cols(); ++j) est.projector.W(i, j) = r.f64();
  const std::uint64_t ne = r.count(8);
  est.projector.explained.resize(ne);
  r.f64s(est.projector.explained.data(), ne);
  expect_consumed(r, "DIVR");
  return est;
}

inline void save_density(const fs::path& path, const DensityEstimate& est) {
  write_file_atomic(path, encode_density(est));
}
inline DensityEstimate load_density(const fs::path& path) { return decode_density(read_file(path)); }

// ---------------------------------------------------------------------------
// Checkpoint ("DIVM"): string metadata plus named tensors.

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, ad::Tensor>> tensors;

  const ad::Tensor& tensor(std::string_view name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError(FormatError::Kind::parse, "checkpoint: missing tensor '" + std::string(name) + "'");
  }
  bool has_tensor(std::string_view name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
  const std::string& get(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError(FormatError::Kind::parse, "checkpoint: missing key '" + key + "'");
    return it->second;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.magic("DIVM");
  w.u32(kCheckpointVersion);
  w.u64(ck.meta.size());
  for (const auto& [k, v] : ck.meta) {
    w.str(k);
    w.str(v);
  }
  w.u64(ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    w.str(name);
    w.u64(t.rank());
    for (auto s : t.shape()) w.u64(s);
    w.f64s(t.values().data(), t.size());
  }
  return w.finish();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> data) {
  std::uint32_t version = 0;
  Reader r = open_envelope(data, "DIVM", kCheckpointVersion, version);
  Checkpoint ck;
  const std::uint64_t nm = r.count(16);
  for (std::uint64_t i = 0; i < nm; ++i) {
    std::string k = r.str();
    ck.meta[std::move(k)] = r.str();
  }
  const std::uint64_t nt = r.count(16);
  for (std::uint64_t i = 0; i < nt; ++i) {
    std::string name = r.str();
    const std::uint64_t rank = r.count(8);
    ad::Shape shape(rank);
    for (auto& s : shape) s = r.u64();
    const std::size_t n = ad::shape_size(shape);
    if (n > r.remaining() / 8) throw FormatError(FormatError::Kind::parse, "DIVM: tensor '" + name + "' too large");
    std::vector<double> vals(n);
    r.f64s(vals.data(), n);
    ck.tensors.emplace_back(std::move(name), ad::Tensor(std::move(shape), std::move(vals)));
  }
  expect_consumed(r, "DIVM");
  return ck;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}
inline Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// IDX (MNIST / FashionMNIST)

struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  RowMatrix pixels;  // count x (rows*cols), scaled to [0,1]
};

inline IdxImages parse_idx_images(std::span<const std::uint8_t> data) {
  Reader r(data);
  const std::uint32_t magic = r.u32_be();
  if (magic != 2051)
    throw FormatError(FormatError::Kind::magic, "IDX images: bad magic " + std::to_string(magic) + " at byte offset 0");
  IdxImages img;
  img.count = r.u32_be();
  img.rows = r.u32_be();
  img.cols = r.u32_be();
  const std::size_t px = img.rows * img.cols;
  if (r.remaining() < img.count * px)
    throw FormatError(FormatError::Kind::truncated,
                      "IDX images: payload truncated at byte offset " + std::to_string(r.offset() + r.remaining()) +
                          " (expected " + std::to_string(16 + img.count * px) + " bytes)");
  img.pixels.resize(static_cast<Eigen::Index>(img.count), static_cast<Eigen::Index>(px));
  const auto bytes = r.take(img.count * px);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels.data()[i] = static_cast<double>(bytes[i]) / 255.0;
  return img;
}

inline std::vector<int> parse_idx_labels(std::span<const std::uint8_t> data) {
  Reader r(data);
  const std::uint32_t magic = r.u32_be();
  if (magic != 2049)
    throw FormatError(FormatError::Kind::magic, "IDX labels: bad magic " + std::to_string(magic) + " at byte offset 0");
  const std::uint32_t n = r.u32_be();
  if (r.remaining() < n)
    throw FormatError(FormatError::Kind::truncated,
                      "IDX labels: payload truncated at byte offset " + std::to_string(r.offset() + r.remaining()));
  const auto bytes = r.take(n);
  return {bytes.begin(), bytes.end()};
}

inline IdxImages load_idx_images(const fs::path& path) { return parse_idx_images(read_file(path)); }
inline std::vector<int> load_idx_labels(const fs::path& path) { return parse_idx_labels(read_file(path)); }

}  // namespace divae::io
