#include "dformer/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace dformer {

namespace {

constexpr char kMagic[8] = {'D', 'F', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Reader {
  std::ifstream in;
  std::string path;
  std::size_t offset = 0;

  void take(void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n)) {
      throw FormatError(path + ": truncated at byte " + std::to_string(offset + in.gcount()));
    }
    offset += n;
  }
  std::uint32_t take_u32() {
    unsigned char b[4];
    take(b, 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
  }
  std::uint64_t take_u64() {
    std::uint64_t lo = take_u32();
    std::uint64_t hi = take_u32();
    return lo | hi << 32;
  }
  double take_f64() {
    std::uint64_t bits = take_u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string take_string() {
    std::uint32_t len = take_u32();
    std::string s(len, '\0');
    take(s.data(), len);
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Model& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("save_checkpoint: cannot open '" + path + "'");
  out.write(kMagic, 8);
  put_u32(out, kVersion);
  put_u64(out, m.seed);
  std::string cfg = serialize_model_config(m.cfg);
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put_u32(out, static_cast<std::uint32_t>(m.values.size()));
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    const std::string& name = m.names[i];
    const Tensor& t = m.values[i];
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.values()) put_f64(out, v);
  }
  if (!out) throw FormatError("save_checkpoint: write failed for '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  Reader r{std::ifstream(path, std::ios::binary), path};
  if (!r.in) throw FormatError("load_checkpoint: cannot open '" + path + "'");
  char magic[8];
  r.take(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError(path + ": bad magic at byte 0");
  std::uint32_t version = r.take_u32();
  if (version != kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t seed = r.take_u64();
  std::string cfg_text = r.take_string();

  Model m;
  m.cfg = parse_model_config(cfg_text);
  m.seed = seed;
  std::uint32_t count = r.take_u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.take_string();
    std::uint32_t rank = r.take_u32();
    if (rank > 8) throw FormatError(path + ": implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (std::uint32_t a = 0; a < rank; ++a) shape[a] = r.take_u32();
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = r.take_f64();
    m.add_param(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  r.in.peek();
  if (!r.in.eof()) throw FormatError(path + ": trailing bytes after tensor data");
  return m;
}

}  // namespace dformer
