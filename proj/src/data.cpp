#include "dformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dformer/rng.hpp"

namespace dformer {

namespace {

constexpr char kMagic[8] = {'D', 'F', 'V', 'O', 'L', '0', '0', '1'};

struct Ball {
  double cz, cy, cx, r;
  std::size_t cls;
  bool box;  // box uses r as half-extent per axis
};

bool overlaps(const Ball& a, const Ball& b) {
  if (a.box || b.box) {
    return std::fabs(a.cz - b.cz) <= a.r + b.r && std::fabs(a.cy - b.cy) <= a.r + b.r &&
           std::fabs(a.cx - b.cx) <= a.r + b.r;
  }
  double dz = a.cz - b.cz, dy = a.cy - b.cy, dx = a.cx - b.cx;
  return std::sqrt(dz * dz + dy * dy + dx * dx) <= a.r + b.r + 1.0;
}

bool contains(const Ball& s, double z, double y, double x) {
  if (s.box) {
    return std::fabs(z - s.cz) <= s.r && std::fabs(y - s.cy) <= s.r && std::fabs(x - s.cx) <= s.r;
  }
  double dz = z - s.cz, dy = y - s.cy, dx = x - s.cx;
  return dz * dz + dy * dy + dx * dx <= s.r * s.r;
}

double class_intensity(std::size_t cls, std::size_t num_classes) {
  if (cls == 0) return 0.1;
  return 0.1 + 0.8 * double(cls) / double(num_classes - 1);
}

}  // namespace

std::vector<VolumeSample> synth_dataset(std::uint64_t seed, std::size_t count, std::size_t d,
                                        std::size_t h, std::size_t w, std::size_t num_classes,
                                        ShapeKind kind, double noise_level) {
  if (num_classes < 2) throw ConfigurationError("synth_dataset: K must be >= 2");
  if (kind == ShapeKind::kNested && num_classes < 3) {
    throw ParameterError("synth_dataset: nested shapes need K >= 3");
  }
  std::size_t min_dim = std::min({d, h, w});
  double r_max = double(min_dim) / 3.0;
  double r_min = 2.0;
  if (r_max < r_min) {
    throw ParameterError("synth_dataset: dims " + std::to_string(d) + "x" + std::to_string(h) +
                         "x" + std::to_string(w) + " too small for shape radius " +
                         std::to_string(r_min));
  }

  std::vector<VolumeSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(substream_seed(seed, i));
    std::size_t max_shapes = kind == ShapeKind::kNested ? (num_classes - 1) / 2 : num_classes - 1;
    std::size_t n_shapes = 1 + rng.next_below(std::min<std::size_t>(3, max_shapes));

    // distinct foreground classes via a partial shuffle
    std::vector<std::size_t> classes(num_classes - 1);
    for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c + 1;
    for (std::size_t c = 0; c + 1 < classes.size(); ++c) {
      std::size_t j = c + rng.next_below(classes.size() - c);
      std::swap(classes[c], classes[j]);
    }

    std::vector<Ball> shapes;
    std::size_t next_class = 0;
    for (std::size_t s = 0; s < n_shapes; ++s) {
      Ball b;
      b.box = kind == ShapeKind::kBoxes;
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        b.r = rng.next_range(r_min, r_max);
        b.cz = rng.next_range(b.r, double(d - 1) - b.r);
        b.cy = rng.next_range(b.r, double(h - 1) - b.r);
        b.cx = rng.next_range(b.r, double(w - 1) - b.r);
        placed = std::none_of(shapes.begin(), shapes.end(),
                              [&](const Ball& o) { return overlaps(b, o); });
      }
      if (!placed) continue;  // keep whatever fits; at least one always fits
      b.cls = classes[next_class++];
      shapes.push_back(b);
      if (kind == ShapeKind::kNested) {
        Ball core = b;
        core.r = b.r / 2.0;
        core.cls = classes[next_class++];
        shapes.push_back(core);  // painted after its shell, so it wins
      }
    }

    VolumeSample sample;
    sample.num_classes = static_cast<std::uint32_t>(num_classes);
    sample.labels.d = d;
    sample.labels.h = h;
    sample.labels.w = w;
    sample.labels.v.assign(d * h * w, 0);
    std::vector<double> img(d * h * w);
    for (std::size_t z = 0; z < d; ++z) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          std::size_t vi = (z * h + y) * w + x;
          std::size_t cls = 0;
          for (const Ball& b : shapes) {
            if (contains(b, double(z), double(y), double(x))) cls = b.cls;
          }
          sample.labels.v[vi] = static_cast<std::uint8_t>(cls);
          double value = class_intensity(cls, num_classes) + noise_level * rng.next_normal();
          value = std::clamp(value, 0.0, 1.0);
          img[vi] = double(float(value));  // float32 grid for bit-exact file round trips
        }
      }
    }
    sample.image = Tensor(Shape{1, d, h, w}, std::move(img));
    out.push_back(std::move(sample));
  }
  return out;
}

// ---------------------------------------------------------------------------
// file format

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

std::uint32_t take_u32(std::istream& in, std::size_t& offset, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) {
    throw FormatError(path + ": truncated at byte " + std::to_string(offset));
  }
  offset += 4;
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

}  // namespace

void write_volume(const std::string& path, const VolumeSample& s) {
  if (s.image.rank() != 4 || s.image.extent(0) != 1 || s.image.extent(1) != s.labels.d ||
      s.image.extent(2) != s.labels.h || s.image.extent(3) != s.labels.w) {
    throw DimensionError("write_volume: image " + shape_str(s.image.shape()) +
                         " does not match labels");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("write_volume: cannot open '" + path + "'");
  out.write(kMagic, 8);
  put_u32(out, static_cast<std::uint32_t>(s.labels.d));
  put_u32(out, static_cast<std::uint32_t>(s.labels.h));
  put_u32(out, static_cast<std::uint32_t>(s.labels.w));
  put_u32(out, s.num_classes);
  for (double v : s.image.values()) put_f32(out, static_cast<float>(v));
  out.write(reinterpret_cast<const char*>(s.labels.v.data()),
            static_cast<std::streamsize>(s.labels.v.size()));
  if (!out) throw FormatError("write_volume: write failed for '" + path + "'");
}

VolumeSample read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("read_volume: cannot open '" + path + "'");
  std::size_t offset = 0;
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) {
    throw FormatError(path + ": bad magic at byte 0");
  }
  offset = 8;
  std::uint32_t d = take_u32(in, offset, path);
  std::uint32_t h = take_u32(in, offset, path);
  std::uint32_t w = take_u32(in, offset, path);
  std::uint32_t k = take_u32(in, offset, path);
  if (d == 0 || h == 0 || w == 0 || k < 2) {
    throw FormatError(path + ": bad header dims " + std::to_string(d) + "x" + std::to_string(h) +
                      "x" + std::to_string(w) + " K=" + std::to_string(k));
  }
  std::size_t vox = std::size_t(d) * h * w;

  VolumeSample s;
  s.num_classes = k;
  std::vector<double> img(vox);
  for (std::size_t i = 0; i < vox; ++i) {
    std::uint32_t bits = take_u32(in, offset, path);
    float f;
    std::memcpy(&f, &bits, 4);
    img[i] = double(f);
  }
  s.image = Tensor(Shape{1, d, h, w}, std::move(img));
  s.labels.d = d;
  s.labels.h = h;
  s.labels.w = w;
  s.labels.v.resize(vox);
  in.read(reinterpret_cast<char*>(s.labels.v.data()), static_cast<std::streamsize>(vox));
  if (in.gcount() != static_cast<std::streamsize>(vox)) {
    throw FormatError(path + ": truncated at byte " + std::to_string(offset + in.gcount()));
  }
  in.peek();
  if (!in.eof()) throw FormatError(path + ": trailing bytes after voxel data");
  for (std::size_t i = 0; i < vox; ++i) {
    if (s.labels.v[i] >= k) {
      throw FormatError(path + ": label " + std::to_string(s.labels.v[i]) + " >= K=" +
                        std::to_string(k) + " at voxel index " + std::to_string(i));
    }
  }
  return s;
}

}  // namespace dformer
