#include "dformer/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace dformer {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigurationError(msg);
}

}  // namespace

void ModelConfig::validate() const {
  require(num_classes >= 2, "num_classes must be >= 2");
  require(in_channels >= 1, "in_channels must be >= 1");
  require(base_channels >= 1, "base_channels must be >= 1");
  require(mlp_ratio >= 1, "mlp_ratio must be >= 1");
  require(ln_eps > 0.0, "ln_eps must be positive");
  require(patch_w >= 1 && patch_h >= 1 && patch_d >= 1, "patch extents must be positive");
  require(dpe_kernel_d % 2 == 1 && dpe_kernel_h % 2 == 1 && dpe_kernel_w % 2 == 1,
          "dpe kernel extents must be odd");

  // three halvings per axis after patching
  const std::size_t div_w = patch_w * 8, div_h = patch_h * 8, div_d = patch_d * 8;
  require(input_w % div_w == 0, "input_w (" + std::to_string(input_w) +
                                    ") must be divisible by patch_w*8 = " + std::to_string(div_w));
  require(input_h % div_h == 0, "input_h (" + std::to_string(input_h) +
                                    ") must be divisible by patch_h*8 = " + std::to_string(div_h));
  require(input_d % div_d == 0, "input_d (" + std::to_string(input_d) +
                                    ") must be divisible by patch_d*8 = " + std::to_string(div_d));

  for (int s = 0; s < kStages; ++s) {
    require(depths[s] >= 1, "depths must be >= 1 at stage " + std::to_string(s + 1));
    GridDims g = stage_grid(s);
    UnitDims u = stage_unit(s);
    auto check = [&](std::size_t grid, std::size_t unit, const char* axis) {
      require(unit >= 1 && grid % unit == 0, "stage " + std::to_string(s + 1) + " grid " +
                                                 std::to_string(grid) + " not divisible by unit " +
                                                 std::to_string(unit) + " along " + axis);
    };
    check(g.d, u.d, "depth");
    check(g.h, u.h, "height");
    check(g.w, u.w, "width");
    std::size_t c = stage_channels(s);
    require(heads[s] >= 1 && c % heads[s] == 0,
            "stage " + std::to_string(s + 1) + " heads (" + std::to_string(heads[s]) +
                ") must divide channels (" + std::to_string(c) + ")");
  }
}

GridDims ModelConfig::stage_grid(int stage) const {
  GridDims g{input_d / patch_d, input_h / patch_h, input_w / patch_w};
  for (int s = 0; s < stage; ++s) {
    g.d /= 2;
    g.h /= 2;
    g.w /= 2;
  }
  return g;
}

GridDims ModelConfig::grid_for_input(std::size_t in_d, std::size_t in_h, std::size_t in_w) const {
  require(in_d % (patch_d * 8) == 0 && in_h % (patch_h * 8) == 0 && in_w % (patch_w * 8) == 0,
          "input dims " + std::to_string(in_d) + "x" + std::to_string(in_h) + "x" +
              std::to_string(in_w) + " not divisible by patch*8");
  return GridDims{in_d / patch_d, in_h / patch_h, in_w / patch_w};
}

std::size_t ModelConfig::stage_channels(int stage) const {
  return base_channels << stage;
}

UnitDims ModelConfig::stage_unit(int stage) const {
  return UnitDims{unit_d[stage], unit_h[stage], unit_w[stage]};
}

void RunConfig::validate() const {
  model.validate();
  require(lr0 > 0.0, "lr0 must be positive");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(poly_exponent > 0.0, "poly_exponent must be positive");
  require(max_steps >= 1, "max_steps must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(data_count >= batch_size, "data_count must be >= batch_size");
  require(val_count >= 1, "val_count must be >= 1");
  require(noise_level >= 0.0, "noise_level must be >= 0");
  require(eval_every >= 1, "eval_every must be >= 1");
}

std::string shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kSpheres: return "spheres";
    case ShapeKind::kBoxes: return "boxes";
    case ShapeKind::kNested: return "nested";
  }
  return "spheres";
}

ShapeKind shape_kind_from(const std::string& name) {
  if (name == "spheres") return ShapeKind::kSpheres;
  if (name == "boxes") return ShapeKind::kBoxes;
  if (name == "nested") return ShapeKind::kNested;
  throw ConfigurationError("unknown shape kind '" + name + "' (spheres|boxes|nested)");
}

// ---------------------------------------------------------------------------
// parsing

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigurationError("config key '" + key + "': bad integer '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigurationError("config key '" + key + "': bad integer '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigurationError("config key '" + key + "': bad number '" + v + "'");
  }
}

std::array<std::size_t, 4> parse_size4(const std::string& key, const std::string& v) {
  std::array<std::size_t, 4> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 4) throw ConfigurationError("config key '" + key + "': expected 4 values");
    out[i++] = parse_size(key, trim(item));
  }
  if (i != 4) throw ConfigurationError("config key '" + key + "': expected 4 values, got " +
                                       std::to_string(i));
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& model_setters() {
  static const std::map<std::string, Setter> m = {
      {"input_w", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.input_w = parse_size(k, v); }},
      {"input_h", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.input_h = parse_size(k, v); }},
      {"input_d", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.input_d = parse_size(k, v); }},
      {"in_channels", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.in_channels = parse_size(k, v); }},
      {"num_classes", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.num_classes = parse_size(k, v); }},
      {"base_channels", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.base_channels = parse_size(k, v); }},
      {"patch_w", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.patch_w = parse_size(k, v); }},
      {"patch_h", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.patch_h = parse_size(k, v); }},
      {"patch_d", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.patch_d = parse_size(k, v); }},
      {"depths", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.depths = parse_size4(k, v); }},
      {"heads", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.heads = parse_size4(k, v); }},
      {"unit_d", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.unit_d = parse_size4(k, v); }},
      {"unit_h", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.unit_h = parse_size4(k, v); }},
      {"unit_w", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.unit_w = parse_size4(k, v); }},
      {"mlp_ratio", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.mlp_ratio = parse_size(k, v); }},
      {"dpe_kernel_d", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.dpe_kernel_d = parse_size(k, v); }},
      {"dpe_kernel_h", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.dpe_kernel_h = parse_size(k, v); }},
      {"dpe_kernel_w", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.dpe_kernel_w = parse_size(k, v); }},
      {"ln_eps", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.ln_eps = parse_double(k, v); }},
      {"head_channels", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.head_channels = parse_size(k, v); }},
  };
  return m;
}

const std::map<std::string, Setter>& run_setters() {
  static const std::map<std::string, Setter> m = {
      {"lr0", [](RunConfig& c, const std::string& k, const std::string& v) { c.lr0 = parse_double(k, v); }},
      {"momentum", [](RunConfig& c, const std::string& k, const std::string& v) { c.momentum = parse_double(k, v); }},
      {"weight_decay", [](RunConfig& c, const std::string& k, const std::string& v) { c.weight_decay = parse_double(k, v); }},
      {"poly_exponent", [](RunConfig& c, const std::string& k, const std::string& v) { c.poly_exponent = parse_double(k, v); }},
      {"max_steps", [](RunConfig& c, const std::string& k, const std::string& v) { c.max_steps = parse_size(k, v); }},
      {"batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.batch_size = parse_size(k, v); }},
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); }},
      {"data_count", [](RunConfig& c, const std::string& k, const std::string& v) { c.data_count = parse_size(k, v); }},
      {"val_count", [](RunConfig& c, const std::string& k, const std::string& v) { c.val_count = parse_size(k, v); }},
      {"data_kind", [](RunConfig& c, const std::string&, const std::string& v) { c.data_kind = shape_kind_from(v); }},
      {"noise_level", [](RunConfig& c, const std::string& k, const std::string& v) { c.noise_level = parse_double(k, v); }},
      {"eval_every", [](RunConfig& c, const std::string& k, const std::string& v) { c.eval_every = parse_size(k, v); }},
      {"target_dsc", [](RunConfig& c, const std::string& k, const std::string& v) { c.target_dsc = parse_double(k, v); }},
  };
  return m;
}

void apply_lines(const std::string& text, RunConfig& cfg, bool model_keys_only) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigurationError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    auto mit = model_setters().find(key);
    if (mit != model_setters().end()) {
      mit->second(cfg, key, value);
      continue;
    }
    if (!model_keys_only) {
      auto rit = run_setters().find(key);
      if (rit != run_setters().end()) {
        rit->second(cfg, key, value);
        continue;
      }
    }
    throw ConfigurationError("unknown config key '" + key + "' on line " + std::to_string(lineno));
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt4(const std::array<std::size_t, 4>& a) {
  std::ostringstream os;
  for (int i = 0; i < 4; ++i) {
    if (i) os << ',';
    os << a[i];
  }
  return os.str();
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  apply_lines(text, cfg, false);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_model_config(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "input_w = " << cfg.input_w << '\n';
  os << "input_h = " << cfg.input_h << '\n';
  os << "input_d = " << cfg.input_d << '\n';
  os << "in_channels = " << cfg.in_channels << '\n';
  os << "num_classes = " << cfg.num_classes << '\n';
  os << "base_channels = " << cfg.base_channels << '\n';
  os << "patch_w = " << cfg.patch_w << '\n';
  os << "patch_h = " << cfg.patch_h << '\n';
  os << "patch_d = " << cfg.patch_d << '\n';
  os << "depths = " << fmt4(cfg.depths) << '\n';
  os << "heads = " << fmt4(cfg.heads) << '\n';
  os << "unit_d = " << fmt4(cfg.unit_d) << '\n';
  os << "unit_h = " << fmt4(cfg.unit_h) << '\n';
  os << "unit_w = " << fmt4(cfg.unit_w) << '\n';
  os << "mlp_ratio = " << cfg.mlp_ratio << '\n';
  os << "dpe_kernel_d = " << cfg.dpe_kernel_d << '\n';
  os << "dpe_kernel_h = " << cfg.dpe_kernel_h << '\n';
  os << "dpe_kernel_w = " << cfg.dpe_kernel_w << '\n';
  os << "ln_eps = " << fmt_double(cfg.ln_eps) << '\n';
  os << "head_channels = " << cfg.head_channels << '\n';
  return os.str();
}

ModelConfig parse_model_config(const std::string& text) {
  RunConfig cfg;
  apply_lines(text, cfg, true);
  cfg.model.validate();
  return cfg.model;
}

}  // namespace dformer
