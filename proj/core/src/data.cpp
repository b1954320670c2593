#include "sartm/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

SARTM_NS_BEGIN

namespace fs = std::filesystem;

void SceneSpec::validate() const {
  if (num_classes < 2 || num_classes > 16) {
    throw ConfigError("scene: num_classes " + std::to_string(num_classes) +
                      " outside [2,16]");
  }
  if (height < 16 || width < 16) throw ConfigError("scene: raster too small");
  if (min_objects < 1 || max_objects < min_objects) {
    throw ConfigError("scene: bad object count range");
  }
}

double SceneSpec::thermal_mean(int cls) const {
  if (cls == 0) return 0.15;
  if (num_classes == 2) return 0.75;
  // Evenly spaced bands over [0.35, 0.9] for the object classes.
  return 0.35 + 0.55 * static_cast<double>(cls - 1) /
                    static_cast<double>(num_classes - 2);
}

std::array<double, 3> SceneSpec::class_color(int cls) const {
  Rng rng = Rng::stream(static_cast<uint64_t>(cls), "palette");
  if (cls == 0) {
    return {0.32 + 0.1 * rng.uniform(), 0.36 + 0.1 * rng.uniform(),
            0.30 + 0.1 * rng.uniform()};
  }
  return {0.25 + 0.65 * rng.uniform(), 0.25 + 0.65 * rng.uniform(),
          0.25 + 0.65 * rng.uniform()};
}

namespace {

uint8_t quantize(double v) {
  double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<uint8_t>(q);
}

void fill_rect(LabelMap& lab, Rng& rng, int32_t cls) {
  const int64_t h = lab.height, w = lab.width;
  const int64_t rh = 8 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(h / 3)));
  const int64_t rw = 8 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(w / 3)));
  const int64_t y0 = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(h - rh)));
  const int64_t x0 = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(w - rw)));
  for (int64_t y = y0; y < y0 + rh; ++y)
    for (int64_t x = x0; x < x0 + rw; ++x)
      lab.values[static_cast<size_t>(y * w + x)] = cls;
}

void fill_ellipse(LabelMap& lab, Rng& rng, int32_t cls) {
  const int64_t h = lab.height, w = lab.width;
  const double a = 5.0 + rng.uniform() * static_cast<double>(w) / 6.0;
  const double b = 5.0 + rng.uniform() * static_cast<double>(h) / 6.0;
  const double cx = a + rng.uniform() * (static_cast<double>(w) - 2 * a);
  const double cy = b + rng.uniform() * (static_cast<double>(h) - 2 * b);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - cx) / a;
      const double dy = (static_cast<double>(y) + 0.5 - cy) / b;
      if (dx * dx + dy * dy <= 1.0)
        lab.values[static_cast<size_t>(y * w + x)] = cls;
    }
  }
}

void fill_polyline(LabelMap& lab, Rng& rng, int32_t cls) {
  const int64_t h = lab.height, w = lab.width;
  const double thick = 2.0 + 2.0 * rng.uniform();
  double px = rng.uniform() * static_cast<double>(w - 1);
  double py = rng.uniform() * static_cast<double>(h - 1);
  for (int seg = 0; seg < 2; ++seg) {
    const double qx = rng.uniform() * static_cast<double>(w - 1);
    const double qy = rng.uniform() * static_cast<double>(h - 1);
    const double vx = qx - px, vy = qy - py;
    const double len2 = std::max(vx * vx + vy * vy, 1e-9);
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - px;
        const double dy = static_cast<double>(y) - py;
        double t = std::clamp((dx * vx + dy * vy) / len2, 0.0, 1.0);
        const double ex = dx - t * vx, ey = dy - t * vy;
        if (ex * ex + ey * ey <= thick * thick)
          lab.values[static_cast<size_t>(y * w + x)] = cls;
      }
    }
    px = qx;
    py = qy;
  }
}

}  // namespace

ModalitySample generate_scene(const SceneSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng = Rng::stream(seed, "scene");
  const int64_t h = spec.height, w = spec.width;
  const int64_t t = h * w;

  ModalitySample out;
  out.seed = seed;
  out.night = rng.uniform() < spec.night_fraction;

  LabelMap lab;
  lab.height = h;
  lab.width = w;
  lab.values.assign(static_cast<size_t>(t), 0);
  const int objects =
      spec.min_objects +
      static_cast<int>(rng.uniform_int(
          static_cast<uint64_t>(spec.max_objects - spec.min_objects + 1)));
  for (int i = 0; i < objects; ++i) {
    const int32_t cls =
        1 + static_cast<int32_t>(rng.uniform_int(
                static_cast<uint64_t>(spec.num_classes - 1)));
    switch (rng.uniform_int(3)) {
      case 0: fill_rect(lab, rng, cls); break;
      case 1: fill_ellipse(lab, rng, cls); break;
      default: fill_polyline(lab, rng, cls); break;
    }
  }
  // Ignore band along the frame border.
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (y < spec.border_ignore || y >= h - spec.border_ignore ||
          x < spec.border_ignore || x >= w - spec.border_ignore) {
        lab.values[static_cast<size_t>(y * w + x)] = kIgnoreLabel;
      }
    }
  }
  out.label = lab;

  // Rasters are synthesized as bytes so that file round-trips are exact.
  std::vector<uint8_t> thermal_bytes(static_cast<size_t>(t));
  std::vector<uint8_t> rgb_bytes(static_cast<size_t>(3 * t));
  const double illum = out.night ? spec.night_luma * (0.8 + 0.4 * rng.uniform())
                                 : 0.8 + 0.2 * rng.uniform();
  const double rgb_noise = out.night ? spec.rgb_noise_night : spec.rgb_noise_day;
  for (int64_t p = 0; p < t; ++p) {
    int32_t cls = lab.values[static_cast<size_t>(p)];
    // The ignore band is rendered as background; only the label is masked.
    if (cls == kIgnoreLabel) cls = 0;
    thermal_bytes[static_cast<size_t>(p)] = quantize(
        spec.thermal_mean(cls) + spec.thermal_noise * rng.normal());
    const auto color = spec.class_color(cls);
    for (int c = 0; c < 3; ++c) {
      rgb_bytes[static_cast<size_t>(c * t + p)] =
          quantize(color[static_cast<size_t>(c)] * illum + rgb_noise * rng.normal());
    }
  }

  out.thermal = Tensor::zeros({1, h, w});
  auto& tv = out.thermal.data_mut();
  for (int64_t p = 0; p < t; ++p)
    tv[static_cast<size_t>(p)] =
        static_cast<Scalar>(thermal_bytes[static_cast<size_t>(p)] / 255.0);
  out.rgb = Tensor::zeros({3, h, w});
  auto& rv = out.rgb.data_mut();
  for (int64_t i = 0; i < 3 * t; ++i)
    rv[static_cast<size_t>(i)] =
        static_cast<Scalar>(rgb_bytes[static_cast<size_t>(i)] / 255.0);
  return out;
}

ModalitySample flip_horizontal(const ModalitySample& s) {
  const int64_t h = s.label.height, w = s.label.width;
  ModalitySample out;
  out.seed = s.seed;
  out.night = s.night;
  out.label.height = h;
  out.label.width = w;
  out.label.values.resize(static_cast<size_t>(h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      out.label.values[static_cast<size_t>(y * w + x)] = s.label.at(y, w - 1 - x);

  auto flip_tensor = [&](const Tensor& src) {
    Tensor dst = Tensor::zeros(src.shape());
    const int64_t c = src.dim(0);
    const auto& sv = src.data();
    auto& dv = dst.data_mut();
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          dv[static_cast<size_t>((ch * h + y) * w + x)] =
              sv[static_cast<size_t>((ch * h + y) * w + (w - 1 - x))];
    return dst;
  };
  out.rgb = flip_tensor(s.rgb);
  out.thermal = flip_tensor(s.thermal);
  return out;
}

// --- PNM ---

namespace {

struct Cursor {
  const std::vector<char>& buf;
  size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("pnm: " + what + " at byte " + std::to_string(pos));
  }
  int peek() const {
    return pos < buf.size() ? static_cast<unsigned char>(buf[pos]) : -1;
  }
  void skip_space_and_comments() {
    while (pos < buf.size()) {
      const int c = peek();
      if (c == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(c)) {
        ++pos;
      } else {
        break;
      }
    }
  }
  int64_t read_int() {
    skip_space_and_comments();
    if (pos >= buf.size() || !std::isdigit(peek())) fail("expected integer");
    int64_t v = 0;
    while (pos < buf.size() && std::isdigit(peek())) {
      v = v * 10 + (buf[pos] - '0');
      ++pos;
    }
    return v;
  }
};

}  // namespace

void write_pnm(const fs::path& path, const RasterU8& raster) {
  if (raster.channels != 1 && raster.channels != 3) {
    throw ConfigError("pnm: channels must be 1 or 3");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("pnm: cannot open " + path.string() + " for writing");
  f << (raster.channels == 3 ? "P6" : "P5") << "\n"
    << raster.width << " " << raster.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(raster.bytes.data()),
          static_cast<std::streamsize>(raster.bytes.size()));
}

RasterU8 read_pnm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("pnm: cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
  Cursor cur{buf};
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
    cur.fail("bad magic (want P5 or P6)");
  }
  RasterU8 out;
  out.channels = buf[1] == '6' ? 3 : 1;
  cur.pos = 2;
  out.width = cur.read_int();
  out.height = cur.read_int();
  const int64_t maxval = cur.read_int();
  if (out.width < 1 || out.height < 1) cur.fail("bad dimensions");
  if (maxval != 255) cur.fail("maxval must be 255");
  if (cur.pos >= buf.size() || !std::isspace(cur.peek())) {
    cur.fail("expected whitespace before payload");
  }
  ++cur.pos;  // single whitespace byte, then raw payload
  const size_t expected =
      static_cast<size_t>(out.width * out.height * out.channels);
  const size_t actual = buf.size() - cur.pos;
  if (actual != expected) {
    throw ParseError("pnm: payload of " + path.string() + " has " +
                     std::to_string(actual) + " bytes, expected " +
                     std::to_string(expected) + " at byte " +
                     std::to_string(cur.pos));
  }
  out.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(cur.pos), buf.end());
  return out;
}

RasterU8 to_raster(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3)) {
    throw ShapeError("to_raster: expected [1|3,H,W], got " + shape_str(s));
  }
  RasterU8 out;
  out.channels = static_cast<int>(s[0]);
  out.height = s[1];
  out.width = s[2];
  const int64_t t = s[1] * s[2];
  out.bytes.resize(static_cast<size_t>(out.channels * t));
  const auto& v = image.data();
  // Planar tensor -> interleaved bytes.
  for (int64_t p = 0; p < t; ++p)
    for (int c = 0; c < out.channels; ++c)
      out.bytes[static_cast<size_t>(p * out.channels + c)] =
          quantize(static_cast<double>(v[static_cast<size_t>(c * t + p)]));
  return out;
}

Tensor from_raster(const RasterU8& raster) {
  const int64_t t = raster.height * raster.width;
  Tensor out = Tensor::zeros({raster.channels, raster.height, raster.width});
  auto& v = out.data_mut();
  for (int64_t p = 0; p < t; ++p)
    for (int c = 0; c < raster.channels; ++c)
      v[static_cast<size_t>(c * t + p)] = static_cast<Scalar>(
          raster.bytes[static_cast<size_t>(p * raster.channels + c)] / 255.0);
  return out;
}

RasterU8 label_raster(const LabelMap& labels) {
  RasterU8 out;
  out.channels = 1;
  out.height = labels.height;
  out.width = labels.width;
  out.bytes.resize(static_cast<size_t>(labels.numel()));
  for (size_t i = 0; i < out.bytes.size(); ++i) {
    const int32_t v = labels.values[i];
    if (v < 0 || v > 255) {
      throw ConfigError("label_raster: value " + std::to_string(v) +
                        " not storable as a byte");
    }
    out.bytes[i] = static_cast<uint8_t>(v);
  }
  return out;
}

LabelMap label_from_raster(const RasterU8& raster) {
  if (raster.channels != 1) {
    throw ParseError("labels: expected a single-channel raster");
  }
  LabelMap out;
  out.height = raster.height;
  out.width = raster.width;
  out.values.resize(raster.bytes.size());
  for (size_t i = 0; i < raster.bytes.size(); ++i)
    out.values[i] = raster.bytes[i];
  return out;
}

// --- teacher embeddings ---

Tensor gen_embeddings(const std::vector<std::string>& class_names, int dim,
                      uint64_t seed) {
  for (size_t i = 0; i < class_names.size(); ++i) {
    for (size_t j = i + 1; j < class_names.size(); ++j) {
      if (class_names[i] == class_names[j]) {
        throw ConfigError("embeddings: duplicate class name '" + class_names[i] +
                          "'");
      }
    }
  }
  const int64_t c = static_cast<int64_t>(class_names.size());
  Tensor out = Tensor::zeros({c, dim});
  auto& v = out.data_mut();
  for (int64_t k = 0; k < c; ++k) {
    Rng rng = Rng::stream(seed, class_names[static_cast<size_t>(k)]);
    double norm2 = 0;
    std::vector<double> row(static_cast<size_t>(dim));
    for (int j = 0; j < dim; ++j) {
      row[static_cast<size_t>(j)] = rng.normal();
      norm2 += row[static_cast<size_t>(j)] * row[static_cast<size_t>(j)];
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (int j = 0; j < dim; ++j)
      v[static_cast<size_t>(k * dim + j)] =
          static_cast<Scalar>(row[static_cast<size_t>(j)] * inv);
  }
  return out;
}

namespace {

void put_f32_le(std::vector<uint8_t>& out, float f) {
  const uint32_t bits = std::bit_cast<uint32_t>(f);
  out.push_back(static_cast<uint8_t>(bits & 0xff));
  out.push_back(static_cast<uint8_t>((bits >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((bits >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((bits >> 24) & 0xff));
}

float get_f32_le(const uint8_t* p) {
  const uint32_t bits = static_cast<uint32_t>(p[0]) |
                        (static_cast<uint32_t>(p[1]) << 8) |
                        (static_cast<uint32_t>(p[2]) << 16) |
                        (static_cast<uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace

void write_embeddings(const fs::path& path, const Tensor& table) {
  if (table.rank() != 2) {
    throw ShapeError("embeddings: expected [C,e], got " + shape_str(table.shape()));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("embeddings: cannot open " + path.string());
  f << "SARTM-EMB v1 " << table.dim(0) << " " << table.dim(1) << "\n";
  std::vector<uint8_t> payload;
  payload.reserve(static_cast<size_t>(table.numel()) * 4);
  for (Scalar s : table.data()) put_f32_le(payload, static_cast<float>(s));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
}

Tensor read_embeddings(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("embeddings: cannot open " + path.string());
  std::string header;
  std::getline(f, header);
  std::istringstream hs(header);
  std::string magic, version;
  int64_t c = 0, e = 0;
  hs >> magic >> version >> c >> e;
  if (magic != "SARTM-EMB" || version != "v1" || c < 1 || e < 1) {
    throw ParseError("embeddings: bad header '" + header + "' at byte 0");
  }
  std::vector<uint8_t> payload((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
  const size_t expected = static_cast<size_t>(c * e) * 4;
  if (payload.size() != expected) {
    throw ParseError("embeddings: payload has " + std::to_string(payload.size()) +
                     " bytes, expected " + std::to_string(expected) +
                     " at byte " + std::to_string(header.size() + 1));
  }
  Tensor out = Tensor::zeros({c, e});
  auto& v = out.data_mut();
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<Scalar>(get_f32_le(payload.data() + i * 4));
  return out;
}

// --- dataset directory ---

std::vector<std::string> default_class_names(int num_classes) {
  static const std::vector<std::string> pool = {
      "person", "car",  "bike",  "cone",  "curve",      "bump",
      "pole",   "sign", "truck", "lamp",  "vegetation", "building",
      "fence",  "bench", "hydrant"};
  std::vector<std::string> names = {"background"};
  for (int i = 1; i < num_classes; ++i)
    names.push_back(pool[static_cast<size_t>(i - 1) % pool.size()]);
  return names;
}

namespace {

std::string scene_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05d", index);
  return buf;
}

void write_sample(const fs::path& root, const std::string& id,
                  const ModalitySample& s) {
  write_pnm(root / "rgb" / (id + ".ppm"), to_raster(s.rgb));
  write_pnm(root / "thermal" / (id + ".pgm"), to_raster(s.thermal));
  write_pnm(root / "labels" / (id + ".pgm"), label_raster(s.label));
}

ModalitySample read_sample(const fs::path& root, const std::string& id) {
  ModalitySample s;
  s.rgb = from_raster(read_pnm(root / "rgb" / (id + ".ppm")));
  s.thermal = from_raster(read_pnm(root / "thermal" / (id + ".pgm")));
  s.label = label_from_raster(read_pnm(root / "labels" / (id + ".pgm")));
  return s;
}

}  // namespace

void write_dataset(const fs::path& root, const SceneSpec& spec, int train_scenes,
                   int val_scenes, uint64_t base_seed,
                   const std::vector<std::string>& class_names) {
  spec.validate();
  if (static_cast<int>(class_names.size()) != spec.num_classes) {
    throw ConfigError("dataset: " + std::to_string(class_names.size()) +
                      " class names for " + std::to_string(spec.num_classes) +
                      " classes");
  }
  fs::create_directories(root / "rgb");
  fs::create_directories(root / "thermal");
  fs::create_directories(root / "labels");
  fs::create_directories(root / "splits");

  std::ofstream classes(root / "classes.txt");
  for (const auto& n : class_names) classes << n << "\n";

  std::ofstream train_manifest(root / "splits" / "train.txt");
  std::ofstream val_manifest(root / "splits" / "val.txt");
  for (int i = 0; i < train_scenes + val_scenes; ++i) {
    const std::string id = scene_id(i);
    write_sample(root, id, generate_scene(spec, base_seed + static_cast<uint64_t>(i)));
    (i < train_scenes ? train_manifest : val_manifest) << id << "\n";
  }
}

Dataset load_dataset(const fs::path& root) {
  std::vector<std::string> missing;
  for (const char* p : {"classes.txt", "splits/train.txt", "splits/val.txt"}) {
    if (!fs::exists(root / p)) missing.push_back((root / p).string());
  }
  if (!missing.empty()) {
    std::string msg = "dataset: missing files:";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }

  Dataset ds;
  std::ifstream classes(root / "classes.txt");
  std::string line;
  while (std::getline(classes, line)) {
    if (!line.empty()) ds.class_names.push_back(line);
  }

  auto load_split = [&](const char* name, std::vector<ModalitySample>& out) {
    std::ifstream manifest(root / "splits" / name);
    std::string id;
    while (std::getline(manifest, id)) {
      if (id.empty()) continue;
      out.push_back(read_sample(root, id));
    }
  };
  load_split("train.txt", ds.train);
  load_split("val.txt", ds.val);
  if (ds.train.empty()) throw ConfigError("dataset: empty train split");
  ds.height = ds.train[0].label.height;
  ds.width = ds.train[0].label.width;
  return ds;
}

SARTM_NS_END
