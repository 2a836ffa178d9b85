#include "cfanet/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

namespace cfanet {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with little-endian memcpy");

std::string to_string(Layout l) {
  switch (l) {
    case Layout::kUniform: return "uniform";
    case Layout::kClustered: return "clustered";
    case Layout::kGradient: return "gradient";
  }
  return "?";
}

Layout parse_layout(const std::string& s) {
  if (s == "uniform") return Layout::kUniform;
  if (s == "clustered") return Layout::kClustered;
  if (s == "gradient") return Layout::kGradient;
  throw InvalidArgument("unknown layout '" + s + "'");
}

std::string to_string(Background b) {
  switch (b) {
    case Background::kFlat: return "flat";
    case Background::kTexturedNoise: return "textured-noise";
    case Background::kGeometricClutter: return "geometric-clutter";
  }
  return "?";
}

Background parse_background(const std::string& s) {
  if (s == "flat") return Background::kFlat;
  if (s == "textured-noise") return Background::kTexturedNoise;
  if (s == "geometric-clutter") return Background::kGeometricClutter;
  throw InvalidArgument("unknown background '" + s + "'");
}

int max_people(int64_t width, int64_t height) {
  return static_cast<int>(width * height / 16);
}

std::vector<int> multinomial_counts(std::mt19937_64& rng, int n, int k) {
  std::vector<int> counts(static_cast<size_t>(k), 0);
  std::uniform_int_distribution<int> pick(0, k - 1);
  for (int i = 0; i < n; ++i) ++counts[pick(rng)];
  return counts;
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Uniform in [0, limit), guarding against the distribution returning limit.
double coordinate(std::mt19937_64& rng, double limit) {
  double v = uniform(rng, 0.0, limit);
  while (v >= limit) v = uniform(rng, 0.0, limit);
  return v;
}

using Canvas = std::vector<double>;

void value_noise(Canvas& img, int64_t w, int64_t h, std::mt19937_64& rng,
                 double amplitude, int64_t step) {
  const int64_t gw = w / step + 2;
  const int64_t gh = h / step + 2;
  std::vector<double> grid(static_cast<size_t>(gw * gh));
  for (auto& g : grid) g = uniform(rng, -amplitude, amplitude);
  for (int64_t y = 0; y < h; ++y) {
    const double gy = static_cast<double>(y) / static_cast<double>(step);
    const auto y0 = static_cast<int64_t>(gy);
    const double fy = gy - static_cast<double>(y0);
    for (int64_t x = 0; x < w; ++x) {
      const double gx = static_cast<double>(x) / static_cast<double>(step);
      const auto x0 = static_cast<int64_t>(gx);
      const double fx = gx - static_cast<double>(x0);
      const double a = grid[y0 * gw + x0];
      const double b = grid[y0 * gw + x0 + 1];
      const double c = grid[(y0 + 1) * gw + x0];
      const double d = grid[(y0 + 1) * gw + x0 + 1];
      img[y * w + x] += (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d);
    }
  }
}

void draw_clutter(Canvas& img, int64_t w, int64_t h, std::mt19937_64& rng) {
  const int shapes = 6 + static_cast<int>(w * h / 1500);
  for (int s = 0; s < shapes; ++s) {
    const double shade = uniform(rng, 0.15, 0.45);
    const int kind = static_cast<int>(rng() % 3);
    if (kind == 0) {  // filled rectangle
      const double rw = uniform(rng, 4, 16);
      const double rh = uniform(rng, 4, 16);
      const double x0 = uniform(rng, -rw / 2, static_cast<double>(w));
      const double y0 = uniform(rng, -rh / 2, static_cast<double>(h));
      for (int64_t y = std::max<int64_t>(0, std::lround(y0));
           y < std::min<int64_t>(h, std::lround(y0 + rh)); ++y)
        for (int64_t x = std::max<int64_t>(0, std::lround(x0));
             x < std::min<int64_t>(w, std::lround(x0 + rw)); ++x)
          img[y * w + x] = shade;
    } else if (kind == 1) {  // line segment, 1-2 px thick
      const double x0 = uniform(rng, 0, static_cast<double>(w));
      const double y0 = uniform(rng, 0, static_cast<double>(h));
      const double angle = uniform(rng, 0, 3.14159265358979);
      const double len = uniform(rng, 10, 40);
      const double thick = uniform(rng, 0.6, 1.2);
      const double dx = std::cos(angle);
      const double dy = std::sin(angle);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const double px = x + 0.5 - x0;
          const double py = y + 0.5 - y0;
          const double along = px * dx + py * dy;
          const double across = std::abs(-px * dy + py * dx);
          if (along >= 0 && along <= len && across <= thick) img[y * w + x] = shade;
        }
    } else {  // dark disk larger than a head
      const double cx = uniform(rng, 0, static_cast<double>(w));
      const double cy = uniform(rng, 0, static_cast<double>(h));
      const double r = uniform(rng, 4, 8);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const double ddx = x + 0.5 - cx;
          const double ddy = y + 0.5 - cy;
          if (ddx * ddx + ddy * ddy <= r * r) img[y * w + x] = shade;
        }
    }
  }
}

std::vector<Point> sample_points(const SceneSpec& spec, std::mt19937_64& rng,
                                 std::vector<int>& cluster_sizes) {
  const auto w = static_cast<double>(spec.width);
  const auto h = static_cast<double>(spec.height);
  std::vector<Point> pts;
  pts.reserve(static_cast<size_t>(spec.n_people));
  switch (spec.layout) {
    case Layout::kUniform:
      for (int i = 0; i < spec.n_people; ++i) {
        const double x = coordinate(rng, w);
        pts.push_back({x, coordinate(rng, h)});
      }
      break;
    case Layout::kClustered: {
      cluster_sizes = multinomial_counts(rng, spec.n_people, spec.clusters);
      const double scale = std::min(w, h);
      for (const int count : cluster_sizes) {
        const double cx = uniform(rng, 0.15 * w, 0.85 * w);
        const double cy = uniform(rng, 0.15 * h, 0.85 * h);
        std::normal_distribution<double> spread(0.0, uniform(rng, 0.06, 0.12) * scale);
        for (int i = 0; i < count; ++i) {
          Point p;
          do {
            p = {cx + spread(rng), cy + spread(rng)};
          } while (!(p.x >= 0 && p.x < w && p.y >= 0 && p.y < h));
          pts.push_back(p);
        }
      }
      break;
    }
    case Layout::kGradient:
      // Density along x proportional to (0.1 + x / w); inverse-CDF sampling.
      for (int i = 0; i < spec.n_people; ++i) {
        const double u = uniform(rng, 0.0, 1.0);
        const double a = 0.1;
        const double t = -a + std::sqrt(a * a + u * (2 * a + 1));
        double x = std::min(t * w, std::nextafter(w, 0.0));
        pts.push_back({x, coordinate(rng, h)});
      }
      break;
  }
  return pts;
}

void draw_heads(Canvas& img, int64_t w, int64_t h, const std::vector<Point>& pts,
                const SceneSpec& spec, std::mt19937_64& rng) {
  for (const auto& p : pts) {
    const double rx = uniform(rng, spec.head_radius_min, spec.head_radius_max);
    const double ry = rx * uniform(rng, 1.0, 1.3);
    const double shade = uniform(rng, 0.05, 0.25);
    const auto x0 = std::max<int64_t>(0, static_cast<int64_t>(p.x - rx - 2));
    const auto x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(p.x + rx + 2));
    const auto y0 = std::max<int64_t>(0, static_cast<int64_t>(p.y - ry - 2));
    const auto y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(p.y + ry + 2));
    for (int64_t y = y0; y <= y1; ++y) {
      for (int64_t x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5 - p.x) / rx;
        const double dy = (y + 0.5 - p.y) / ry;
        const double r = std::sqrt(dx * dx + dy * dy);
        // Anti-aliased edge about one pixel wide.
        const double alpha = std::clamp((1.0 - r) * rx + 0.5, 0.0, 1.0);
        double& v = img[y * w + x];
        v = (1.0 - alpha) * v + alpha * shade;
      }
    }
  }
}

uint64_t mix_seed(uint64_t seed, uint64_t index) {
  // splitmix64 finalizer
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Scene generate_scene(const SceneSpec& spec) {
  if (spec.width < 1 || spec.height < 1) throw InvalidArgument("scene size must be positive");
  if (spec.n_people < 0) throw InvalidArgument("n_people must be non-negative");
  if (spec.n_people > max_people(spec.width, spec.height)) {
    throw InvalidArgument("cannot place " + std::to_string(spec.n_people) + " people in a " +
                          std::to_string(spec.width) + "x" + std::to_string(spec.height) +
                          " scene (max " +
                          std::to_string(max_people(spec.width, spec.height)) + ")");
  }
  if (!(spec.head_radius_min > 0 && spec.head_radius_min <= spec.head_radius_max)) {
    throw InvalidArgument("invalid head radius range");
  }
  if (spec.clusters < 1) throw InvalidArgument("clusters must be >= 1");

  std::mt19937_64 rng(spec.seed);
  const int64_t w = spec.width;
  const int64_t h = spec.height;
  Canvas img(static_cast<size_t>(w * h), 0.75);
  if (spec.background != Background::kFlat) {
    for (auto& v : img) v = 0.7;
    value_noise(img, w, h, rng, 0.15, 12);
    for (auto& v : img) v += uniform(rng, -0.04, 0.04);
  }
  if (spec.background == Background::kGeometricClutter) draw_clutter(img, w, h, rng);

  Scene scene;
  const auto points = sample_points(spec, rng, scene.cluster_sizes);
  draw_heads(img, w, h, points, spec, rng);

  scene.sample.image = Tensor<float>(Shape{1, 3, h, w});
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < w * h; ++i) {
      const double q = std::round(std::clamp(img[i], 0.0, 1.0) * 255.0);
      scene.sample.image.data[c * w * h + i] = static_cast<float>(q / 255.0);
    }
  }
  scene.sample.annotation.width = w;
  scene.sample.annotation.height = h;
  scene.sample.annotation.points = points;
  return scene;
}

std::vector<Sample> synth_dataset(const SynthOptions& options) {
  if (options.count < 0) throw InvalidArgument("synth count must be non-negative");
  if (options.min_people < 0 || options.min_people > options.max_people) {
    throw InvalidArgument("invalid people range");
  }
  std::mt19937_64 rng(mix_seed(options.seed, 0xC0FFEE));
  std::vector<Sample> out;
  for (int i = 0; i < options.count; ++i) {
    SceneSpec spec;
    spec.width = options.width;
    spec.height = options.height;
    spec.n_people =
        std::uniform_int_distribution<int>(options.min_people, options.max_people)(rng);
    static const Layout layouts[] = {Layout::kUniform, Layout::kClustered, Layout::kGradient};
    static const Background backgrounds[] = {Background::kFlat, Background::kTexturedNoise,
                                             Background::kGeometricClutter};
    spec.layout = options.layout == "mixed" ? layouts[i % 3] : parse_layout(options.layout);
    spec.background = options.background == "mixed" ? backgrounds[(i / 3) % 3]
                                                    : parse_background(options.background);
    spec.head_radius_min = options.head_radius_min;
    spec.head_radius_max = options.head_radius_max;
    spec.seed = mix_seed(options.seed, static_cast<uint64_t>(i));
    Scene scene = generate_scene(spec);
    std::ostringstream id;
    id << "scene_" << std::setw(4) << std::setfill('0') << i;
    scene.sample.annotation.image_id = id.str();
    out.push_back(std::move(scene.sample));
  }
  return out;
}

// ---- PNM -------------------------------------------------------------------

namespace {

std::vector<uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::vector<uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

std::vector<uint8_t> pnm_header(const char* magic, int64_t w, int64_t h, int maxval) {
  const std::string s = std::string(magic) + "\n" + std::to_string(w) + " " +
                        std::to_string(h) + "\n" + std::to_string(maxval) + "\n";
  return std::vector<uint8_t>(s.begin(), s.end());
}

}  // namespace

void write_pgm_bytes(const fs::path& path, int64_t width, int64_t height,
                     const std::vector<uint8_t>& bytes, int maxval) {
  if (bytes.size() != static_cast<size_t>(width * height)) {
    throw InvalidArgument("write_pgm_bytes: size mismatch");
  }
  auto out = pnm_header("P5", width, height, maxval);
  out.insert(out.end(), bytes.begin(), bytes.end());
  write_file(path, out);
}

void write_pnm(const fs::path& path, const Tensor<float>& image) {
  const Shape s = image.shape;
  if (s.n != 1 || (s.c != 1 && s.c != 3)) {
    throw InvalidArgument("write_pnm: expected (1, 1|3, h, w), got " + s.str());
  }
  auto out = pnm_header(s.c == 3 ? "P6" : "P5", s.w, s.h, 255);
  const size_t plane = s.plane();
  for (size_t i = 0; i < plane; ++i) {
    for (int64_t c = 0; c < s.c; ++c) {
      const float v = std::clamp(image.data[c * plane + i], 0.0f, 1.0f);
      out.push_back(static_cast<uint8_t>(std::lround(v * 255.0f)));
    }
  }
  write_file(path, out);
}

Tensor<float> read_pnm(const fs::path& path) {
  const auto bytes = read_file(path);
  size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    if (t.empty()) throw FormatError("'" + path.string() + "': truncated PNM header");
    return t;
  };
  auto number = [&]() {
    const std::string t = token();
    if (!std::all_of(t.begin(), t.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); }))
      throw FormatError("'" + path.string() + "': bad PNM header field '" + t + "'");
    return std::stoll(t);
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") {
    throw FormatError("'" + path.string() + "': not a binary PGM/PPM");
  }
  const int64_t w = number();
  const int64_t h = number();
  const int64_t maxval = number();
  if (maxval < 1 || maxval > 255) {
    throw FormatError("'" + path.string() + "': only 8-bit PNM is supported");
  }
  ++pos;  // single whitespace before the raster
  const int64_t channels = magic == "P6" ? 3 : 1;
  const size_t need = static_cast<size_t>(w * h * channels);
  if (bytes.size() < pos + need) throw FormatError("'" + path.string() + "': truncated raster");
  Tensor<float> img(Shape{1, 3, h, w});
  const size_t plane = static_cast<size_t>(w * h);
  const auto scale = static_cast<float>(maxval);
  for (size_t i = 0; i < plane; ++i) {
    for (int64_t c = 0; c < 3; ++c) {
      const uint8_t b = bytes[pos + i * channels + (channels == 3 ? c : 0)];
      img.data[c * plane + i] = static_cast<float>(b) / scale;
    }
  }
  return img;
}

// ---- DMAP ------------------------------------------------------------------

std::vector<uint8_t> encode_dmap(const DensityMap& dm) {
  if (dm.raster.size() != static_cast<size_t>(dm.height * dm.width)) {
    throw InvalidArgument("encode_dmap: raster size mismatch");
  }
  std::vector<uint8_t> out(12 + 4 * dm.raster.size());
  std::memcpy(out.data(), "DMAP", 4);
  const auto h = static_cast<uint32_t>(dm.height);
  const auto w = static_cast<uint32_t>(dm.width);
  std::memcpy(out.data() + 4, &h, 4);
  std::memcpy(out.data() + 8, &w, 4);
  if (!dm.raster.empty()) std::memcpy(out.data() + 12, dm.raster.data(), 4 * dm.raster.size());
  return out;
}

DensityMap decode_dmap(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 12) throw FormatError("DMAP: truncated header");
  if (std::memcmp(bytes.data(), "DMAP", 4) != 0) throw FormatError("DMAP: bad magic");
  uint32_t h = 0;
  uint32_t w = 0;
  std::memcpy(&h, bytes.data() + 4, 4);
  std::memcpy(&w, bytes.data() + 8, 4);
  const uint64_t n = static_cast<uint64_t>(h) * w;
  if (bytes.size() != 12 + 4 * n) {
    throw FormatError("DMAP: expected " + std::to_string(12 + 4 * n) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  DensityMap dm;
  dm.height = h;
  dm.width = w;
  dm.raster.resize(n);
  if (n > 0) std::memcpy(dm.raster.data(), bytes.data() + 12, 4 * n);
  return dm;
}

void write_dmap(const fs::path& path, const DensityMap& dm) {
  write_file(path, encode_dmap(dm));
}

DensityMap read_dmap(const fs::path& path) {
  return decode_dmap(read_file(path));
}

// ---- manifests -------------------------------------------------------------

std::vector<Sample> load_dataset(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest '" + manifest.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + manifest.string() + "': " + e.what());
  }
  if (!doc.is_array()) throw FormatError("manifest must be a JSON array");
  const fs::path root = manifest.parent_path();
  std::vector<Sample> samples;
  for (const auto& entry : doc) {
    Sample s;
    std::string image;
    try {
      image = entry.at("image").get<std::string>();
      s.annotation.width = entry.at("width").get<int64_t>();
      s.annotation.height = entry.at("height").get<int64_t>();
      for (const auto& p : entry.at("points")) {
        if (!p.is_array() || p.size() != 2) throw FormatError("point must be [x, y]");
        s.annotation.points.push_back({p[0].get<double>(), p[1].get<double>()});
      }
    } catch (const json::exception& e) {
      throw FormatError("manifest entry '" + image + "': " + e.what());
    }
    s.annotation.image_id = fs::path(image).stem().string();
    s.annotation.validate();
    s.image = read_pnm(root / image);
    if (s.image.shape.h != s.annotation.height || s.image.shape.w != s.annotation.width) {
      throw FormatError("image '" + image + "' is " + std::to_string(s.image.shape.w) + "x" +
                        std::to_string(s.image.shape.h) + ", manifest says " +
                        std::to_string(s.annotation.width) + "x" +
                        std::to_string(s.annotation.height));
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

fs::path write_dataset(const fs::path& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir / "images");
  json doc = json::array();
  for (const auto& s : samples) {
    const std::string rel = "images/" + s.annotation.image_id + ".ppm";
    write_pnm(dir / rel, s.image);
    json pts = json::array();
    for (const auto& p : s.annotation.points) pts.push_back({p.x, p.y});
    doc.push_back({{"image", rel},
                   {"width", s.annotation.width},
                   {"height", s.annotation.height},
                   {"points", pts}});
  }
  const fs::path manifest = dir / "manifest.json";
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write '" + manifest.string() + "'");
  out << doc.dump(1) << "\n";
  return manifest;
}

}  // namespace cfanet
