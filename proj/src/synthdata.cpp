#include "mdbank/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace mdbank::synth {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Rgb = std::array<double, 3>;
constexpr int kSupersample = 4;

double luminance(const Rgb& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

Rgb random_color(Rng& rng) { return {uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1)}; }

std::vector<std::array<double, 2>> polygon(const SceneObject& obj) {
  const int sides = obj.class_id == 2 ? 4 : 3;
  const double r = 0.5 * obj.size;
  const double start = obj.angle + (sides == 4 ? std::numbers::pi / 4 : std::numbers::pi / 2);
  std::vector<std::array<double, 2>> v(sides);
  for (int k = 0; k < sides; ++k) {
    const double a = start + 2 * std::numbers::pi * k / sides;
    v[k] = {obj.cx + r * std::cos(a), obj.cy - r * std::sin(a)};
  }
  return v;
}

bool inside_polygon(const std::vector<std::array<double, 2>>& v, double x, double y) {
  // Convex polygon: all edge cross products share a sign.
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto& a = v[i];
    const auto& b = v[(i + 1) % v.size()];
    const double cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
    pos |= cross > 0;
    neg |= cross < 0;
  }
  return !(pos && neg);
}

struct Shape {
  SceneObject obj;
  std::vector<std::array<double, 2>> vertices;
  bool contains(double x, double y) const {
    if (obj.class_id == 1) {
      const double dx = x - obj.cx, dy = y - obj.cy, r = 0.5 * obj.size;
      return dx * dx + dy * dy <= r * r;
    }
    return inside_polygon(vertices, x, y);
  }
};

void set_pixel(Tensor& img, int y, int x, const Rgb& c) {
  for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[ch];
}

Rgb get_pixel(const Tensor& img, int y, int x) { return {img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)}; }

void restyle_target(Tensor& img, const StyleParams& style, std::uint64_t seed) {
  const double theta = style.hue_degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta), k = 1.0 / std::sqrt(3.0);
  // Rodrigues rotation about the gray axis (1,1,1)/sqrt(3).
  const double t = 1 - c;
  const double a = c + t * k * k, b = t * k * k - s * k, d = t * k * k + s * k;
  const std::array<std::array<double, 3>, 3> rot{{{a, b, d}, {d, a, b}, {b, d, a}}};
  Rng rng(derive_seed(seed, "target-noise"));
  std::normal_distribution<double> noise(0.0, style.noise_sigma);
  const int h = img.dim(1), w = img.dim(2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Rgb p = get_pixel(img, y, x);
      for (auto& v : p) v = (1 - style.fog_beta) * v + style.fog_beta * style.fog_level;
      Rgb q{};
      for (int i = 0; i < 3; ++i) q[i] = rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2];
      for (auto& v : q) v = std::clamp(v + (style.noise_sigma > 0 ? noise(rng) : 0.0), 0.0, 1.0);
      set_pixel(img, y, x, q);
    }
  }
}

std::string split_prefix(const std::string& split) { return split + "_"; }

std::string sample_name(const std::string& split, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return split_prefix(split) + buf;
}

json annotation_record(const ImageSample& s) {
  json objects = json::array();
  if (s.annotations) {
    for (const auto& a : *s.annotations) {
      objects.push_back({{"class_id", a.class_id}, {"bbox", {a.box[0], a.box[1], a.box[2], a.box[3]}}});
    }
  }
  return {{"sample_id", s.sample_id}, {"width", s.width()}, {"height", s.height()}, {"objects", objects}};
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("missing " + path.string());
  return json::parse(in);
}

}  // namespace

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

void to_json(json& j, const StyleParams& s) {
  j = {{"fog_beta", s.fog_beta}, {"fog_level", s.fog_level}, {"hue_degrees", s.hue_degrees},
       {"noise_sigma", s.noise_sigma}};
}

void from_json(const json& j, StyleParams& s) {
  s.fog_beta = j.at("fog_beta").get<double>();
  s.fog_level = j.at("fog_level").get<double>();
  s.hue_degrees = j.at("hue_degrees").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
}

void to_json(json& j, const DatasetManifest& m) {
  j = {{"num_classes", m.num_classes},
       {"seed", m.seed},
       {"image_size", m.image_size},
       {"counts", {{kSourceSplit, m.n_source}, {kTargetSplit, m.n_target}, {kTargetEvalSplit, m.n_eval}}},
       {"style_params", m.style}};
}

void from_json(const json& j, DatasetManifest& m) {
  m.num_classes = j.at("num_classes").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.image_size = j.value("image_size", 96);
  const auto& c = j.at("counts");
  m.n_source = c.at(kSourceSplit).get<int>();
  m.n_target = c.at(kTargetSplit).get<int>();
  m.n_eval = c.at(kTargetEvalSplit).get<int>();
  m.style = j.at("style_params").get<StyleParams>();
}

Box object_box(const SceneObject& obj) {
  if (obj.class_id == 1) {
    const double r = 0.5 * obj.size;
    return {obj.cx - r, obj.cy - r, obj.cx + r, obj.cy + r};
  }
  Box b{1e300, 1e300, -1e300, -1e300};
  for (const auto& v : polygon(obj)) {
    b[0] = std::min(b[0], v[0]);
    b[1] = std::min(b[1], v[1]);
    b[2] = std::max(b[2], v[0]);
    b[3] = std::max(b[3], v[1]);
  }
  return b;
}

void validate_scene(const SceneSpec& spec) {
  if (spec.image_size < 8) throw SpecError("image_size must be at least 8");
  if (static_cast<int>(spec.objects.size()) > kMaxObjects) throw SpecError("too many objects in scene");
  std::vector<Box> boxes;
  for (const auto& o : spec.objects) {
    if (o.class_id < 1 || o.class_id > kNumClasses) throw SpecError("class_id out of range");
    if (!(o.size > 0)) throw SpecError("object size must be positive");
    const Box b = object_box(o);
    if (b[0] < 0 || b[1] < 0 || b[2] > spec.image_size || b[3] > spec.image_size) {
      throw SpecError("object box leaves the image");
    }
    for (const auto& other : boxes) {
      if (iou(b, other) > kMaxOverlapIou) throw SpecError("overlapping objects exceed IoU 0.7");
    }
    boxes.push_back(b);
  }
}

ImageSample render_scene(const SceneSpec& spec, Domain domain, const StyleParams& style) {
  validate_scene(spec);
  const int n = spec.image_size;
  Rng rng(derive_seed(spec.rng_seed, "colors"));
  const Rgb bg_a = random_color(rng);
  const Rgb bg_b = random_color(rng);
  const double bg_lum = 0.5 * (luminance(bg_a) + luminance(bg_b));

  std::vector<Shape> shapes;
  std::vector<Rgb> colors;
  for (const auto& o : spec.objects) {
    Shape s{o, o.class_id == 1 ? std::vector<std::array<double, 2>>{} : polygon(o)};
    shapes.push_back(std::move(s));
    Rgb c = random_color(rng);
    for (int tries = 0; tries < 64 && std::abs(luminance(c) - bg_lum) < 0.25; ++tries) c = random_color(rng);
    colors.push_back(c);
  }

  ImageSample out;
  out.pixels = Tensor({3, n, n});
  out.domain = domain;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      Rgb bg{};
      switch (spec.background) {
        case BackgroundStyle::flat: bg = bg_a; break;
        case BackgroundStyle::gradient: {
          const double t = (y + 0.5) / n;
          for (int c = 0; c < 3; ++c) bg[c] = (1 - t) * bg_a[c] + t * bg_b[c];
          break;
        }
        case BackgroundStyle::two_tone: bg = x < n / 2 ? bg_a : bg_b; break;
      }
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < kSupersample; ++sy) {
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double px = x + (sx + 0.5) / kSupersample;
          const double py = y + (sy + 0.5) / kSupersample;
          Rgb c = bg;
          for (std::size_t i = 0; i < shapes.size(); ++i) {
            if (shapes[i].contains(px, py)) c = colors[i];
          }
          for (int ch = 0; ch < 3; ++ch) acc[ch] += c[ch];
        }
      }
      for (auto& v : acc) v /= kSupersample * kSupersample;
      set_pixel(out.pixels, y, x, acc);
    }
  }
  if (domain == Domain::target) restyle_target(out.pixels, style, spec.rng_seed);

  std::vector<BoxAnnotation> ann;
  for (const auto& o : spec.objects) {
    ann.push_back({o.class_id, clip_box(object_box(o), n, n)});
  }
  out.annotations = std::move(ann);
  return out;
}

SceneSpec random_scene(std::uint64_t seed, int image_size, int max_objects) {
  Rng rng(derive_seed(seed, "layout"));
  SceneSpec spec;
  spec.image_size = image_size;
  spec.rng_seed = seed;
  spec.background = static_cast<BackgroundStyle>(std::uniform_int_distribution<int>(0, 2)(rng));
  const int count = std::uniform_int_distribution<int>(1, std::clamp(max_objects, 1, kMaxObjects))(rng);
  std::vector<Box> placed;
  for (int attempt = 0; attempt < 200 && static_cast<int>(spec.objects.size()) < count; ++attempt) {
    SceneObject o;
    o.class_id = std::uniform_int_distribution<int>(1, kNumClasses)(rng);
    o.size = uniform(rng, 18.0, 38.0);
    o.angle = uniform(rng, 0.0, 2 * std::numbers::pi);
    const double r = 0.5 * o.size + 1.0;
    o.cx = uniform(rng, r, image_size - r);
    o.cy = uniform(rng, r, image_size - r);
    const Box b = object_box(o);
    bool ok = true;
    for (const auto& p : placed) ok = ok && iou(b, p) < 0.1;
    if (!ok) continue;
    placed.push_back(b);
    spec.objects.push_back(o);
  }
  return spec;
}

PhotometricDraw draw_photometric(Rng& rng) {
  PhotometricDraw d;
  d.contrast = uniform(rng, 0.5, 1.5);
  d.saturation = uniform(rng, 0.5, 1.5);
  d.brightness = uniform(rng, -32.0, 32.0);
  return d;
}

ImageSample apply_photometric(const ImageSample& image, const PhotometricDraw& draw) {
  ImageSample out = image;
  Tensor& px = out.pixels;
  const int h = image.height(), w = image.width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double* r = px.data();
  double* g = r + plane;
  double* b = g + plane;
  double mean_gray = 0.0;
  for (std::size_t i = 0; i < plane; ++i) mean_gray += 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  mean_gray /= static_cast<double>(plane);
  const double shift = draw.brightness / 255.0;
  for (std::size_t i = 0; i < plane; ++i) {
    double c[3] = {r[i], g[i], b[i]};
    for (auto& v : c) v = mean_gray + draw.contrast * (v - mean_gray);
    const double gray = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    for (auto& v : c) v = std::clamp(gray + draw.saturation * (v - gray) + shift, 0.0, 1.0);
    r[i] = c[0];
    g[i] = c[1];
    b[i] = c[2];
  }
  return out;
}

ImageSample augment_photometric(const ImageSample& image, Rng& rng) {
  return apply_photometric(image, draw_photometric(rng));
}

SceneSpec dataset_scene(const GenerateOptions& opts, const std::string& split, int index) {
  return random_scene(derive_seed(derive_seed(opts.seed, split), static_cast<std::uint64_t>(index)),
                      opts.image_size, opts.max_objects);
}

void write_png(const fs::path& path, const Tensor& pixels) {
  const int h = pixels.dim(1), w = pixels.dim(2);
  cv::Mat mat(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        // OpenCV stores BGR.
        row[x][2 - c] = static_cast<unsigned char>(std::lround(std::clamp(pixels.at(c, y, x), 0.0, 1.0) * 255.0));
      }
    }
  }
  if (!cv::imwrite(path.string(), mat)) throw DatasetError("failed to write " + path.string());
}

Tensor read_png(const fs::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (mat.empty()) throw DatasetError("failed to read " + path.string());
  Tensor t({3, mat.rows, mat.cols});
  for (int y = 0; y < mat.rows; ++y) {
    const auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < mat.cols; ++x) {
      for (int c = 0; c < 3; ++c) t.at(c, y, x) = row[x][2 - c] / 255.0;
    }
  }
  return t;
}

DatasetManifest generate_dataset(const fs::path& root, const GenerateOptions& opts) {
  if (opts.n_source <= 0 || opts.n_target <= 0 || opts.n_eval <= 0) {
    throw DatasetError("all split counts must be positive");
  }
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!opts.overwrite) throw DatasetError("output directory is not empty: " + root.string());
    fs::remove_all(root);
  }
  struct SplitPlan {
    const char* name;
    int count;
    Domain domain;
    bool labeled;
  };
  const SplitPlan plans[] = {{kSourceSplit, opts.n_source, Domain::source, true},
                             {kTargetSplit, opts.n_target, Domain::target, false},
                             {kTargetEvalSplit, opts.n_eval, Domain::target, true}};
  for (const auto& plan : plans) {
    const fs::path dir = root / plan.name;
    fs::create_directories(dir / "images");
    std::vector<json> records(plan.count);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < plan.count; ++i) {
      ImageSample s = render_scene(dataset_scene(opts, plan.name, i), plan.domain, opts.style);
      s.sample_id = sample_name(plan.name, i);
      if (!plan.labeled) s.annotations.reset();
      write_png(dir / "images" / (s.sample_id + ".png"), s.pixels);
      records[i] = annotation_record(s);
    }
    write_json(dir / "annotations.json", json(records));
  }
  DatasetManifest m;
  m.seed = opts.seed;
  m.image_size = opts.image_size;
  m.n_source = opts.n_source;
  m.n_target = opts.n_target;
  m.n_eval = opts.n_eval;
  m.style = opts.style;
  write_json(root / "manifest.json", json(m));
  return m;
}

DatasetManifest load_manifest(const fs::path& root) { return read_json(root / "manifest.json").get<DatasetManifest>(); }

std::vector<ImageSample> load_split(const fs::path& root, const std::string& split, int limit) {
  const json records = read_json(root / split / "annotations.json");
  if (!records.is_array()) throw DatasetError("annotations.json must be an array");
  const int n = limit >= 0 ? std::min<int>(limit, static_cast<int>(records.size())) : static_cast<int>(records.size());
  std::vector<ImageSample> out(n);
  const bool labeled = split != kTargetSplit;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto& r = records[i];
    ImageSample& s = out[i];
    s.sample_id = r.at("sample_id").get<std::string>();
    s.domain = split == kSourceSplit ? Domain::source : Domain::target;
    s.pixels = read_png(root / split / "images" / (s.sample_id + ".png"));
    if (labeled) {
      std::vector<BoxAnnotation> ann;
      for (const auto& o : r.at("objects")) {
        const auto bb = o.at("bbox").get<std::vector<double>>();
        ann.push_back({o.at("class_id").get<int>(), {bb.at(0), bb.at(1), bb.at(2), bb.at(3)}});
      }
      s.annotations = std::move(ann);
    }
  }
  return out;
}

}  // namespace mdbank::synth
