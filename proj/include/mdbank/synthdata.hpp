#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdbank/boxes.hpp"
#include "mdbank/rng.hpp"
#include "mdbank/tensor.hpp"

namespace mdbank::synth {

inline constexpr int kNumClasses = 3;  // 1 = circle, 2 = square, 3 = triangle
inline constexpr int kMaxObjects = 6;
inline constexpr double kMaxOverlapIou = 0.7;

enum class Domain { source, target };
enum class BackgroundStyle { flat, gradient, two_tone };

std::string to_string(Domain d);

class SpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneObject {
  int class_id = 1;
  double cx = 0, cy = 0;
  double size = 20;   // circumscribed diameter in pixels
  double angle = 0;   // radians
};

struct SceneSpec {
  int image_size = 96;
  std::vector<SceneObject> objects;
  BackgroundStyle background = BackgroundStyle::flat;
  std::uint64_t rng_seed = 0;
};

struct BoxAnnotation {
  int class_id = 1;
  Box box{};
  bool operator==(const BoxAnnotation&) const = default;
};

/// Image with pixels stored channel-major (3×H×W, values in [0,1]).
struct ImageSample {
  Tensor pixels;
  Domain domain = Domain::source;
  std::optional<std::vector<BoxAnnotation>> annotations;
  std::string sample_id;

  int height() const { return pixels.dim(1); }
  int width() const { return pixels.dim(2); }
};

/// Fixed parameters of the target-domain restyling.
struct StyleParams {
  double fog_beta = 0.55;    // blend weight toward the fog color
  double fog_level = 0.7;    // gray level of the fog
  double hue_degrees = 90;   // rotation about the gray axis
  double noise_sigma = 0.06; // additive Gaussian noise
  bool operator==(const StyleParams&) const = default;
};

void to_json(nlohmann::json& j, const StyleParams& s);
void from_json(const nlohmann::json& j, StyleParams& s);

Box object_box(const SceneObject& obj);
/// Throws SpecError when objects leave the image, exceed the count limit, or
/// overlap above kMaxOverlapIou.
void validate_scene(const SceneSpec& spec);

ImageSample render_scene(const SceneSpec& spec, Domain domain, const StyleParams& style = {});

/// Random valid scene with 1..max_objects objects.
SceneSpec random_scene(std::uint64_t seed, int image_size = 96, int max_objects = 4);

// Photometric augmentation: contrast and saturation factors in (0.5, 1.5),
// brightness shift in (-32, 32) on the 0-255 scale.
struct PhotometricDraw {
  double contrast = 1.0;
  double saturation = 1.0;
  double brightness = 0.0;
};

PhotometricDraw draw_photometric(Rng& rng);
ImageSample apply_photometric(const ImageSample& image, const PhotometricDraw& draw);
ImageSample augment_photometric(const ImageSample& image, Rng& rng);

// Dataset on disk.
inline constexpr const char* kSourceSplit = "source";
inline constexpr const char* kTargetSplit = "target";
inline constexpr const char* kTargetEvalSplit = "target_eval";

struct GenerateOptions {
  int n_source = 500;
  int n_target = 500;
  int n_eval = 200;
  std::uint64_t seed = 0;
  int image_size = 96;
  int max_objects = 4;
  bool overwrite = false;
  StyleParams style;
};

struct DatasetManifest {
  int num_classes = kNumClasses;
  std::uint64_t seed = 0;
  int image_size = 96;
  int n_source = 0, n_target = 0, n_eval = 0;
  StyleParams style;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// Scene for one sample; a pure function of (dataset seed, split, index).
SceneSpec dataset_scene(const GenerateOptions& opts, const std::string& split, int index);

DatasetManifest generate_dataset(const std::filesystem::path& root, const GenerateOptions& opts);
DatasetManifest load_manifest(const std::filesystem::path& root);
/// Loads a split. The unlabeled target split never carries annotations.
std::vector<ImageSample> load_split(const std::filesystem::path& root, const std::string& split,
                                    int limit = -1);

void write_png(const std::filesystem::path& path, const Tensor& pixels);
Tensor read_png(const std::filesystem::path& path);

}  // namespace mdbank::synth
