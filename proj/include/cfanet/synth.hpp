#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cfanet/groundtruth.hpp"
#include "cfanet/tensor.hpp"

namespace cfanet {

enum class Layout { kUniform, kClustered, kGradient };
enum class Background { kFlat, kTexturedNoise, kGeometricClutter };

std::string to_string(Layout l);
Layout parse_layout(const std::string& s);
std::string to_string(Background b);
Background parse_background(const std::string& s);

struct SceneSpec {
  int64_t width = 96;
  int64_t height = 96;
  int n_people = 0;
  Layout layout = Layout::kUniform;
  double head_radius_min = 2.0;
  double head_radius_max = 3.5;
  Background background = Background::kFlat;
  uint64_t seed = 0;
  int clusters = 3;
};

/// An image (1, 3, h, w) in [0, 1] with its head annotation.
struct Sample {
  Tensor<float> image;
  PointAnnotation annotation;
};

struct Scene {
  Sample sample;
  // Heads drawn from each mixture component (clustered layout only).
  std::vector<int> cluster_sizes;
};

/// Dark elliptical heads over a synthetic background. Pixel values are
/// quantized to 8 bits so that a PPM round trip is lossless.
Scene generate_scene(const SceneSpec& spec);

/// Largest head count generate_scene accepts for a given size.
int max_people(int64_t width, int64_t height);

/// Multinomial draw of n items over k equally likely bins.
std::vector<int> multinomial_counts(std::mt19937_64& rng, int n, int k);

// ---- image files (binary PGM / PPM) ---------------------------------------

/// Writes P6 for 3-channel images and P5 for 1-channel images.
void write_pnm(const std::filesystem::path& path, const Tensor<float>& image);
/// Reads P5 or P6; always returns a (1, 3, h, w) tensor in [0, 1].
Tensor<float> read_pnm(const std::filesystem::path& path);
/// Writes raw bytes as a P5 with the given maxval.
void write_pgm_bytes(const std::filesystem::path& path, int64_t width, int64_t height,
                     const std::vector<uint8_t>& bytes, int maxval);

// ---- density rasters ("DMAP") ---------------------------------------------

std::vector<uint8_t> encode_dmap(const DensityMap& dm);
DensityMap decode_dmap(const std::vector<uint8_t>& bytes);
void write_dmap(const std::filesystem::path& path, const DensityMap& dm);
DensityMap read_dmap(const std::filesystem::path& path);

// ---- datasets ---------------------------------------------------------------

/// Parses a manifest: [{"image", "width", "height", "points": [[x, y], ...]}].
/// Image paths are relative to the manifest's directory.
std::vector<Sample> load_dataset(const std::filesystem::path& manifest);

/// Writes images/<id>.ppm plus manifest.json under `dir`; returns the manifest
/// path.
std::filesystem::path write_dataset(const std::filesystem::path& dir,
                                    const std::vector<Sample>& samples);

struct SynthOptions {
  int count = 8;
  int64_t width = 96;
  int64_t height = 96;
  int min_people = 10;
  int max_people = 60;
  // "uniform" | "clustered" | "gradient" | "mixed" (cycles through all three)
  std::string layout = "mixed";
  // "flat" | "textured-noise" | "geometric-clutter" | "mixed"
  std::string background = "mixed";
  double head_radius_min = 2.0;
  double head_radius_max = 3.5;
  uint64_t seed = 0;
};

/// Deterministic synthetic dataset; sample i uses a seed derived from
/// options.seed and i.
std::vector<Sample> synth_dataset(const SynthOptions& options);

}  // namespace cfanet
