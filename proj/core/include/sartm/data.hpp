#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sartm/labelmap.hpp"
#include "sartm/tensor.hpp"

SARTM_NS_BEGIN

// Procedural RGB-thermal scene recipe. Object classes are 1..num_classes-1;
// class 0 is background. Night scenes darken and noise the RGB channel while
// the thermal intensity bands stay fixed.
struct SceneSpec {
  int num_classes = 4;
  int64_t height = 64;
  int64_t width = 64;
  int border_ignore = 2;       // 255 band around the frame
  int min_objects = 2;
  int max_objects = 4;
  double night_fraction = 0.5;
  double thermal_noise = 0.02;
  double rgb_noise_day = 0.02;
  double rgb_noise_night = 0.05;
  double night_luma = 0.08;    // RGB scale at night

  void validate() const;
  // Thermal intensity band for a class, in [0,1].
  double thermal_mean(int cls) const;
  // Deterministic palette; independent of the scene seed.
  std::array<double, 3> class_color(int cls) const;
};

struct ModalitySample {
  Tensor rgb;      // [3,H,W] in [0,1]
  Tensor thermal;  // [1,H,W] in [0,1]
  LabelMap label;
  uint64_t seed = 0;
  bool night = false;
};

ModalitySample generate_scene(const SceneSpec& spec, uint64_t seed);

ModalitySample flip_horizontal(const ModalitySample& s);

// --- PNM raster I/O (binary PPM for RGB, binary PGM for thermal/labels) ---

struct RasterU8 {
  int64_t height = 0;
  int64_t width = 0;
  int channels = 1;              // 1 (PGM) or 3 (PPM)
  std::vector<uint8_t> bytes;    // interleaved row-major
};

void write_pnm(const std::filesystem::path& path, const RasterU8& raster);
RasterU8 read_pnm(const std::filesystem::path& path);

RasterU8 to_raster(const Tensor& image);        // [1|3,H,W] in [0,1] -> bytes
Tensor from_raster(const RasterU8& raster);     // bytes -> [C,H,W] in [0,1]
RasterU8 label_raster(const LabelMap& labels);
LabelMap label_from_raster(const RasterU8& raster);

// --- teacher embedding fixtures ---

// One unit-norm vector per class name, derived from a seeded hash of the name
// bytes; identical names and seed give identical tables on any platform.
Tensor gen_embeddings(const std::vector<std::string>& class_names, int dim,
                      uint64_t seed);
void write_embeddings(const std::filesystem::path& path, const Tensor& table);
Tensor read_embeddings(const std::filesystem::path& path);

// --- dataset directory layout ---

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<ModalitySample> train;
  std::vector<ModalitySample> val;
  int64_t height = 0, width = 0;
};

std::vector<std::string> default_class_names(int num_classes);

// Writes root/{rgb,thermal,labels,splits}, classes.txt and the split
// manifests. Scene i uses seed base_seed + i.
void write_dataset(const std::filesystem::path& root, const SceneSpec& spec,
                   int train_scenes, int val_scenes, uint64_t base_seed,
                   const std::vector<std::string>& class_names);
Dataset load_dataset(const std::filesystem::path& root);

SARTM_NS_END
