#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tsr/metrics.hpp"
#include "tsr/tensor.hpp"

namespace tsr {

// Text manifest, one annotation per line:
//
//   # comment
//   @classes name1,name2,...,name10
//   @split train
//   relative/path.ppm;class_name;visible;x_min,y_min,x_max,y_max
//   negative_image.ppm
//
// Image paths are relative to the manifest's directory. A line holding only
// a path declares a negative image. Class ids are 1 + the index into
// @classes; 0 stays reserved for background.

struct DatasetEntry {
  std::string image_path;  // as written in the manifest
  std::vector<Annotation> annotations;
};

struct DatasetManifest {
  enum class Split { Train, Test };

  std::vector<DatasetEntry> entries;
  std::vector<std::string> class_names;
  Split split = Split::Train;
  std::string base_dir;  // directory of the manifest file; "" when parsed from memory

  int class_id(const std::string& name) const;  // 1-based; throws on unknown
  std::string image_file(const DatasetEntry& e) const;
};

DatasetManifest parse_manifest(const std::string& path);
DatasetManifest parse_manifest_text(std::istream& is, const std::string& origin);
void write_manifest(const std::string& path, const DatasetManifest& m);
void write_manifest_text(std::ostream& os, const DatasetManifest& m);

// -- synthetic scene generator ------------------------------------------------

struct SynthConfig {
  int image_size = 224;
  int min_signs = 1, max_signs = 3;   // per image; fewer if placement fails
  int min_size = 16, max_size = 200;  // sign side length, spans all eval buckets
  int clutter = 10;                   // low-saturation distractor rectangles
  int num_classes = 10;
  std::uint64_t seed = 1;
};

// The ten procedural sign templates, by class id 1..10.
const std::vector<std::string>& synth_class_names();

// Draws a class template into an s x s patch (values in [0,1], RGB planes).
void draw_sign(Tensor& image, int class_id, int x0, int y0, int side);

// Renders `count` scenes into out_dir as PPM files plus a manifest
// ("manifest.txt"). Annotation boxes match pasted extents exactly; signs
// never overlap each other. Deterministic for a fixed seed.
DatasetManifest synth_generate(const SynthConfig& cfg, int count, const std::string& out_dir,
                               DatasetManifest::Split split = DatasetManifest::Split::Train);

}  // namespace tsr
