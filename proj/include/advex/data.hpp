#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advex/annotation_record.hpp"
#include "advex/random.hpp"
#include "advex/tensor.hpp"

namespace advex {

enum class Origin { Base, Annotation };

struct Example {
  std::string id;
  Tensor image;  // elements in [0,1]
  std::size_t label = 0;
  Origin origin = Origin::Base;
};

struct Dataset {
  std::string name;
  std::size_t classes = 0;
  Shape image_shape;
  std::vector<Example> examples;
  std::vector<std::string> merged_annotations;  // annotation files folded in

  std::size_t size() const { return examples.size(); }
  /// Stacks the selected images into [n, image_shape...].
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> labels(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> all_labels() const;
  /// Throws if any image has the wrong shape or leaves [0,1], a label is out
  /// of range, or an id repeats.
  void validate() const;
};

/// Gaussian clusters in [0,1]^2 around class centers evenly spaced on a
/// circle of `radius` about (0.5, 0.5). Points are clamped to the square.
Dataset gen_blobs(std::size_t classes, std::size_t per_class, double spread, std::uint64_t seed,
                  double radius = 0.3);
/// Half the smallest distance between two blob centers.
double blob_margin(std::size_t classes, double radius = 0.3);

/// 8x8 single-channel glyphs (one fixed template per class, up to 10) with
/// pixel noise of standard deviation `noise` and a random 1-pixel shift.
Dataset gen_digits(std::size_t classes, std::size_t per_class, double noise, std::uint64_t seed);

/// Parses CIFAR-10 binary records (1 label byte + 3072 channel-planar pixel
/// bytes), keeping the first `per_class` of each class in file order.
/// `counts` carries the per-class tally across several files.
void parse_cifar(std::string_view bytes, std::size_t per_class, const std::string& source, Dataset& out,
                 std::vector<std::size_t>& counts);
Dataset load_cifar_subset(const std::vector<std::string>& paths, std::size_t per_class);

struct AugmentConfig {
  int pad = 0;
  double flip_prob = 0.0;

  bool active() const { return pad > 0 || flip_prob > 0.0; }
};

/// Reflect-pad by cfg.pad, random crop back to the original size, then a
/// horizontal flip with probability cfg.flip_prob. image: [C,H,W].
Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng);
Tensor flip_horizontal(const Tensor& image);

/// Appends the records marked unchanged as annotation examples labeled with
/// their original class. Records whose id is already in the dataset are
/// skipped, so merging the same list twice changes nothing. Relative image
/// paths resolve against `base_dir`.
Dataset merge_annotations(const Dataset& base, const std::vector<AnnotationRecord>& records,
                          const std::string& base_dir = ".");

/// <dir>/dataset.json (metadata, ids, labels, origins) + <dir>/images.aetn.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

/// Seeded permutation of 0..n-1.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

}  // namespace advex
