#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dformer/config.hpp"
#include "dformer/loss.hpp"
#include "dformer/tensor.hpp"

namespace dformer {

// One 3D scalar volume plus its exact label masks. Image values are in
// [0, 1] and quantized to float32 so file round-trips are bit-exact.
struct VolumeSample {
  Tensor image;  // [1, D, H, W]
  LabelVolume labels;
  std::uint32_t num_classes = 2;
};

// Deterministic synthetic volumes: each sample places 1-3 non-overlapping
// shapes of distinct foreground classes; the image is class-dependent
// intensity plus Gaussian noise, the labels are the exact masks.
std::vector<VolumeSample> synth_dataset(std::uint64_t seed, std::size_t count, std::size_t d,
                                        std::size_t h, std::size_t w, std::size_t num_classes,
                                        ShapeKind kind, double noise_level);

// On-disk record: magic "DFVOL001", u32 LE D, H, W, K, D*H*W float32 image,
// D*H*W label bytes.
void write_volume(const std::string& path, const VolumeSample& s);
VolumeSample read_volume(const std::string& path);

}  // namespace dformer
