#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace simvae {

// Dense 3D scalar field, x fastest: index = (z * ny + y) * nx + x.
struct Volume {
  std::array<std::size_t, 3> dims{0, 0, 0};  // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<float> voxels;
  std::string provenance;

  Volume() = default;
  Volume(std::size_t nx, std::size_t ny, std::size_t nz, float fill = 0.0f)
      : dims{nx, ny, nz}, voxels(nx * ny * nz, fill) {}

  std::size_t size() const { return voxels.size(); }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * dims[1] + y) * dims[0] + x;
  }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }
};

class VolumeFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// On disk: `<path>` holds the raw little-endian float32 payload, `<path>.json`
// the sidecar header:
//   {"format":"simvae-volume","version":1,"dims":[nx,ny,nz],
//    "spacing":[sx,sy,sz],"dtype":"float32","byte_order":"little",
//    "order":"x-fastest","provenance":"..."}
void save_volume(const Volume& volume, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& path);

// Linear-interpolated percentile (q in [0, 100]) of the voxel values.
double percentile(std::vector<float> values, double q);

// v <- clip(v / p99, 0, 1), then v <- (exp(gamma v) - 1) / (exp(gamma) - 1).
// gamma -> 0 is the identity. Throws std::invalid_argument on constant volumes,
// a non-positive 99th percentile, or negative gamma.
Volume normalize_intensity(const Volume& volume, double gamma = 1.0);

}  // namespace simvae
