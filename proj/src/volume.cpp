#include "simvae/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>

#include "simvae/config.hpp"

namespace simvae {

namespace fs = std::filesystem;

fs::path sidecar_path(const fs::path& path) { return fs::path(path.string() + ".json"); }

void save_volume(const Volume& volume, const fs::path& path) {
  const std::size_t expected = volume.dims[0] * volume.dims[1] * volume.dims[2];
  if (expected == 0 || expected != volume.voxels.size()) {
    throw VolumeFormatError("volume dims " + std::to_string(volume.dims[0]) + "x" +
                            std::to_string(volume.dims[1]) + "x" + std::to_string(volume.dims[2]) +
                            " do not match " + std::to_string(volume.voxels.size()) + " voxels");
  }
  std::string payload(expected * 4, '\0');
  for (std::size_t i = 0; i < expected; ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(volume.voxels[i]);
    for (int b = 0; b < 4; ++b) payload[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  Json header;
  header["format"] = "simvae-volume";
  header["version"] = 1;
  header["dims"] = volume.dims;
  header["spacing"] = volume.spacing;
  header["dtype"] = "float32";
  header["byte_order"] = "little";
  header["order"] = "x-fastest";
  header["provenance"] = volume.provenance;
  write_file_atomic(path, payload);
  write_file_atomic(sidecar_path(path), header.dump(2) + "\n");
}

Volume load_volume(const fs::path& path) {
  Json header;
  try {
    header = read_json_file(sidecar_path(path));
  } catch (const std::exception& e) {
    throw VolumeFormatError("cannot read volume header for " + path.string() + ": " + e.what());
  }
  if (header.value("format", "") != "simvae-volume" || header.value("version", 0) != 1) {
    throw VolumeFormatError(path.string() + ": unsupported volume header");
  }
  if (header.value("dtype", "") != "float32" || header.value("byte_order", "") != "little") {
    throw VolumeFormatError(path.string() + ": only little-endian float32 payloads are supported");
  }
  Volume v;
  try {
    v.dims = header.at("dims").get<std::array<std::size_t, 3>>();
    if (header.contains("spacing")) v.spacing = header.at("spacing").get<std::array<double, 3>>();
    v.provenance = header.value("provenance", "");
  } catch (const nlohmann::json::exception& e) {
    throw VolumeFormatError(path.string() + ": malformed header: " + e.what());
  }
  if (v.dims[0] == 0 || v.dims[1] == 0 || v.dims[2] == 0) {
    throw VolumeFormatError(path.string() + ": header dims must be positive");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeFormatError("cannot open " + path.string());
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t n = v.dims[0] * v.dims[1] * v.dims[2];
  if (payload.size() != n * 4) {
    throw VolumeFormatError(path.string() + ": expected " + std::to_string(n * 4) + " payload bytes, found " +
                            std::to_string(payload.size()));
  }
  v.voxels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[i * 4 + b])) << (8 * b);
    }
    v.voxels[i] = std::bit_cast<float>(bits);
  }
  return v;
}

double percentile(std::vector<float> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const double a = values[lo];
  if (hi == lo) return a;
  const double b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

Volume normalize_intensity(const Volume& volume, double gamma) {
  if (gamma < 0.0 || !std::isfinite(gamma)) throw std::invalid_argument("gamma must be a finite value >= 0");
  const auto [mn, mx] = std::minmax_element(volume.voxels.begin(), volume.voxels.end());
  if (volume.voxels.empty() || *mn == *mx) {
    throw std::invalid_argument("normalize_intensity: constant volume");
  }
  const double p99 = percentile(volume.voxels, 99.0);
  if (!(p99 > 0.0)) throw std::invalid_argument("normalize_intensity: 99th percentile is not positive");
  Volume out = volume;
  const double denom = std::expm1(gamma);
  for (float& v : out.voxels) {
    double u = std::clamp(static_cast<double>(v) / p99, 0.0, 1.0);
    if (gamma > 1e-12) u = std::expm1(gamma * u) / denom;
    v = static_cast<float>(u);
  }
  return out;
}

}  // namespace simvae
