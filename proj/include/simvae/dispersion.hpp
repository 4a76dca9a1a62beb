#pragma once

#include <vector>

namespace simvae {

// Average Euclidean distance of latent mean vectors to their centroid.
struct DispersionReport {
  double value = 0.0;
  std::vector<double> centroid;
  std::vector<double> distances;
};

// Rows must share one width; at least one row.
DispersionReport dispersion(const std::vector<std::vector<double>>& mus);

}  // namespace simvae
