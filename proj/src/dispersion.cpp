#include "simvae/dispersion.hpp"

#include <cmath>
#include <stdexcept>

namespace simvae {

DispersionReport dispersion(const std::vector<std::vector<double>>& mus) {
  if (mus.empty()) throw std::invalid_argument("dispersion: need at least one vector");
  const std::size_t d = mus.front().size();
  if (d == 0) throw std::invalid_argument("dispersion: vectors must be non-empty");
  for (std::size_t i = 0; i < mus.size(); ++i) {
    if (mus[i].size() != d) {
      throw std::invalid_argument("dispersion: row " + std::to_string(i) + " has width " +
                                  std::to_string(mus[i].size()) + ", expected " + std::to_string(d));
    }
  }
  DispersionReport r;
  r.centroid.assign(d, 0.0);
  for (const auto& m : mus)
    for (std::size_t j = 0; j < d; ++j) r.centroid[j] += m[j];
  for (double& c : r.centroid) c /= static_cast<double>(mus.size());
  double total = 0.0;
  for (const auto& m : mus) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (m[j] - r.centroid[j]) * (m[j] - r.centroid[j]);
    r.distances.push_back(std::sqrt(s));
    total += r.distances.back();
  }
  r.value = total / static_cast<double>(mus.size());
  return r;
}

}  // namespace simvae
