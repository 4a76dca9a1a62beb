#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "simvae/phantom.hpp"
#include "simvae/tensor.hpp"

namespace simvae {

enum class Diagnosis { HC, MCI, AD };

std::string to_string(Diagnosis d);
Diagnosis diagnosis_from_string(const std::string& s);
Diagnosis diagnose(const CorpusSpec& spec, double score);

struct SubjectRecord {
  std::string id;
  std::filesystem::path volume_path;  // relative to the manifest directory unless absolute
  double score = 0.0;
  Diagnosis diagnosis = Diagnosis::HC;
  std::optional<GenerativeFactors> factors;
};

// CSV with columns id,volume_path,score,diagnosis and, when every subject
// carries them, the generative factor columns tx,ty,tz,rx,ry,rz,sx,sy,sz,gain,noise,seed.
struct Manifest {
  std::filesystem::path root;
  std::vector<SubjectRecord> subjects;

  std::filesystem::path resolve(const SubjectRecord& s) const;
};

void write_manifest(const Manifest& manifest, const std::filesystem::path& csv);
Manifest read_manifest(const std::filesystem::path& csv);

// Writes <out>/manifest.csv, <out>/corpus.json and <out>/volumes/sub-XXXX.vol(.json).
// Subject i uses factors drawn from derive_seed(spec.seed, {i}).
Manifest generate_corpus(const CorpusSpec& spec, const std::filesystem::path& out_dir,
                         std::size_t threads = 1);

struct Split {
  std::vector<std::string> train, val, test;
};

// Seeded shuffle, then floor(p_val N) validation and floor(p_test N) test
// subjects; the remainder goes to training.
Split split_dataset(std::span<const std::string> ids, std::array<double, 3> proportions, std::uint64_t seed);

inline constexpr std::array<double, 3> kDefaultSplit{0.65, 0.15, 0.2};

// Normalized volumes held in memory for training and analysis.
struct Dataset {
  std::array<std::size_t, 3> shape{0, 0, 0};  // D, H, W (= nz, ny, nx)
  std::vector<std::string> ids;
  std::vector<std::vector<double>> volumes;
  std::vector<double> scores;
  std::vector<Diagnosis> diagnoses;
  std::vector<std::optional<GenerativeFactors>> factors;

  std::size_t size() const { return ids.size(); }
  std::size_t voxels() const { return shape[0] * shape[1] * shape[2]; }
  Dataset subset(std::span<const std::string> keep) const;
  // [rows.size(), 1, D, H, W]
  Tensor batch(std::span<const std::size_t> rows) const;
};

Dataset load_dataset(const Manifest& manifest, double gamma = 1.0);

}  // namespace simvae
