#ifndef PARTREID_METRICS_HPP_
#define PARTREID_METRICS_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace partreid::metrics {

enum class Role : std::uint8_t { kQuery, kGallery };

struct EmbeddingSet {
  std::size_t dim = 0;
  Role role = Role::kGallery;
  std::vector<double> values;  // [size, dim]
  std::vector<int> ids;        // negative ids are distractors
  std::vector<int> cameras;
  std::vector<std::uint8_t> junk;

  std::size_t size() const { return ids.size(); }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
  // Throws on inconsistent lengths or negative cameras.
  void validate() const;
};

struct DistanceMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

struct EvalOptions {
  std::size_t k_max = 20;
  // Drop gallery entries sharing both identity and camera with the query.
  bool cross_camera = true;
};

struct EvalResult {
  std::vector<double> cmc;  // cmc[k-1] = Recall@k
  double map = 0.0;
  std::vector<std::size_t> evaluated_queries;
  std::vector<double> average_precision;  // parallel to evaluated_queries

  double recall_at(std::size_t k) const { return cmc.at(k - 1); }
  nlohmann::json to_json() const;
};

DistanceMatrix pairwise_euclidean(const EmbeddingSet& query, const EmbeddingSet& gallery);

// Valid gallery indices for one query, ascending by distance with ties
// broken by index. Junk entries and (when cross_camera) same-id same-camera
// entries are removed.
std::vector<std::size_t> rank_gallery(std::span<const double> dist_row, int query_id, int query_camera,
                                      const EmbeddingSet& gallery, bool cross_camera = true);

// AP = mean over positives j (1-based) of j / rank_j. Queries without a
// valid positive are skipped; throws when none remains.
EvalResult evaluate_distances(const DistanceMatrix& dist, const EmbeddingSet& query, const EmbeddingSet& gallery,
                              const EvalOptions& options = {});
EvalResult cmc_and_map(const EmbeddingSet& query, const EmbeddingSet& gallery, const EvalOptions& options = {});

// Binary layout: one line of JSON {"count":..,"dim":..,"role":"query"|"gallery"}
// then count*dim little-endian float32. Metadata sits in <path>.csv with
// header "index,identity,camera,junk_flag".
void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& set);
EmbeddingSet read_embeddings(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& path);

}  // namespace partreid::metrics

#endif  // PARTREID_METRICS_HPP_
