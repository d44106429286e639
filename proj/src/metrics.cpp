#include "partreid/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "partreid/checkpoint.hpp"
#include "partreid/kernels/kernels.hpp"

namespace partreid::metrics {

void EmbeddingSet::validate() const {
  const std::size_t n = ids.size();
  if (cameras.size() != n || junk.size() != n || values.size() != n * dim) {
    throw std::invalid_argument("embedding set: inconsistent lengths (" + std::to_string(n) + " ids, " +
                                std::to_string(cameras.size()) + " cameras, " + std::to_string(junk.size()) +
                                " junk flags, " + std::to_string(values.size()) + " values for dim " +
                                std::to_string(dim) + ")");
  }
  for (int c : cameras) {
    if (c < 0) throw std::invalid_argument("embedding set: negative camera id");
  }
}

nlohmann::json EvalResult::to_json() const { return {{"cmc", cmc}, {"map", map}}; }

DistanceMatrix pairwise_euclidean(const EmbeddingSet& query, const EmbeddingSet& gallery) {
  query.validate();
  gallery.validate();
  if (query.dim != gallery.dim) {
    throw std::invalid_argument("pairwise_euclidean: dimension mismatch " + std::to_string(query.dim) + " vs " +
                                std::to_string(gallery.dim));
  }
  DistanceMatrix d{query.size(), gallery.size(), std::vector<double>(query.size() * gallery.size())};
  kernels::pairwise_sqdist<double>(d.rows, d.cols, query.dim, query.values, gallery.values, d.values);
  for (double& v : d.values) v = std::sqrt(v);
  return d;
}

std::vector<std::size_t> rank_gallery(std::span<const double> dist_row, int query_id, int query_camera,
                                      const EmbeddingSet& gallery, bool cross_camera) {
  std::vector<std::size_t> order;
  order.reserve(gallery.size());
  for (std::size_t j = 0; j < gallery.size(); ++j) {
    if (gallery.junk[j]) continue;
    if (cross_camera && gallery.ids[j] == query_id && gallery.cameras[j] == query_camera) continue;
    order.push_back(j);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist_row[a] < dist_row[b]; });
  return order;
}

EvalResult evaluate_distances(const DistanceMatrix& dist, const EmbeddingSet& query, const EmbeddingSet& gallery,
                              const EvalOptions& options) {
  if (dist.rows != query.size() || dist.cols != gallery.size()) {
    throw std::invalid_argument("evaluate: distance matrix does not match the sets");
  }
  if (options.k_max == 0) throw std::invalid_argument("evaluate: k_max must be positive");
  std::vector<double> ap(query.size(), 0.0);
  std::vector<std::size_t> first_hit(query.size(), 0);
  std::vector<std::uint8_t> valid(query.size(), 0);
#pragma omp parallel for schedule(dynamic) if (!deterministic())
  for (std::size_t q = 0; q < query.size(); ++q) {
    if (query.junk[q] || query.ids[q] < 0) continue;
    const auto order = rank_gallery(dist.row(q), query.ids[q], query.cameras[q], gallery, options.cross_camera);
    std::size_t hits = 0;
    double precision_sum = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery.ids[order[r]] != query.ids[q]) continue;
      ++hits;
      if (hits == 1) first_hit[q] = r + 1;
      precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    if (hits == 0) continue;
    valid[q] = 1;
    ap[q] = precision_sum / static_cast<double>(hits);
  }
  EvalResult res;
  res.cmc.assign(options.k_max, 0.0);
  for (std::size_t q = 0; q < query.size(); ++q) {
    if (!valid[q]) continue;
    res.evaluated_queries.push_back(q);
    res.average_precision.push_back(ap[q]);
    for (std::size_t k = first_hit[q]; k <= options.k_max; ++k) res.cmc[k - 1] += 1.0;
  }
  if (res.evaluated_queries.empty()) throw std::runtime_error("evaluate: no query has a valid gallery positive");
  const double nq = static_cast<double>(res.evaluated_queries.size());
  for (double& c : res.cmc) c /= nq;
  res.map = std::accumulate(res.average_precision.begin(), res.average_precision.end(), 0.0) / nq;
  return res;
}

EvalResult cmc_and_map(const EmbeddingSet& query, const EmbeddingSet& gallery, const EvalOptions& options) {
  return evaluate_distances(pairwise_euclidean(query, gallery), query, gallery, options);
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".csv");
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& set) {
  set.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write embeddings to " + path.string());
  const nlohmann::json header = {
      {"count", set.size()}, {"dim", set.dim}, {"role", set.role == Role::kQuery ? "query" : "gallery"}};
  os << header.dump() << '\n';
  std::vector<float> f(set.values.begin(), set.values.end());
  io::write_le<float>(os, f);
  std::ofstream csv(sidecar_path(path));
  if (!csv) throw std::runtime_error("cannot write " + sidecar_path(path).string());
  csv << "index,identity,camera,junk_flag\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    csv << i << ',' << set.ids[i] << ',' << set.cameras[i] << ',' << static_cast<int>(set.junk[i]) << '\n';
  }
}

EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open embeddings " + path.string());
  std::string line;
  std::getline(is, line);
  const auto header = nlohmann::json::parse(line);
  EmbeddingSet set;
  const auto count = header.at("count").get<std::size_t>();
  set.dim = header.at("dim").get<std::size_t>();
  const auto role = header.at("role").get<std::string>();
  if (role != "query" && role != "gallery") throw std::runtime_error("embeddings: unknown role '" + role + "'");
  set.role = role == "query" ? Role::kQuery : Role::kGallery;
  std::vector<float> f(count * set.dim);
  io::read_le<float>(is, f);
  set.values.assign(f.begin(), f.end());

  std::ifstream csv(sidecar_path(path));
  if (!csv) throw std::runtime_error("missing metadata sidecar " + sidecar_path(path).string());
  std::getline(csv, line);
  set.ids.assign(count, 0);
  set.cameras.assign(count, 0);
  set.junk.assign(count, 0);
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<long> f4;
    while (std::getline(ss, cell, ',')) f4.push_back(std::stol(cell));
    if (f4.size() != 4 || f4[0] < 0 || static_cast<std::size_t>(f4[0]) >= count) {
      throw std::runtime_error("embeddings sidecar: malformed row '" + line + "'");
    }
    const auto i = static_cast<std::size_t>(f4[0]);
    set.ids[i] = static_cast<int>(f4[1]);
    set.cameras[i] = static_cast<int>(f4[2]);
    set.junk[i] = f4[3] != 0;
    ++rows;
  }
  if (rows != count) throw std::runtime_error("embeddings sidecar has " + std::to_string(rows) + " rows, expected " + std::to_string(count));
  set.validate();
  return set;
}

}  // namespace partreid::metrics
