#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "raidx/label.hpp"

namespace raidx {

class BuildError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class QueryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IndexFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Neighbor {
  std::size_t id = 0;
  double similarity = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct RetrievalResult {
  std::optional<std::size_t> query_id;
  std::vector<Neighbor> neighbors;
  std::size_t n_real = 0;
  std::size_t n_fake = 0;

  std::size_t k() const { return neighbors.size(); }
};

struct RetrievalSummary {
  std::string text;
  std::size_t k = 0;
  std::size_t n_real = 0;
  std::size_t n_fake = 0;
};

/// Exact cosine-similarity index over labelled embeddings.
///
/// Vectors are kept as unit-length float32 (the on-disk representation) and
/// re-normalized to float64 for scoring, so an index built in memory and the
/// same index loaded from disk score queries bit-identically.
class EmbeddingIndex {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  static EmbeddingIndex build(const std::vector<std::vector<double>>& embeddings,
                              const std::vector<Label>& labels) {
    if (embeddings.empty()) throw BuildError("build_index: no embeddings");
    if (embeddings.size() != labels.size())
      throw BuildError("build_index: " + std::to_string(embeddings.size()) +
                       " embeddings but " + std::to_string(labels.size()) + " labels");
    const std::size_t dim = embeddings.front().size();
    if (dim == 0) throw BuildError("build_index: zero-dimensional embeddings");
    std::vector<float> stored;
    stored.reserve(embeddings.size() * dim);
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
      const auto& v = embeddings[i];
      if (v.size() != dim)
        throw BuildError("build_index: vector " + std::to_string(i) + " has dim " +
                         std::to_string(v.size()) + ", expected " + std::to_string(dim));
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (!(norm > 0.0) || !std::isfinite(norm))
        throw BuildError("build_index: vector " + std::to_string(i) +
                         " is zero or non-finite");
      for (double x : v) stored.push_back(static_cast<float>(x / norm));
    }
    return EmbeddingIndex(dim, std::move(stored), labels);
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return labels_.size(); }
  Label label(std::size_t id) const { return labels_.at(id); }
  const std::vector<Label>& labels() const { return labels_; }
  std::span<const double> vector(std::size_t id) const {
    return {vectors_.data() + id * dim_, dim_};
  }

  /// Exact top-k by cosine similarity; ties go to the smaller id.
  RetrievalResult top_k(std::span<const double> query, std::size_t k) const {
    return search(query, k, std::nullopt);
  }

  /// As top_k, but never returns `exclude_id` (leave-one-out lookups for
  /// queries that are themselves in the index).
  RetrievalResult top_k_excluding(std::span<const double> query, std::size_t k,
                                  std::size_t exclude_id) const {
    return search(query, k, exclude_id);
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IndexFormatError("cannot open " + path + " for writing");
    out.write("RDXI", 4);
    put_le<std::uint32_t>(out, kFormatVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(size()));
    for (float f : stored_) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    for (Label l : labels_) out.put(static_cast<char>(l));
    if (!out) throw IndexFormatError("write failed for " + path);
  }

  static EmbeddingIndex load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IndexFormatError("cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    return parse(bytes);
  }

  static EmbeddingIndex parse(std::span<const char> bytes) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (bytes.size() - pos < n) throw IndexFormatError("index file truncated");
    };
    need(4);
    if (std::memcmp(bytes.data(), "RDXI", 4) != 0)
      throw IndexFormatError("bad index magic");
    pos = 4;
    need(16);
    const auto version = get_le<std::uint32_t>(bytes, pos);
    if (version != kFormatVersion)
      throw IndexFormatError("unsupported index version " + std::to_string(version));
    const auto dim = get_le<std::uint32_t>(bytes, pos);
    const auto n = get_le<std::uint64_t>(bytes, pos);
    if (dim == 0 || n == 0) throw IndexFormatError("empty index");
    if (n > (bytes.size() - pos) / (std::uint64_t{dim} * 4 + 1))
      throw IndexFormatError("index file truncated");
    need(n * dim * 4 + n);
    std::vector<float> stored(n * dim);
    for (auto& f : stored) f = std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos));
    std::vector<Label> labels(n);
    for (auto& l : labels) {
      const auto b = static_cast<unsigned char>(bytes[pos++]);
      if (b > 1) throw IndexFormatError("bad label byte");
      l = static_cast<Label>(b);
    }
    if (pos != bytes.size()) throw IndexFormatError("trailing bytes in index file");
    for (float f : stored)
      if (!std::isfinite(f)) throw IndexFormatError("non-finite vector entry");
    return EmbeddingIndex(dim, std::move(stored), std::move(labels));
  }

 private:
  EmbeddingIndex(std::size_t dim, std::vector<float> stored, std::vector<Label> labels)
      : dim_(dim), stored_(std::move(stored)), labels_(std::move(labels)) {
    vectors_.resize(stored_.size());
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      double norm = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) {
        const double x = stored_[i * dim_ + j];
        norm += x * x;
      }
      norm = std::sqrt(norm);
      if (!(norm > 0.0)) throw IndexFormatError("zero vector in index");
      for (std::size_t j = 0; j < dim_; ++j)
        vectors_[i * dim_ + j] = stored_[i * dim_ + j] / norm;
    }
  }

  RetrievalResult search(std::span<const double> query, std::size_t k,
                         std::optional<std::size_t> exclude) const {
    const std::size_t available = size() - (exclude && *exclude < size() ? 1 : 0);
    if (k < 1 || k > available)
      throw QueryError("top_k: k=" + std::to_string(k) + " outside [1, " +
                       std::to_string(available) + "]");
    if (query.size() != dim_)
      throw QueryError("top_k: query dim " + std::to_string(query.size()) +
                       " != index dim " + std::to_string(dim_));
    double qn = 0.0;
    for (double x : query) qn += x * x;
    qn = std::sqrt(qn);
    if (!(qn > 0.0)) throw QueryError("top_k: zero query vector");

    std::vector<Neighbor> all;
    all.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) {
      if (exclude && *exclude == i) continue;
      const double* v = vectors_.data() + i * dim_;
      double dot = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) dot += v[j] * query[j];
      all.push_back({i, dot / qn});
    }
    auto before = [](const Neighbor& a, const Neighbor& b) {
      return a.similarity > b.similarity ||
             (a.similarity == b.similarity && a.id < b.id);
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k),
                      all.end(), before);
    all.resize(k);

    RetrievalResult r;
    r.neighbors = std::move(all);
    for (const auto& nb : r.neighbors)
      (labels_[nb.id] == Label::kReal ? r.n_real : r.n_fake) += 1;
    return r;
  }

  template <typename T>
  static void put_le(std::ofstream& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
      out.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }

  template <typename T>
  static T get_le(std::span<const char> bytes, std::size_t& pos) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += sizeof(T);
    return static_cast<T>(v);
  }

  std::size_t dim_ = 0;
  std::vector<float> stored_;
  std::vector<double> vectors_;
  std::vector<Label> labels_;
};

/// "Among the {k} retrieved images, {n_r} are REAL and {n_f} are FAKE."
inline RetrievalSummary summarize(const RetrievalResult& r) {
  RetrievalSummary s;
  s.k = r.k();
  s.n_real = r.n_real;
  s.n_fake = r.n_fake;
  s.text = "Among the " + std::to_string(s.k) + " retrieved images, " +
           std::to_string(s.n_real) + " are REAL and " + std::to_string(s.n_fake) +
           " are FAKE.";
  return s;
}

/// Query-independent reference sentence used by the static-prompt arm.
inline RetrievalSummary static_summary(std::size_t k, std::size_t real_count,
                                       std::size_t fake_count) {
  if (real_count + fake_count != k)
    throw QueryError("static_summary: " + std::to_string(real_count) + " + " +
                     std::to_string(fake_count) + " != k=" + std::to_string(k));
  RetrievalSummary s;
  s.k = k;
  s.n_real = real_count;
  s.n_fake = fake_count;
  s.text = "Reference information: Among the " + std::to_string(k) +
           " reference images most similar to the current image, " +
           std::to_string(real_count) + " are labeled as REAL, and " +
           std::to_string(fake_count) + " are labeled as FAKE.";
  return s;
}

}  // namespace raidx
