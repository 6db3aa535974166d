#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "nanopro/digest.hpp"
#include "nanopro/records.hpp"

namespace nanopro {

enum class Modality { Protein, Text };

inline constexpr std::size_t kProteinDim = 2560;
inline constexpr std::size_t kTextDim = 4096;

std::string_view modality_name(Modality m);
std::optional<Modality> parse_modality(std::string_view text);
std::size_t modality_dim(Modality m);

struct PromptText {
  std::string text;
  std::string canonical_hash;  // sha256 hex of text
};

// Task preamble followed by one "name: value" line per feature in schema
// order. Masked and missing features read "Unknown".
PromptText render_prompt(const SampleRecord& record, const std::set<std::string>& mask_set = {});

struct EmbeddingVector {
  std::vector<float> values;
  std::size_t dim = 0;
  std::string provider_id;
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual const std::string& provider_id() const = 0;
  virtual Modality modality() const = 0;
  virtual std::size_t dim() const = 0;
  virtual bool deterministic() const = 0;
  // Raw output; embed_* validate it.
  virtual std::vector<float> compute(std::string_view input) = 0;
};

// Overlapping 3-mer counts hashed into 4096 buckets, projected by a seeded
// Gaussian matrix and L2-normalized.
class SyntheticProteinProvider : public EmbeddingProvider {
 public:
  explicit SyntheticProteinProvider(std::uint64_t seed = 0, std::size_t dim = kProteinDim);
  ~SyntheticProteinProvider() override;
  const std::string& provider_id() const override { return id_; }
  Modality modality() const override { return Modality::Protein; }
  std::size_t dim() const override { return dim_; }
  bool deterministic() const override { return true; }
  std::vector<float> compute(std::string_view input) override;

  static constexpr std::size_t kBuckets = 4096;

 private:
  struct Projection;
  std::string id_;
  std::size_t dim_;
  std::unique_ptr<Projection> proj_;
};

// Word unigram + bigram counts hashed into 8192 buckets, seeded Gaussian
// projection, L2-normalized.
class SyntheticTextProvider : public EmbeddingProvider {
 public:
  explicit SyntheticTextProvider(std::uint64_t seed = 0, std::size_t dim = kTextDim);
  ~SyntheticTextProvider() override;
  const std::string& provider_id() const override { return id_; }
  Modality modality() const override { return Modality::Text; }
  std::size_t dim() const override { return dim_; }
  bool deterministic() const override { return true; }
  std::vector<float> compute(std::string_view input) override;

  static constexpr std::size_t kBuckets = 8192;

 private:
  struct Projection;
  std::string id_;
  std::size_t dim_;
  std::unique_ptr<Projection> proj_;
};

std::vector<std::string> text_tokens(std::string_view text);

// Validates dim and finiteness of provider output. Empty input is E_PROVIDER.
EmbeddingVector embed_with(std::string_view input, EmbeddingProvider& provider);
// Sequence must be non-empty over accepted residues (E_BAD_SEQ otherwise).
EmbeddingVector embed_protein(std::string_view sequence, EmbeddingProvider& provider);
EmbeddingVector embed_text(const PromptText& prompt, EmbeddingProvider& provider);

// Append-only binary store keyed by sha256 of the input text. Each record is
// key(32) | provider_id length (u32 LE) | provider_id | dim (u32 LE) | dim x f32 LE.
// "<path>.idx" is a TSV index rebuilt from the data file whenever stale.
// Readers share a lock; insertion takes it exclusively.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path path);

  struct Entry {
    std::string provider_id;
    std::uint32_t dim = 0;
    std::uint64_t offset = 0;  // of the float payload
  };

  std::optional<EmbeddingVector> get(const Sha256& key) const;
  // Last write wins for a repeated key.
  void put(const Sha256& key, const EmbeddingVector& vector);
  bool contains(const Sha256& key) const;
  std::size_t size() const;
  std::vector<Sha256> keys() const;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path index_path() const;
  bool index_was_rebuilt() const { return rebuilt_; }

 private:
  void load();
  void scan_data();
  void write_index() const;
  EmbeddingVector read_payload(const Entry& e) const;

  std::filesystem::path path_;
  std::map<Sha256, Entry> index_;
  mutable std::shared_mutex mutex_;
  bool rebuilt_ = false;
};

// Hit: the stored vector, bit-identical, without calling the provider.
// Miss: compute, persist, return. E_CACHE if the stored entry's provider or
// dim differs from the provider's.
EmbeddingVector cache_get_or_compute(const Sha256& key, std::string_view input,
                                     EmbeddingProvider& provider, EmbeddingCache* cache);
EmbeddingVector cached_embed_protein(std::string_view sequence, EmbeddingProvider& provider,
                                     EmbeddingCache* cache);
EmbeddingVector cached_embed_text(const PromptText& prompt, EmbeddingProvider& provider,
                                  EmbeddingCache* cache);

// Serves vectors produced offline from a cache file; unknown inputs are
// E_PROVIDER.
class PrecomputedProvider : public EmbeddingProvider {
 public:
  PrecomputedProvider(const std::filesystem::path& cache_path, Modality modality,
                      std::string provider_id = "precomputed");
  const std::string& provider_id() const override { return id_; }
  Modality modality() const override { return modality_; }
  std::size_t dim() const override { return modality_dim(modality_); }
  bool deterministic() const override { return true; }
  std::vector<float> compute(std::string_view input) override;

 private:
  EmbeddingCache store_;
  Modality modality_;
  std::string id_;
};

struct RemoteOptions {
  int max_retries = 3;  // retries after the first attempt
  std::chrono::milliseconds backoff{20};  // doubled after each failure
  std::chrono::milliseconds timeout{5000};
  int max_in_flight = 4;
};

// POST <endpoint>/embed {"modality", "input"} -> {"dim", "vector"}.
// 4xx is E_HTTP at once; 5xx and transport errors retry with exponential
// backoff, then E_TIMEOUT.
class RemoteProvider : public EmbeddingProvider {
 public:
  RemoteProvider(std::string endpoint, Modality modality, RemoteOptions options = {});
  ~RemoteProvider() override;
  const std::string& provider_id() const override { return id_; }
  Modality modality() const override { return modality_; }
  std::size_t dim() const override { return modality_dim(modality_); }
  bool deterministic() const override { return false; }
  std::vector<float> compute(std::string_view input) override;

 private:
  struct Gate;
  std::string endpoint_;
  Modality modality_;
  RemoteOptions options_;
  std::string id_;
  std::unique_ptr<Gate> gate_;
};

std::vector<float> remote_embed(const std::string& endpoint, Modality modality,
                                std::string_view input, const RemoteOptions& options = {});

}  // namespace nanopro
