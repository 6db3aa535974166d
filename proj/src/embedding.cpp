#include "nanopro/embedding.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "nanopro/error.hpp"
#include "nanopro/rng.hpp"
#include "nanopro/tsv.hpp"

namespace nanopro {

static_assert(std::endian::native == std::endian::little, "cache format assumes little-endian");

std::string_view modality_name(Modality m) { return m == Modality::Protein ? "protein" : "text"; }

std::optional<Modality> parse_modality(std::string_view text) {
  if (text == "protein") return Modality::Protein;
  if (text == "text") return Modality::Text;
  return std::nullopt;
}

std::size_t modality_dim(Modality m) { return m == Modality::Protein ? kProteinDim : kTextDim; }

// ---- prompts ----

namespace {

constexpr std::string_view kPreamble =
    "Task: predict whether the protein below is adsorbed into the corona of the described "
    "nanomaterial, and how abundant it is among the corona proteins.\n"
    "Background: when a nanomaterial enters a biological fluid, proteins adsorb onto its surface "
    "and form a protein corona. The corona composition depends on the physicochemical properties "
    "of the nanomaterial, the incubation conditions and the separation protocol.\n"
    "Context: the sample is described by 29 features in four groups: nanomaterial properties, "
    "incubation conditions, separation conditions and proteomic depth.\n"
    "Sample:\n";

std::string render_value(const FeatureValue& v, const FeatureDef& def) {
  return std::visit(
      [&](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, Unknown>) {
          return "Unknown";
        } else if constexpr (std::is_same_v<T, Numeric>) {
          const std::string unit = x.unit.empty() ? std::string(def.unit) : x.unit;
          auto s = tsv::format_double(x.value);
          return unit.empty() ? s : s + " " + unit;
        } else {
          return x.text;
        }
      },
      v);
}

}  // namespace

PromptText render_prompt(const SampleRecord& record, const std::set<std::string>& mask_set) {
  const auto& schema = FeatureSchema::standard();
  std::string text(kPreamble);
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto& def = schema[i];
    text += def.display_name;
    text += ": ";
    if (mask_set.count(std::string(def.id)) || i >= record.features.size()) {
      text += "Unknown";
    } else {
      text += render_value(record.features[i], def);
    }
    text += '\n';
  }
  return {text, sha256_hex(text)};
}

// ---- synthetic providers ----

namespace {

// Gaussian projection rows are generated on first use from a per-row seed, so
// the full matrix never has to be materialized.
class LazyGaussian {
 public:
  LazyGaussian(std::uint64_t seed, std::size_t buckets, std::size_t dim)
      : seed_(seed), dim_(dim), rows_(buckets) {}

  const std::vector<float>& row(std::size_t bucket) {
    {
      std::shared_lock lock(mutex_);
      if (rows_[bucket]) return *rows_[bucket];
    }
    std::unique_lock lock(mutex_);
    if (!rows_[bucket]) {
      auto r = std::make_unique<std::vector<float>>(dim_);
      Rng rng(mix_seed(seed_, bucket));
      for (auto& v : *r) v = static_cast<float>(rng.normal());
      rows_[bucket] = std::move(r);
    }
    return *rows_[bucket];
  }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
  std::vector<std::unique_ptr<std::vector<float>>> rows_;
  std::shared_mutex mutex_;
};

std::vector<float> project_counts(const std::map<std::size_t, int>& counts, LazyGaussian& g,
                                  std::size_t dim) {
  std::vector<double> acc(dim, 0.0);
  for (const auto& [bucket, count] : counts) {
    const auto& r = g.row(bucket);
    for (std::size_t j = 0; j < dim; ++j) acc[j] += count * static_cast<double>(r[j]);
  }
  double norm = 0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 0)) throw Error(Errc::Provider, "degenerate embedding");
  std::vector<float> out(dim);
  for (std::size_t j = 0; j < dim; ++j) out[j] = static_cast<float>(acc[j] / norm);
  return out;
}

}  // namespace

struct SyntheticProteinProvider::Projection : LazyGaussian {
  using LazyGaussian::LazyGaussian;
};

SyntheticProteinProvider::SyntheticProteinProvider(std::uint64_t seed, std::size_t dim)
    : id_("synthetic-protein:" + std::to_string(seed)),
      dim_(dim),
      proj_(std::make_unique<Projection>(mix_seed(seed, 0x50524f54ULL), kBuckets, dim)) {}

SyntheticProteinProvider::~SyntheticProteinProvider() = default;

std::vector<float> SyntheticProteinProvider::compute(std::string_view input) {
  if (input.empty()) throw Error(Errc::Provider, "empty input");
  std::map<std::size_t, int> counts;
  if (input.size() < 3) {
    counts[fnv1a(input) % kBuckets]++;
  } else {
    for (std::size_t i = 0; i + 3 <= input.size(); ++i) counts[fnv1a(input.substr(i, 3)) % kBuckets]++;
  }
  return project_counts(counts, *proj_, dim_);
}

struct SyntheticTextProvider::Projection : LazyGaussian {
  using LazyGaussian::LazyGaussian;
};

SyntheticTextProvider::SyntheticTextProvider(std::uint64_t seed, std::size_t dim)
    : id_("synthetic-text:" + std::to_string(seed)),
      dim_(dim),
      proj_(std::make_unique<Projection>(mix_seed(seed, 0x54455854ULL), kBuckets, dim)) {}

SyntheticTextProvider::~SyntheticTextProvider() = default;

std::vector<std::string> text_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (const char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u) || c == ',' || c == ':' || c == ';' || c == '(' || c == ')') {
      flush();
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  flush();
  return out;
}

std::vector<float> SyntheticTextProvider::compute(std::string_view input) {
  const auto tokens = text_tokens(input);
  if (tokens.empty()) throw Error(Errc::Provider, "empty input");
  std::map<std::size_t, int> counts;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    counts[fnv1a("u:" + tokens[i]) % kBuckets]++;
    if (i + 1 < tokens.size()) counts[fnv1a("b:" + tokens[i] + " " + tokens[i + 1]) % kBuckets]++;
  }
  return project_counts(counts, *proj_, dim_);
}

// ---- validation ----

EmbeddingVector embed_with(std::string_view input, EmbeddingProvider& provider) {
  if (input.empty()) throw Error(Errc::Provider, "empty input");
  auto values = provider.compute(input);
  if (values.size() != provider.dim()) {
    throw Error(Errc::Dim, provider.provider_id() + " returned " + std::to_string(values.size()) +
                               " values, expected " + std::to_string(provider.dim()));
  }
  for (float v : values) {
    if (!std::isfinite(v)) throw Error(Errc::Provider, provider.provider_id() + " returned a non-finite value");
  }
  return {std::move(values), provider.dim(), provider.provider_id()};
}

EmbeddingVector embed_protein(std::string_view sequence, EmbeddingProvider& provider) {
  if (sequence.empty()) throw Error(Errc::BadSeq, "empty sequence");
  for (char c : sequence) {
    if (!is_accepted_residue(c)) throw Error(Errc::BadSeq, std::string("residue '") + c + "'");
  }
  return embed_with(sequence, provider);
}

EmbeddingVector embed_text(const PromptText& prompt, EmbeddingProvider& provider) {
  return embed_with(prompt.text, provider);
}

// ---- cache ----

namespace {

constexpr std::uint32_t kMaxProviderLen = 4096;
constexpr std::uint32_t kMaxDim = 1u << 20;

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

}  // namespace

EmbeddingCache::EmbeddingCache(std::filesystem::path path) : path_(std::move(path)) { load(); }

std::filesystem::path EmbeddingCache::index_path() const {
  auto p = path_;
  p += ".idx";
  return p;
}

void EmbeddingCache::load() {
  if (!std::filesystem::exists(path_)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream(path_, std::ios::binary);
    write_index();
    return;
  }
  const auto data_size = std::filesystem::file_size(path_);
  bool ok = std::filesystem::exists(index_path());
  if (ok) {
    std::ifstream in(index_path());
    std::string line;
    std::uint64_t end = 0;
    std::map<Sha256, Entry> idx;
    try {
      while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto cells = tsv::split(line);
        if (cells.size() != 4) throw Error(Errc::Cache, "index line");
        Entry e{cells[1], static_cast<std::uint32_t>(std::stoul(cells[2])), std::stoull(cells[3])};
        end = std::max<std::uint64_t>(end, e.offset + 4ull * e.dim);
        idx[from_hex(cells[0])] = e;
      }
      ok = end == data_size;
    } catch (const std::exception&) {
      ok = false;
    }
    if (ok) index_ = std::move(idx);
  }
  if (!ok) {
    scan_data();
    write_index();
    rebuilt_ = true;
  }
}

void EmbeddingCache::scan_data() {
  index_.clear();
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw Error(Errc::Cache, "cannot open " + path_.string());
  const auto size = std::filesystem::file_size(path_);
  std::uint64_t pos = 0;
  auto need = [&](std::uint64_t n) {
    if (pos + n > size) throw Error(Errc::Cache, path_.string() + ": truncated record at byte " + std::to_string(pos));
  };
  while (pos < size) {
    Sha256 key;
    std::uint32_t plen = 0, dim = 0;
    need(36);
    in.read(reinterpret_cast<char*>(key.data()), 32);
    in.read(reinterpret_cast<char*>(&plen), 4);
    pos += 36;
    if (plen > kMaxProviderLen) throw Error(Errc::Cache, path_.string() + ": bad provider length");
    need(plen + 4ull);
    std::string provider(plen, '\0');
    in.read(provider.data(), plen);
    in.read(reinterpret_cast<char*>(&dim), 4);
    pos += plen + 4ull;
    if (dim == 0 || dim > kMaxDim) throw Error(Errc::Cache, path_.string() + ": bad dim");
    need(4ull * dim);
    index_[key] = Entry{provider, dim, pos};
    pos += 4ull * dim;
    in.seekg(static_cast<std::streamoff>(pos));
  }
}

void EmbeddingCache::write_index() const {
  std::ofstream out(index_path(), std::ios::trunc);
  out << "# key\tprovider_id\tdim\toffset\n";
  for (const auto& [key, e] : index_) {
    out << to_hex(key) << '\t' << e.provider_id << '\t' << e.dim << '\t' << e.offset << '\n';
  }
  if (!out) throw Error(Errc::Io, "cannot write " + index_path().string());
}

EmbeddingVector EmbeddingCache::read_payload(const Entry& e) const {
  std::ifstream in(path_, std::ios::binary);
  in.seekg(static_cast<std::streamoff>(e.offset));
  EmbeddingVector v{std::vector<float>(e.dim), e.dim, e.provider_id};
  in.read(reinterpret_cast<char*>(v.values.data()), static_cast<std::streamsize>(4ull * e.dim));
  if (!in) throw Error(Errc::Cache, path_.string() + ": payload unreadable");
  for (float x : v.values) {
    if (!std::isfinite(x)) throw Error(Errc::Cache, path_.string() + ": non-finite payload");
  }
  return v;
}

std::optional<EmbeddingVector> EmbeddingCache::get(const Sha256& key) const {
  std::shared_lock lock(mutex_);
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return read_payload(it->second);
}

void EmbeddingCache::put(const Sha256& key, const EmbeddingVector& vector) {
  if (vector.values.size() != vector.dim || vector.dim == 0 || vector.dim > kMaxDim) {
    throw Error(Errc::Dim, "cache put with inconsistent dim");
  }
  if (vector.provider_id.size() > kMaxProviderLen || vector.provider_id.find_first_of("\t\n") != std::string::npos) {
    throw Error(Errc::Cache, "provider id not storable");
  }
  std::string rec(reinterpret_cast<const char*>(key.data()), 32);
  put_u32(rec, static_cast<std::uint32_t>(vector.provider_id.size()));
  rec += vector.provider_id;
  put_u32(rec, static_cast<std::uint32_t>(vector.dim));
  const auto header = rec.size();
  rec.append(reinterpret_cast<const char*>(vector.values.data()), 4 * vector.dim);

  std::unique_lock lock(mutex_);
  const auto start = std::filesystem::file_size(path_);
  {
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    out.flush();
    if (!out) throw Error(Errc::Io, "cannot append to " + path_.string());
  }
  Entry e{vector.provider_id, static_cast<std::uint32_t>(vector.dim), start + header};
  index_[key] = e;
  std::ofstream idx(index_path(), std::ios::app);
  idx << to_hex(key) << '\t' << e.provider_id << '\t' << e.dim << '\t' << e.offset << '\n';
}

bool EmbeddingCache::contains(const Sha256& key) const {
  std::shared_lock lock(mutex_);
  return index_.count(key) > 0;
}

std::size_t EmbeddingCache::size() const {
  std::shared_lock lock(mutex_);
  return index_.size();
}

std::vector<Sha256> EmbeddingCache::keys() const {
  std::shared_lock lock(mutex_);
  std::vector<Sha256> out;
  for (const auto& [k, e] : index_) out.push_back(k);
  return out;
}

EmbeddingVector cache_get_or_compute(const Sha256& key, std::string_view input,
                                     EmbeddingProvider& provider, EmbeddingCache* cache) {
  if (cache) {
    if (auto hit = cache->get(key)) {
      if (hit->dim != provider.dim() || hit->provider_id != provider.provider_id()) {
        throw Error(Errc::Cache, "cached entry " + to_hex(key) + " is " + hit->provider_id + "/" +
                                     std::to_string(hit->dim) + ", requested " +
                                     provider.provider_id() + "/" + std::to_string(provider.dim()));
      }
      return std::move(*hit);
    }
  }
  auto v = embed_with(input, provider);
  if (cache) cache->put(key, v);
  return v;
}

EmbeddingVector cached_embed_protein(std::string_view sequence, EmbeddingProvider& provider,
                                     EmbeddingCache* cache) {
  if (sequence.empty()) throw Error(Errc::BadSeq, "empty sequence");
  for (char c : sequence) {
    if (!is_accepted_residue(c)) throw Error(Errc::BadSeq, std::string("residue '") + c + "'");
  }
  return cache_get_or_compute(sha256(sequence), sequence, provider, cache);
}

EmbeddingVector cached_embed_text(const PromptText& prompt, EmbeddingProvider& provider,
                                  EmbeddingCache* cache) {
  return cache_get_or_compute(from_hex(prompt.canonical_hash), prompt.text, provider, cache);
}

// ---- precomputed ----

PrecomputedProvider::PrecomputedProvider(const std::filesystem::path& cache_path, Modality modality,
                                         std::string provider_id)
    : store_(cache_path), modality_(modality), id_(std::move(provider_id)) {}

std::vector<float> PrecomputedProvider::compute(std::string_view input) {
  auto hit = store_.get(sha256(input));
  if (!hit) throw Error(Errc::Provider, "no precomputed vector for input " + sha256_hex(input));
  return std::move(hit->values);
}

// ---- remote ----

namespace {

struct ParsedEndpoint {
  std::string base;  // scheme://host:port
  std::string path;  // prefix + /embed
};

ParsedEndpoint parse_endpoint(const std::string& endpoint) {
  const auto scheme = endpoint.find("://");
  if (scheme == std::string::npos) throw Error(Errc::Config, "endpoint needs a scheme: " + endpoint);
  const auto slash = endpoint.find('/', scheme + 3);
  ParsedEndpoint p;
  p.base = endpoint.substr(0, slash);
  std::string prefix = slash == std::string::npos ? "" : endpoint.substr(slash);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  p.path = prefix + "/embed";
  return p;
}

std::vector<float> parse_response(const std::string& body, std::size_t expected_dim) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::Http, std::string("malformed response: ") + e.what());
  }
  if (!j.contains("vector") || !j["vector"].is_array()) throw Error(Errc::Http, "response lacks vector");
  const auto& arr = j["vector"];
  if (arr.size() != expected_dim || (j.contains("dim") && j["dim"] != expected_dim)) {
    throw Error(Errc::Dim, "remote returned " + std::to_string(arr.size()) + " values, expected " +
                               std::to_string(expected_dim));
  }
  std::vector<float> out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_number()) throw Error(Errc::Dim, "non-numeric vector entry");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw Error(Errc::Dim, "non-finite vector entry");
    out.push_back(static_cast<float>(d));
  }
  return out;
}

}  // namespace

std::vector<float> remote_embed(const std::string& endpoint, Modality modality,
                                std::string_view input, const RemoteOptions& options) {
  const auto ep = parse_endpoint(endpoint);
  httplib::Client cli(ep.base);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options.timeout - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  cli.set_write_timeout(secs.count(), usecs.count());

  const std::string body =
      nlohmann::json{{"modality", modality_name(modality)}, {"input", std::string(input)}}.dump();
  auto backoff = options.backoff;
  std::string last;
  for (int attempt = 0; attempt <= options.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    auto res = cli.Post(ep.path, body, "application/json");
    if (!res) {
      last = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) return parse_response(res->body, modality_dim(modality));
    if (res->status >= 500) {
      last = "status " + std::to_string(res->status);
      continue;
    }
    throw Error(Errc::Http, "status " + std::to_string(res->status) + " from " + endpoint);
  }
  throw Error(Errc::Timeout, "gave up after " + std::to_string(options.max_retries + 1) +
                                 " attempts: " + last);
}

struct RemoteProvider::Gate {
  std::mutex m;
  std::condition_variable cv;
  int free = 0;
};

RemoteProvider::RemoteProvider(std::string endpoint, Modality modality, RemoteOptions options)
    : endpoint_(std::move(endpoint)),
      modality_(modality),
      options_(options),
      id_("remote:" + endpoint_ + ":" + std::string(modality_name(modality))),
      gate_(std::make_unique<Gate>()) {
  gate_->free = std::max(1, options_.max_in_flight);
}

RemoteProvider::~RemoteProvider() = default;

std::vector<float> RemoteProvider::compute(std::string_view input) {
  {
    std::unique_lock lock(gate_->m);
    gate_->cv.wait(lock, [&] { return gate_->free > 0; });
    --gate_->free;
  }
  struct Release {
    Gate& g;
    ~Release() {
      {
        std::lock_guard lock(g.m);
        ++g.free;
      }
      g.cv.notify_one();
    }
  } release{*gate_};
  return remote_embed(endpoint_, modality_, input, options_);
}

}  // namespace nanopro
