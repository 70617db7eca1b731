#include "clface/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "clface/errors.hpp"
#include "clface/rng.hpp"

namespace clface {

void IdentityDataset::validate() const {
  std::set<int> ids(identity_ids.begin(), identity_ids.end());
  if (ids.size() != identity_ids.size()) {
    throw ValidationError("identity_ids must be unique");
  }
  for (const Sample& s : samples) {
    if (!ids.count(s.identity_id)) {
      throw ValidationError("sample identity not in identity set");
    }
  }
}

std::vector<int> IdentityDataset::indices_of(int identity) const {
  std::vector<int> out;
  for (size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].identity_id == identity) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::unordered_map<int, std::vector<int>> IdentityDataset::index_by_identity()
    const {
  std::unordered_map<int, std::vector<int>> out;
  for (size_t i = 0; i < samples.size(); ++i) {
    out[samples[i].identity_id].push_back(static_cast<int>(i));
  }
  return out;
}

IdentityDataset synth_identities(const SynthParams& p) {
  if (p.num_identities < 1 || p.images_per_identity < 1) {
    throw ConfigError("need at least one identity and one image per identity");
  }
  if (p.noise_sigma < 0.0) throw ConfigError("noise sigma must be nonnegative");
  if (p.max_shift < 0) throw ConfigError("max shift must be nonnegative");
  if (p.identity_strength <= 0.0) {
    throw ConfigError("identity_strength must be positive");
  }

  const int C = p.image_shape[0], H = p.image_shape[1], W = p.image_shape[2];
  if (C < 1 || H < 1 || W < 1) throw ConfigError("image shape must be positive");

  IdentityDataset ds;
  ds.split_tag = p.split_tag;
  ds.gen_params = p;

  struct Blob {
    double cy, cx, r;
    std::vector<double> amp;
  };
  auto draw_blobs = [&](Rng& rng, double amplitude) {
    std::vector<Blob> blobs(std::max(1, p.blob_count));
    for (Blob& b : blobs) {
      b.cy = rng.uniform(0.0, H - 1.0);
      b.cx = rng.uniform(0.0, W - 1.0);
      b.r = rng.uniform(std::max(1.0, H / 8.0), std::max(2.0, H / 3.0));
      b.amp.resize(C);
      for (double& a : b.amp) a = rng.uniform(-amplitude, amplitude);
    }
    return blobs;
  };
  auto render = [&](const std::vector<Blob>& blobs, Tensor3& img) {
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          double v = 0.0;
          for (const Blob& b : blobs) {
            const double dy = y - b.cy, dx = x - b.cx;
            v += b.amp[c] * std::exp(-(dy * dy + dx * dx) / (2.0 * b.r * b.r));
          }
          img.at(c, y, x) += v;
        }
      }
    }
  };

  // Dataset-wide shared component; every identity rides on it.
  Rng crng(mix_seed(p.seed, 0x636f6d6dULL));
  const std::vector<Blob> common = draw_blobs(crng, 1.0);
  Tensor3 shared(C, H, W);
  render(common, shared);

  // Fixed nuisance patterns for the structured noise process.
  std::vector<Tensor3> nuisance;
  if (p.noise_sigma > 0.0) {
    for (int k = 0; k < std::max(1, p.noise_rank); ++k) {
      Rng nrng(mix_seed(p.seed, 0x6e756973ULL ^ static_cast<uint64_t>(k)));
      const std::vector<Blob> nb = draw_blobs(nrng, 1.0);
      Tensor3 field(C, H, W);
      render(nb, field);
      nuisance.push_back(std::move(field));
    }
  }

  for (int k = 0; k < p.num_identities; ++k) {
    const int identity = p.identity_offset + k;
    ds.identity_ids.push_back(identity);

    // Smooth identity-specific component. Smoothness keeps shifted copies of
    // the same identity strongly correlated, which is what makes small-shift
    // augmentation meaningful.
    Rng trng(mix_seed(p.seed, 0x74656d70ULL ^ (static_cast<uint64_t>(identity) << 16)));
    const std::vector<Blob> own = draw_blobs(trng, p.identity_strength);
    Tensor3 tmpl = shared;
    render(own, tmpl);

    for (int j = 0; j < p.images_per_identity; ++j) {
      Rng srng(mix_seed(p.seed, 0x73616d70ULL ^
                                    (static_cast<uint64_t>(identity) << 20) ^
                                    static_cast<uint64_t>(j)));
      int dy = 0, dx = 0;
      if (p.max_shift > 0) {
        dy = srng.uniform_int(-p.max_shift, p.max_shift);
        dx = srng.uniform_int(-p.max_shift, p.max_shift);
      }
      Sample s;
      s.identity_id = identity;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "id%05d/img%03d", identity, j);
      s.name = buf;
      s.image = Tensor3(C, H, W);
      for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            const int sy = std::clamp(y - dy, 0, H - 1);
            const int sx = std::clamp(x - dx, 0, W - 1);
            s.image.at(c, y, x) = tmpl.at(c, sy, sx);
          }
        }
      }
      // Low-rank Gaussian noise: fixed nuisance patterns with fresh normal
      // coefficients per sample. Smooth and structured, so it is neither
      // pooled away nor learnable-by-accident from a single image.
      if (p.noise_sigma > 0.0) {
        const double scale = p.noise_sigma / std::sqrt(static_cast<double>(nuisance.size()));
        for (const Tensor3& field : nuisance) {
          const double z = scale * srng.normal();
          for (size_t q = 0; q < s.image.data.size(); ++q) {
            s.image.data[q] += z * field.data[q];
          }
        }
      }
      ds.samples.push_back(std::move(s));
    }
  }
  std::sort(ds.identity_ids.begin(), ds.identity_ids.end());
  return ds;
}

void StepPlan::validate() const {
  if (base_fraction <= 0.0 || base_fraction > 1.0) {
    throw ConfigError("base_fraction must lie in (0, 1]");
  }
  if (step_count < 0) throw ConfigError("step_count must be nonnegative");
  if (static_cast<int>(step_identity_sets.size()) != step_count) {
    throw ConfigError("step set count does not match step_count");
  }
  if (base_identities.empty()) throw ConfigError("base identity set is empty");
  if (!allow_overlap) {
    std::set<int> seen(base_identities.begin(), base_identities.end());
    for (const auto& step : step_identity_sets) {
      for (int id : step) {
        if (!seen.insert(id).second) {
          throw ConfigError("identity sets overlap in a disjoint plan");
        }
      }
    }
  }
}

StepPlan make_step_plan(const IdentityDataset& dataset, double base_fraction,
                        int step_count, uint64_t seed, bool allow_overlap) {
  if (base_fraction <= 0.0 || base_fraction > 1.0) {
    throw ConfigError("base_fraction must lie in (0, 1]");
  }
  if (step_count < 0) throw ConfigError("step_count must be nonnegative");

  const int K = static_cast<int>(dataset.identity_ids.size());
  StepPlan plan;
  plan.base_fraction = base_fraction;
  plan.step_count = step_count;
  plan.seed = seed;
  plan.allow_overlap = allow_overlap;
  plan.class_order = dataset.identity_ids;

  Rng rng(mix_seed(seed, 0x706c616eULL));
  rng.shuffle(plan.class_order);

  const int base_count = static_cast<int>(std::floor(base_fraction * K));
  if (base_count < 1) throw ConfigError("base fraction leaves no base identities");
  plan.base_identities.assign(plan.class_order.begin(),
                              plan.class_order.begin() + base_count);

  const int remaining = K - base_count;
  if (step_count > 0 && step_count > remaining && !allow_overlap) {
    throw ConfigError("more steps than remaining identities");
  }
  if (step_count > 0 && remaining == 0) {
    throw ConfigError("no identities left for incremental steps");
  }

  if (step_count > 0) {
    const int q = remaining / step_count;
    const int r = remaining % step_count;
    if (!allow_overlap) {
      int pos = base_count;
      for (int t = 0; t < step_count; ++t) {
        const int size = q + (t < r ? 1 : 0);
        plan.step_identity_sets.emplace_back(plan.class_order.begin() + pos,
                                             plan.class_order.begin() + pos + size);
        pos += size;
      }
    } else {
      // Overlapping schedule: every step draws a near-equal-sized random
      // subset of the whole post-base pool, so identities may recur.
      std::vector<int> pool(plan.class_order.begin() + base_count,
                            plan.class_order.end());
      const int size = std::min(remaining, q + (r > 0 ? 1 : 0));
      for (int t = 0; t < step_count; ++t) {
        std::vector<int> draw = pool;
        Rng srng(mix_seed(seed, 0x73746570ULL ^ static_cast<uint64_t>(t)));
        srng.shuffle(draw);
        plan.step_identity_sets.emplace_back(draw.begin(),
                                             draw.begin() + std::max(1, size));
      }
    }
  }
  plan.validate();
  return plan;
}

UniqueIdentityBatcher::UniqueIdentityBatcher(const IdentityDataset& dataset,
                                             const std::vector<int>& identities,
                                             int batch_size, uint64_t seed)
    : batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  auto index = dataset.index_by_identity();
  for (int id : identities) {
    auto it = index.find(id);
    if (it != index.end() && !it->second.empty()) {
      samples_per_identity_.push_back(it->second);
    }
  }
  if (static_cast<int>(samples_per_identity_.size()) < batch_size) {
    throw ConfigError(
        "fewer distinct identities (" +
        std::to_string(samples_per_identity_.size()) + ") than batch size (" +
        std::to_string(batch_size) + "); reduce the batch size");
  }
}

std::vector<std::vector<int>> UniqueIdentityBatcher::epoch_batches(
    int epoch) const {
  Rng rng(mix_seed(seed_, 0x62617463ULL ^ static_cast<uint64_t>(epoch)));

  // Per-identity queues, shuffled per epoch.
  std::vector<std::vector<int>> queues = samples_per_identity_;
  for (auto& q : queues) rng.shuffle(q);

  std::vector<std::vector<int>> batches;
  while (true) {
    std::vector<int> alive;
    for (size_t i = 0; i < queues.size(); ++i) {
      if (!queues[i].empty()) alive.push_back(static_cast<int>(i));
    }
    if (static_cast<int>(alive.size()) < batch_size_) break;
    rng.shuffle(alive);
    const int groups = static_cast<int>(alive.size()) / batch_size_;
    for (int g = 0; g < groups; ++g) {
      std::vector<int> batch;
      batch.reserve(batch_size_);
      for (int k = 0; k < batch_size_; ++k) {
        auto& q = queues[alive[g * batch_size_ + k]];
        batch.push_back(q.back());
        q.pop_back();
      }
      batches.push_back(std::move(batch));
    }
  }
  return batches;
}

void PairList::validate(const IdentityDataset& dataset) const {
  for (const VerificationPair& p : pairs) {
    if (p.a < 0 || p.b < 0 || p.a >= static_cast<int>(dataset.samples.size()) ||
        p.b >= static_cast<int>(dataset.samples.size())) {
      throw ValidationError("pair references a sample outside the dataset");
    }
    const bool same =
        dataset.samples[p.a].identity_id == dataset.samples[p.b].identity_id;
    if (same != p.genuine) {
      throw ValidationError("pair label disagrees with sample identities");
    }
  }
}

PairList build_pairs(const IdentityDataset& dataset, int genuine_per_identity,
                     int impostor_total, uint64_t seed) {
  if (genuine_per_identity < 0 || impostor_total < 0) {
    throw ConfigError("pair counts must be nonnegative");
  }
  auto index = dataset.index_by_identity();
  std::vector<int> ids = dataset.identity_ids;

  PairList out;
  Rng rng(mix_seed(seed, 0x70616972ULL));

  std::vector<VerificationPair> genuine;
  for (int id : ids) {
    const auto& idx = index[id];
    const int n = static_cast<int>(idx.size());
    if (genuine_per_identity == 0) continue;
    if (n < 2) {
      ++out.skipped_single_image_identities;
      continue;
    }
    const long long max_pairs = static_cast<long long>(n) * (n - 1) / 2;
    if (genuine_per_identity > max_pairs) {
      throw ConfigError("requested more genuine pairs than C(n,2) for identity " +
                        std::to_string(id));
    }
    std::vector<VerificationPair> all;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        all.push_back({idx[i], idx[j], true});
      }
    }
    rng.shuffle(all);
    genuine.insert(genuine.end(), all.begin(), all.begin() + genuine_per_identity);
  }

  std::vector<VerificationPair> impostor;
  if (impostor_total > 0) {
    std::vector<VerificationPair> cross;
    const int n = static_cast<int>(dataset.samples.size());
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        if (dataset.samples[i].identity_id != dataset.samples[j].identity_id) {
          cross.push_back({i, j, false});
        }
      }
    }
    if (impostor_total > static_cast<int>(cross.size())) {
      throw ConfigError("requested more impostor pairs than exist");
    }
    rng.shuffle(cross);
    impostor.assign(cross.begin(), cross.begin() + impostor_total);
  }

  // Interleave so contiguous k-fold splits stay balanced.
  size_t gi = 0, ii = 0;
  while (gi < genuine.size() || ii < impostor.size()) {
    if (gi < genuine.size()) out.pairs.push_back(genuine[gi++]);
    if (ii < impostor.size()) out.pairs.push_back(impostor[ii++]);
  }
  return out;
}

void save_pairs(const PairList& pairs, const IdentityDataset& dataset,
                const std::string& path) {
  pairs.validate(dataset);
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open pair file for writing: " + path);
  for (const VerificationPair& p : pairs.pairs) {
    out << dataset.samples[p.a].name << '\t' << dataset.samples[p.b].name
        << '\t' << (p.genuine ? 1 : 0) << '\n';
  }
}

PairList load_pairs(const IdentityDataset& dataset, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open pair file: " + path);
  std::unordered_map<std::string, int> by_name;
  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    by_name[dataset.samples[i].name] = static_cast<int>(i);
  }
  PairList out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b, label;
    if (!std::getline(ss, a, '\t') || !std::getline(ss, b, '\t') ||
        !std::getline(ss, label)) {
      throw ValidationError("malformed pair line: " + line);
    }
    auto ia = by_name.find(a), ib = by_name.find(b);
    if (ia == by_name.end() || ib == by_name.end()) {
      throw ValidationError("pair references unknown sample: " + line);
    }
    out.pairs.push_back({ia->second, ib->second, label == "1"});
  }
  out.validate(dataset);
  return out;
}

}  // namespace clface
