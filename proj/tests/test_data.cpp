#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "clface/data.hpp"
#include "clface/errors.hpp"
#include "clface/rng.hpp"

using namespace clface;

namespace {
SynthParams tiny_params() {
  SynthParams p;
  p.num_identities = 10;
  p.images_per_identity = 3;
  p.image_shape = {2, 8, 8};
  p.noise_sigma = 0.05;
  p.max_shift = 1;
  p.seed = 7;
  return p;
}
}  // namespace

TEST_CASE("synth_identities: deterministic, distinct templates, valid metadata") {
  const SynthParams p = tiny_params();
  const IdentityDataset a = synth_identities(p);
  const IdentityDataset b = synth_identities(p);
  a.validate();

  REQUIRE(a.samples.size() == 30);
  CHECK(a.identity_ids.size() == 10);
  CHECK(a.gen_params == p);

  // bitwise determinism
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].image.data == b.samples[i].image.data);
    CHECK(a.samples[i].name == b.samples[i].name);
  }

  // different identities have different content
  double dist = 0.0;
  for (size_t k = 0; k < a.samples[0].image.data.size(); ++k) {
    const double d = a.samples[0].image.data[k] - a.samples[3].image.data[k];
    dist += d * d;
  }
  CHECK(dist > 0.0);
}

TEST_CASE("synth_identities: sigma=0 and no shift clones the template") {
  SynthParams p = tiny_params();
  p.noise_sigma = 0.0;
  p.max_shift = 0;
  const IdentityDataset ds = synth_identities(p);
  const auto idx = ds.indices_of(ds.identity_ids[0]);
  REQUIRE(idx.size() == 3);
  CHECK(ds.samples[idx[0]].image.data == ds.samples[idx[1]].image.data);
  CHECK(ds.samples[idx[0]].image.data == ds.samples[idx[2]].image.data);
}

TEST_CASE("make_step_plan: exact split for K=100, half base, 5 steps") {
  SynthParams p = tiny_params();
  p.num_identities = 100;
  p.images_per_identity = 1;
  const IdentityDataset ds = synth_identities(p);
  const StepPlan plan = make_step_plan(ds, 0.5, 5, 3);
  CHECK(plan.base_identities.size() == 50);
  REQUIRE(plan.step_identity_sets.size() == 5);
  for (const auto& s : plan.step_identity_sets) CHECK(s.size() == 10);
}

TEST_CASE("make_step_plan: K=101 near-equal disjoint steps covering the rest") {
  SynthParams p = tiny_params();
  p.num_identities = 101;
  p.images_per_identity = 1;
  const IdentityDataset ds = synth_identities(p);
  const StepPlan plan = make_step_plan(ds, 0.5, 5, 3);
  CHECK(plan.base_identities.size() == 50);

  std::set<int> all;
  size_t total = 0;
  for (const auto& s : plan.step_identity_sets) {
    CHECK(s.size() >= 10);
    CHECK(s.size() <= 11);
    total += s.size();
    all.insert(s.begin(), s.end());
  }
  CHECK(total == 51);
  CHECK(all.size() == 51);  // disjoint
  for (int id : plan.base_identities) CHECK_FALSE(all.count(id));
}

TEST_CASE("make_step_plan: deterministic per seed, sensitive to seed") {
  const IdentityDataset ds = synth_identities(tiny_params());
  const StepPlan a = make_step_plan(ds, 0.5, 2, 9);
  const StepPlan b = make_step_plan(ds, 0.5, 2, 9);
  const StepPlan c = make_step_plan(ds, 0.5, 2, 10);
  CHECK(a.class_order == b.class_order);
  CHECK(a.base_identities == b.base_identities);
  CHECK(a.step_identity_sets == b.step_identity_sets);
  CHECK(a.class_order != c.class_order);
}

TEST_CASE("make_step_plan: error paths") {
  const IdentityDataset ds = synth_identities(tiny_params());  // 10 identities
  CHECK_THROWS_AS(make_step_plan(ds, 0.5, 6, 1), ConfigError);   // 5 left, 6 steps
  CHECK_THROWS_AS(make_step_plan(ds, 0.0, 1, 1), ConfigError);
  CHECK_THROWS_AS(make_step_plan(ds, 1.1, 1, 1), ConfigError);
  CHECK_THROWS_AS(make_step_plan(ds, 1.0, 2, 1), ConfigError);  // nothing left
  CHECK_NOTHROW(make_step_plan(ds, 1.0, 0, 1));                 // T=0 is fine
}

TEST_CASE("make_step_plan: overlap mode samples from the shared pool") {
  SynthParams p = tiny_params();
  p.num_identities = 20;
  const IdentityDataset ds = synth_identities(p);
  const StepPlan plan = make_step_plan(ds, 0.5, 4, 5, /*allow_overlap=*/true);
  std::set<int> base(plan.base_identities.begin(), plan.base_identities.end());
  for (const auto& step : plan.step_identity_sets) {
    CHECK_FALSE(step.empty());
    for (int id : step) CHECK_FALSE(base.count(id));  // never base identities
  }
}

TEST_CASE("unique_identity_batches: partitions 10x1 into two clean batches") {
  SynthParams p = tiny_params();
  p.images_per_identity = 1;
  const IdentityDataset ds = synth_identities(p);
  UniqueIdentityBatcher batcher(ds, ds.identity_ids, 5, 1);
  const auto batches = batcher.epoch_batches(0);
  REQUIRE(batches.size() == 2);
  std::set<int> seen;
  for (const auto& batch : batches) {
    std::set<int> ids;
    for (int idx : batch) {
      ids.insert(ds.samples[idx].identity_id);
      CHECK(seen.insert(idx).second);  // at most once per epoch
    }
    CHECK(ids.size() == batch.size());
  }
}

TEST_CASE("unique_identity_batches: fewer identities than B is a config error") {
  SynthParams p = tiny_params();
  p.num_identities = 3;
  const IdentityDataset ds = synth_identities(p);
  CHECK_THROWS_WITH_AS(UniqueIdentityBatcher(ds, ds.identity_ids, 4, 1),
                       doctest::Contains("reduce the batch size"), ConfigError);
}

TEST_CASE("unique_identity_batches: identity uniqueness over a full epoch, 8x3") {
  SynthParams p = tiny_params();
  p.num_identities = 8;
  p.images_per_identity = 3;
  const IdentityDataset ds = synth_identities(p);
  UniqueIdentityBatcher batcher(ds, ds.identity_ids, 4, 2);
  for (int epoch = 0; epoch < 4; ++epoch) {
    std::set<int> emitted;
    const auto batches = batcher.epoch_batches(epoch);
    CHECK(batches.size() == 6);  // 24 samples / 4 per batch
    for (const auto& batch : batches) {
      REQUIRE(batch.size() == 4);
      std::set<int> ids;
      for (int idx : batch) {
        ids.insert(ds.samples[idx].identity_id);
        CHECK(emitted.insert(idx).second);
      }
      CHECK(ids.size() == 4);
    }
  }
  // epochs reshuffle
  CHECK(batcher.epoch_batches(0) != batcher.epoch_batches(1));
  CHECK(batcher.epoch_batches(1) == batcher.epoch_batches(1));
}

TEST_CASE("build_pairs: labels as constructed for the 2x2 example") {
  SynthParams p = tiny_params();
  p.num_identities = 2;
  p.images_per_identity = 2;
  const IdentityDataset ds = synth_identities(p);
  const PairList pairs = build_pairs(ds, 1, 2, 1);
  pairs.validate(ds);
  REQUIRE(pairs.pairs.size() == 4);
  int genuine = 0;
  for (const auto& pr : pairs.pairs) genuine += pr.genuine ? 1 : 0;
  CHECK(genuine == 2);
  CHECK(pairs.skipped_single_image_identities == 0);
}

TEST_CASE("build_pairs: single-image identities are skipped with a count") {
  SynthParams p = tiny_params();
  p.num_identities = 3;
  p.images_per_identity = 1;
  const IdentityDataset ds = synth_identities(p);
  const PairList pairs = build_pairs(ds, 2, 1, 1);
  CHECK(pairs.skipped_single_image_identities == 3);
  CHECK(pairs.pairs.size() == 1);  // just the impostor
}

TEST_CASE("build_pairs: requests beyond the combinatorial bound fail") {
  SynthParams p = tiny_params();
  p.num_identities = 2;
  p.images_per_identity = 3;  // C(3,2) = 3 genuine pairs per identity
  const IdentityDataset ds = synth_identities(p);
  CHECK_THROWS_AS(build_pairs(ds, 4, 0, 1), ConfigError);
  CHECK_THROWS_AS(build_pairs(ds, 1, 10, 1), ConfigError);  // 9 cross pairs
  CHECK_NOTHROW(build_pairs(ds, 3, 9, 1));
}

TEST_CASE("build_pairs: no duplicate unordered pairs, deterministic") {
  SynthParams p = tiny_params();
  const IdentityDataset ds = synth_identities(p);
  const PairList a = build_pairs(ds, 3, 30, 11);
  const PairList b = build_pairs(ds, 3, 30, 11);
  std::set<std::pair<int, int>> seen;
  for (const auto& pr : a.pairs) {
    const auto key = std::minmax(pr.a, pr.b);
    CHECK(seen.insert(key).second);
  }
  REQUIRE(a.pairs.size() == b.pairs.size());
  for (size_t i = 0; i < a.pairs.size(); ++i) {
    CHECK(a.pairs[i].a == b.pairs[i].a);
    CHECK(a.pairs[i].b == b.pairs[i].b);
    CHECK(a.pairs[i].genuine == b.pairs[i].genuine);
  }
}

TEST_CASE("pair files round-trip through the tab-separated format") {
  namespace fs = std::filesystem;
  const IdentityDataset ds = synth_identities(tiny_params());
  const PairList pairs = build_pairs(ds, 2, 15, 3);
  const auto path = fs::temp_directory_path() / "clface_pairs_test.txt";
  save_pairs(pairs, ds, path.string());
  const PairList loaded = load_pairs(ds, path.string());
  REQUIRE(loaded.pairs.size() == pairs.pairs.size());
  for (size_t i = 0; i < pairs.pairs.size(); ++i) {
    CHECK(loaded.pairs[i].a == pairs.pairs[i].a);
    CHECK(loaded.pairs[i].b == pairs.pairs[i].b);
    CHECK(loaded.pairs[i].genuine == pairs.pairs[i].genuine);
  }
}

TEST_CASE("train/test identity ranges stay disjoint by offset construction") {
  SynthParams train = tiny_params();
  SynthParams test = tiny_params();
  test.identity_offset = train.num_identities;
  test.split_tag = "test";
  const IdentityDataset dtrain = synth_identities(train);
  const IdentityDataset dtest = synth_identities(test);
  std::set<int> train_ids(dtrain.identity_ids.begin(), dtrain.identity_ids.end());
  for (int id : dtest.identity_ids) CHECK_FALSE(train_ids.count(id));
}
