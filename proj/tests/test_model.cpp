#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "clface/checkpoint.hpp"
#include "clface/errors.hpp"
#include "clface/model.hpp"
#include "clface/rng.hpp"
#include "test_util.hpp"

using namespace clface;
using testutil::random_tensor;
using testutil::random_vec;

namespace {
BackboneSpec tiny_spec() { return BackboneSpec::make({3, 16, 16}, {4, 6, 8}, 10); }
}  // namespace

TEST_CASE("BackboneSpec::make derives halved spatial dims and validates") {
  const BackboneSpec spec = BackboneSpec::make({3, 32, 32}, {16, 32, 64, 128}, 128);
  CHECK(spec.stage_count == 4);
  REQUIRE(spec.spatial_dims_per_stage.size() == 4);
  CHECK(spec.spatial_dims_per_stage[0] == std::pair<int, int>{16, 16});
  CHECK(spec.spatial_dims_per_stage[3] == std::pair<int, int>{2, 2});

  CHECK_THROWS_AS(BackboneSpec::make({3, 30, 32}, {4, 4}, 8), ConfigError);
  CHECK_THROWS_AS(BackboneSpec::make({3, 32, 32}, {4}, 8), ConfigError);  // L >= 2
  CHECK_THROWS_AS(BackboneSpec::make({3, 32, 32}, {4, 4}, 0), ConfigError);
}

TEST_CASE("forward: shape contract holds for every stage and the embedding") {
  const BackboneSpec spec = tiny_spec();
  ModelSnapshot model(spec, 1);
  Rng rng(2);
  std::vector<Tensor3> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(random_tensor(rng, 3, 16, 16));

  const auto stacks = forward(model, batch);
  REQUIRE(stacks.size() == 3);
  for (const FeatureStack& s : stacks) {
    REQUIRE(static_cast<int>(s.stage_maps.size()) == spec.stage_count);
    for (int l = 0; l < spec.stage_count; ++l) {
      CHECK(s.stage_maps[l].channels == spec.channels_per_stage[l]);
      CHECK(s.stage_maps[l].height == spec.spatial_dims_per_stage[l].first);
      CHECK(s.stage_maps[l].width == spec.spatial_dims_per_stage[l].second);
      CHECK(s.stage_maps[l].all_finite());
    }
    CHECK(static_cast<int>(s.embedding.size()) == spec.embedding_dim);
    CHECK(all_finite(s.embedding));
  }
}

TEST_CASE("forward: zero-weights model emits the (zero) bias embedding") {
  const BackboneSpec spec = tiny_spec();
  ModelSnapshot model =
      ModelSnapshot::from_parts(spec, Parameters::zeros_like(spec), 0, false);
  Rng rng(3);
  const auto stacks = forward(model, {random_tensor(rng, 3, 16, 16)});
  for (double v : stacks[0].embedding) CHECK(v == 0.0);
}

TEST_CASE("forward: determinism on a frozen model is bitwise") {
  const BackboneSpec spec = tiny_spec();
  ModelSnapshot model(spec, 7);
  model.freeze();
  Rng rng(4);
  const Tensor3 image = random_tensor(rng, 3, 16, 16);
  const auto a = forward(model, {image});
  const auto b = forward(model, {image});
  for (size_t l = 0; l < a[0].stage_maps.size(); ++l) {
    CHECK(a[0].stage_maps[l].data == b[0].stage_maps[l].data);
  }
  CHECK(a[0].embedding == b[0].embedding);
}

TEST_CASE("forward: shape and finiteness violations are rejected") {
  ModelSnapshot model(tiny_spec(), 5);
  Rng rng(6);
  CHECK_THROWS_AS(forward(model, {random_tensor(rng, 3, 8, 8)}), ShapeError);
  Tensor3 bad = random_tensor(rng, 3, 16, 16);
  bad.data[17] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(forward(model, {bad}), ValidationError);
  CHECK_THROWS_AS(forward(model, {}), ValidationError);
}

TEST_CASE("clone_as_student: equal parameters, isolated mutation, step bump") {
  ModelSnapshot teacher(tiny_spec(), 11);
  teacher.freeze();
  const uint64_t teacher_sum = teacher.checksum();

  ModelSnapshot student = clone_as_student(teacher);
  CHECK(student.step_index() == teacher.step_index() + 1);
  CHECK_FALSE(student.frozen());
  CHECK(student.checksum() == teacher_sum);

  Rng rng(12);
  const Tensor3 image = random_tensor(rng, 3, 16, 16);
  const auto a = forward(teacher, {image});
  const auto b = forward(student, {image});
  CHECK(a[0].embedding == b[0].embedding);

  student.mutable_params().fc.bias[0] += 1.0;
  CHECK(teacher.checksum() == teacher_sum);
  CHECK(student.checksum() != teacher_sum);

  ModelSnapshot third = clone_as_student(student);  // step 2 after freeze
  CHECK(third.step_index() == 2);
}

TEST_CASE("frozen snapshots refuse parameter mutation and keep their checksum") {
  ModelSnapshot model(tiny_spec(), 13);
  model.freeze();
  CHECK_THROWS_AS(model.mutable_params(), TrainError);
  const uint64_t before = model.checksum();
  Rng rng(14);
  for (int i = 0; i < 5; ++i) forward(model, {random_tensor(rng, 3, 16, 16)});
  CHECK(model.checksum() == before);
}

TEST_CASE("margin_logits: cosine values at the documented operating points") {
  const int d = 8;
  MarginHeadConfig cfg;
  cfg.num_classes = 3;

  SUBCASE("parallel embedding, m=0, s=1 gives logit 1") {
    cfg.scale_s = 1.0;
    cfg.margin_m = 0.0;
    MarginHead head(cfg, d, 21);
    Vec e(head.weight.begin(), head.weight.begin() + d);  // parallel to class 0
    const auto logits = margin_logits(head, {e}, {0});
    CHECK(logits[0][0] == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("parallel embedding, m=0.5, s=64 gives 64*cos(0.5)") {
    cfg.scale_s = 64.0;
    cfg.margin_m = 0.5;
    MarginHead head(cfg, d, 22);
    Vec e(head.weight.begin(), head.weight.begin() + d);
    for (double& x : e) x *= 3.0;  // scale must not matter
    const auto logits = margin_logits(head, {e}, {0});
    // sqrt(1-c^2) amplifies the rounding of c ~= 1, so the bound is absolute.
    CHECK(std::fabs(logits[0][0] - 64.0 * std::cos(0.5)) < 1e-6);
  }

  SUBCASE("orthogonal non-target class weight gives logit 0 at any margin") {
    cfg.scale_s = 64.0;
    cfg.margin_m = 0.5;
    MarginHead head(cfg, 2, 23);
    // Make class 1's weight orthogonal to the probe embedding.
    head.weight[1 * 2 + 0] = 0.0;
    head.weight[1 * 2 + 1] = 2.0;
    const Vec e{1.0, 0.0};
    const auto logits = margin_logits(head, {e}, {0});
    CHECK(logits[0][1] == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("margin head reduces to normalized softmax logits at m=0, s=1") {
  Rng rng(29);
  MarginHeadConfig cfg;
  cfg.num_classes = 5;
  cfg.scale_s = 1.0;
  cfg.margin_m = 0.0;
  const int d = 6;
  MarginHead head(cfg, d, 31);
  std::vector<Vec> embeddings;
  std::vector<int> labels;
  for (int i = 0; i < 4; ++i) {
    embeddings.push_back(random_vec(rng, d));
    labels.push_back(rng.uniform_int(0, 4));
  }
  const auto logits = margin_logits(head, embeddings, labels);
  for (size_t i = 0; i < embeddings.size(); ++i) {
    const Vec e = l2_normalize(embeddings[i]);
    for (int j = 0; j < 5; ++j) {
      Vec wj(head.weight.begin() + j * d, head.weight.begin() + (j + 1) * d);
      CHECK(logits[i][j] == doctest::Approx(dot(e, l2_normalize(wj))).epsilon(1e-6));
    }
  }
}

TEST_CASE("margin_logits: label out of range raises an index error") {
  MarginHeadConfig cfg;
  cfg.num_classes = 2;
  MarginHead head(cfg, 4, 33);
  std::vector<Vec> e{{1, 0, 0, 0}};
  CHECK_THROWS_AS(margin_logits(head, e, {5}), std::out_of_range);
}

TEST_CASE("invalid margin head configs are rejected") {
  MarginHeadConfig cfg;
  cfg.num_classes = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.num_classes = 4;
  cfg.scale_s = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.scale_s = 64.0;
  cfg.margin_m = 1.6;  // >= pi/2
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("checkpoint round trip preserves everything and verifies the hash") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "clface_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();

  ModelSnapshot model(tiny_spec(), 101);
  model.freeze();
  save_checkpoint(model, path);

  const ModelSnapshot loaded = load_checkpoint(path);
  CHECK(loaded.spec() == model.spec());
  CHECK(loaded.step_index() == model.step_index());
  CHECK(loaded.frozen());
  CHECK(loaded.checksum() == model.checksum());
  Rng rng(102);
  const Tensor3 image = random_tensor(rng, 3, 16, 16);
  CHECK(forward(model, {image})[0].embedding ==
        forward(loaded, {image})[0].embedding);

  SUBCASE("flipping a payload byte breaks the hash") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-9, std::ios::end);
    char c = 0;
    f.read(&c, 1);
    f.seekp(-9, std::ios::end);
    c = static_cast<char>(c ^ 0x40);
    f.write(&c, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
  }

  SUBCASE("garbage files are rejected") {
    std::ofstream g(path, std::ios::trunc);
    g << "not a checkpoint";
    g.close();
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
  }
}

TEST_CASE("seeded init is reproducible and seed-sensitive") {
  ModelSnapshot a(tiny_spec(), 7), b(tiny_spec(), 7), c(tiny_spec(), 8);
  CHECK(a.checksum() == b.checksum());
  CHECK(a.checksum() != c.checksum());
}
