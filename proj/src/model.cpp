#include "clface/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "clface/errors.hpp"
#include "clface/rng.hpp"

namespace clface {

BackboneSpec BackboneSpec::make(std::array<int, 3> input_shape,
                                std::vector<int> channels, int embedding_dim) {
  BackboneSpec spec;
  spec.input_shape = input_shape;
  spec.channels_per_stage = std::move(channels);
  spec.stage_count = static_cast<int>(spec.channels_per_stage.size());
  spec.embedding_dim = embedding_dim;
  int h = input_shape[1], w = input_shape[2];
  for (int l = 0; l < spec.stage_count; ++l) {
    if (h % 2 != 0 || w % 2 != 0) {
      throw ConfigError("input spatial dims must be divisible by 2^stage_count");
    }
    h /= 2;
    w /= 2;
    spec.spatial_dims_per_stage.emplace_back(h, w);
  }
  spec.validate();
  return spec;
}

void BackboneSpec::validate() const {
  if (stage_count < 2) throw ConfigError("backbone needs at least 2 stages");
  if (static_cast<int>(channels_per_stage.size()) != stage_count ||
      static_cast<int>(spatial_dims_per_stage.size()) != stage_count) {
    throw ConfigError("per-stage lists must match stage_count");
  }
  for (int c : channels_per_stage) {
    if (c <= 0) throw ConfigError("channel counts must be positive");
  }
  for (const auto& [h, w] : spatial_dims_per_stage) {
    if (h <= 0 || w <= 0) throw ConfigError("spatial dims must be positive");
  }
  if (embedding_dim <= 0) throw ConfigError("embedding_dim must be positive");
  if (input_shape[0] <= 0 || input_shape[1] <= 0 || input_shape[2] <= 0) {
    throw ConfigError("input shape must be positive");
  }
}

Parameters Parameters::zeros_like(const BackboneSpec& spec) {
  Parameters p;
  int in_ch = spec.input_shape[0];
  for (int l = 0; l < spec.stage_count; ++l) {
    ConvParams conv;
    conv.in_ch = in_ch;
    conv.out_ch = spec.channels_per_stage[l];
    conv.weight.assign(static_cast<size_t>(conv.out_ch) * conv.in_ch * 9, 0.0);
    conv.bias.assign(conv.out_ch, 0.0);
    p.stages.push_back(std::move(conv));
    in_ch = spec.channels_per_stage[l];
  }
  p.fc.in_dim = spec.channels_per_stage.back();
  p.fc.out_dim = spec.embedding_dim;
  p.fc.weight.assign(static_cast<size_t>(p.fc.out_dim) * p.fc.in_dim, 0.0);
  p.fc.bias.assign(p.fc.out_dim, 0.0);
  return p;
}

size_t Parameters::count() const {
  size_t n = 0;
  for (const auto& s : stages) n += s.weight.size() + s.bias.size();
  return n + fc.weight.size() + fc.bias.size();
}

std::vector<std::pair<std::string, Vec*>> Parameters::named() {
  std::vector<std::pair<std::string, Vec*>> out;
  for (size_t l = 0; l < stages.size(); ++l) {
    const std::string base = "stage" + std::to_string(l + 1);
    out.emplace_back(base + ".weight", &stages[l].weight);
    out.emplace_back(base + ".bias", &stages[l].bias);
  }
  out.emplace_back("fc.weight", &fc.weight);
  out.emplace_back("fc.bias", &fc.bias);
  return out;
}

std::vector<std::pair<std::string, const Vec*>> Parameters::named() const {
  std::vector<std::pair<std::string, const Vec*>> out;
  for (size_t l = 0; l < stages.size(); ++l) {
    const std::string base = "stage" + std::to_string(l + 1);
    out.emplace_back(base + ".weight", &stages[l].weight);
    out.emplace_back(base + ".bias", &stages[l].bias);
  }
  out.emplace_back("fc.weight", &fc.weight);
  out.emplace_back("fc.bias", &fc.bias);
  return out;
}

ModelSnapshot::ModelSnapshot(const BackboneSpec& spec, uint64_t init_seed)
    : spec_(spec), params_(Parameters::zeros_like(spec)) {
  spec_.validate();
  Rng rng(mix_seed(init_seed));
  for (auto& stage : params_.stages) {
    const double std_dev = std::sqrt(2.0 / (stage.in_ch * 9));  // He init
    for (double& w : stage.weight) w = std_dev * rng.normal();
  }
  const double fc_std = std::sqrt(1.0 / params_.fc.in_dim);
  for (double& w : params_.fc.weight) w = fc_std * rng.normal();
}

ModelSnapshot ModelSnapshot::from_parts(BackboneSpec spec, Parameters params,
                                        int step_index, bool frozen) {
  ModelSnapshot m;
  m.spec_ = std::move(spec);
  m.params_ = std::move(params);
  m.step_index_ = step_index;
  m.frozen_ = frozen;
  return m;
}

Parameters& ModelSnapshot::mutable_params() {
  if (frozen_) throw TrainError("attempt to mutate a frozen snapshot");
  return params_;
}

namespace {
constexpr uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr uint64_t kFnvPrime = 1099511628211ULL;

void fnv_mix(uint64_t& h, const void* data, size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}
}  // namespace

uint64_t ModelSnapshot::checksum() const {
  uint64_t h = kFnvOffset;
  for (const auto& [name, vec] : params_.named()) {
    fnv_mix(h, name.data(), name.size());
    fnv_mix(h, vec->data(), vec->size() * sizeof(double));
  }
  return h;
}

ModelSnapshot clone_as_student(const ModelSnapshot& teacher) {
  return ModelSnapshot::from_parts(teacher.spec(), teacher.params(),
                                   teacher.step_index() + 1, /*frozen=*/false);
}

namespace {

// conv3x3 pad 1 -> ReLU -> avgpool 2x2. `pre` receives the pre-activation.
void stage_forward(const ConvParams& conv, const Tensor3& in, Tensor3& pre,
                   Tensor3& out) {
  const int H = in.height, W = in.width, Cin = in.channels, Cout = conv.out_ch;
  pre = Tensor3(Cout, H, W);
  for (int o = 0; o < Cout; ++o) {
    const double b = conv.bias[o];
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double acc = b;
        for (int c = 0; c < Cin; ++c) {
          const size_t wbase = ((static_cast<size_t>(o) * Cin + c) * 9);
          for (int dy = -1; dy <= 1; ++dy) {
            const int yy = y + dy;
            if (yy < 0 || yy >= H) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const int xx = x + dx;
              if (xx < 0 || xx >= W) continue;
              acc += conv.weight[wbase + (dy + 1) * 3 + (dx + 1)] *
                     in.at(c, yy, xx);
            }
          }
        }
        pre.at(o, y, x) = acc;
      }
    }
  }
  out = Tensor3(Cout, H / 2, W / 2);
  for (int o = 0; o < Cout; ++o) {
    for (int y = 0; y < H / 2; ++y) {
      for (int x = 0; x < W / 2; ++x) {
        double s = 0.0;
        for (int py = 0; py < 2; ++py) {
          for (int px = 0; px < 2; ++px) {
            s += std::max(0.0, pre.at(o, 2 * y + py, 2 * x + px));
          }
        }
        out.at(o, y, x) = 0.25 * s;
      }
    }
  }
}

void check_input(const BackboneSpec& spec, const Tensor3& image) {
  if (image.channels != spec.input_shape[0] ||
      image.height != spec.input_shape[1] ||
      image.width != spec.input_shape[2]) {
    throw ShapeError("input shape does not match backbone_spec.input_shape");
  }
  if (!image.all_finite()) throw ValidationError("non-finite input image");
}

}  // namespace

ForwardCache forward_cached(const ModelSnapshot& model, const Tensor3& image) {
  const BackboneSpec& spec = model.spec();
  check_input(spec, image);

  ForwardCache cache;
  cache.input = image;
  cache.conv_pre.resize(spec.stage_count);
  cache.stack.stage_maps.resize(spec.stage_count);

  const Tensor3* cur = &cache.input;
  for (int l = 0; l < spec.stage_count; ++l) {
    stage_forward(model.params().stages[l], *cur, cache.conv_pre[l],
                  cache.stack.stage_maps[l]);
    cur = &cache.stack.stage_maps[l];
  }

  // Global average pool over the final stage, then the linear projection.
  const Tensor3& last = cache.stack.stage_maps.back();
  const double inv_area = 1.0 / (last.height * last.width);
  cache.pooled.assign(last.channels, 0.0);
  for (int c = 0; c < last.channels; ++c) {
    double s = 0.0;
    for (int y = 0; y < last.height; ++y) {
      for (int x = 0; x < last.width; ++x) s += last.at(c, y, x);
    }
    cache.pooled[c] = s * inv_area;
  }
  const LinearParams& fc = model.params().fc;
  cache.stack.embedding.assign(fc.out_dim, 0.0);
  for (int j = 0; j < fc.out_dim; ++j) {
    double acc = fc.bias[j];
    const size_t base = static_cast<size_t>(j) * fc.in_dim;
    for (int c = 0; c < fc.in_dim; ++c) acc += fc.weight[base + c] * cache.pooled[c];
    cache.stack.embedding[j] = acc;
  }
  return cache;
}

std::vector<FeatureStack> forward(const ModelSnapshot& model,
                                  const std::vector<Tensor3>& batch) {
  if (batch.empty()) throw ValidationError("forward needs at least one sample");
  std::vector<FeatureStack> out;
  out.reserve(batch.size());
  for (const Tensor3& image : batch) {
    out.push_back(forward_cached(model, image).stack);
  }
  return out;
}

void backward(const ModelSnapshot& model, const ForwardCache& cache,
              const std::vector<Tensor3>& stage_grads, const Vec& emb_grad,
              Parameters& grad) {
  const BackboneSpec& spec = model.spec();
  const Parameters& params = model.params();
  const int L = spec.stage_count;

  // Embedding -> fc -> pooled -> final stage map.
  Tensor3 g_out;  // gradient w.r.t. the current stage output
  {
    const Tensor3& last = cache.stack.stage_maps.back();
    g_out = Tensor3(last.channels, last.height, last.width);
    if (!emb_grad.empty()) {
      const LinearParams& fc = params.fc;
      Vec g_pooled(fc.in_dim, 0.0);
      for (int j = 0; j < fc.out_dim; ++j) {
        const double g = emb_grad[j];
        grad.fc.bias[j] += g;
        const size_t base = static_cast<size_t>(j) * fc.in_dim;
        for (int c = 0; c < fc.in_dim; ++c) {
          grad.fc.weight[base + c] += g * cache.pooled[c];
          g_pooled[c] += g * fc.weight[base + c];
        }
      }
      const double inv_area = 1.0 / (last.height * last.width);
      for (int c = 0; c < last.channels; ++c) {
        const double g = g_pooled[c] * inv_area;
        for (int y = 0; y < last.height; ++y) {
          for (int x = 0; x < last.width; ++x) g_out.at(c, y, x) += g;
        }
      }
    }
  }

  for (int l = L - 1; l >= 0; --l) {
    // External gradient on this stage's output map.
    if (l < static_cast<int>(stage_grads.size()) &&
        stage_grads[l].size() > 0) {
      const Tensor3& ext = stage_grads[l];
      if (!ext.same_shape(cache.stack.stage_maps[l])) {
        throw ShapeError("stage gradient shape mismatch");
      }
      for (size_t i = 0; i < g_out.data.size(); ++i) g_out.data[i] += ext.data[i];
    }

    const ConvParams& conv = params.stages[l];
    ConvParams& g_conv = grad.stages[l];
    const Tensor3& pre = cache.conv_pre[l];
    const Tensor3& in = (l == 0) ? cache.input : cache.stack.stage_maps[l - 1];
    const int H = pre.height, W = pre.width;
    const int Cin = conv.in_ch, Cout = conv.out_ch;

    // avgpool backward + ReLU mask.
    Tensor3 g_pre(Cout, H, W);
    for (int o = 0; o < Cout; ++o) {
      for (int y = 0; y < H / 2; ++y) {
        for (int x = 0; x < W / 2; ++x) {
          const double g = 0.25 * g_out.at(o, y, x);
          for (int py = 0; py < 2; ++py) {
            for (int px = 0; px < 2; ++px) {
              if (pre.at(o, 2 * y + py, 2 * x + px) > 0.0) {
                g_pre.at(o, 2 * y + py, 2 * x + px) = g;
              }
            }
          }
        }
      }
    }

    // conv backward: bias, weights and (except for stage 1) the input map.
    const bool need_input_grad = l > 0;
    Tensor3 g_in;
    if (need_input_grad) g_in = Tensor3(Cin, in.height, in.width);
    for (int o = 0; o < Cout; ++o) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const double g = g_pre.at(o, y, x);
          if (g == 0.0) continue;
          g_conv.bias[o] += g;
          for (int c = 0; c < Cin; ++c) {
            const size_t wbase = ((static_cast<size_t>(o) * Cin + c) * 9);
            for (int dy = -1; dy <= 1; ++dy) {
              const int yy = y + dy;
              if (yy < 0 || yy >= H) continue;
              for (int dx = -1; dx <= 1; ++dx) {
                const int xx = x + dx;
                if (xx < 0 || xx >= W) continue;
                const size_t wi = wbase + (dy + 1) * 3 + (dx + 1);
                g_conv.weight[wi] += g * in.at(c, yy, xx);
                if (need_input_grad) {
                  g_in.at(c, yy, xx) += g * conv.weight[wi];
                }
              }
            }
          }
        }
      }
    }
    if (need_input_grad) g_out = std::move(g_in);
  }
}

// ---------------------------------------------------------------------------
// Margin head
// ---------------------------------------------------------------------------

void MarginHeadConfig::validate() const {
  if (num_classes <= 0) throw ConfigError("margin head needs num_classes > 0");
  if (scale_s <= 0.0) throw ConfigError("margin head scale must be positive");
  if (margin_m < 0.0 || margin_m >= 1.5707963267948966) {
    throw ConfigError("margin must lie in [0, pi/2)");
  }
}

MarginHead::MarginHead(MarginHeadConfig cfg, int emb_dim, uint64_t seed)
    : config(cfg), embedding_dim(emb_dim) {
  config.validate();
  if (emb_dim <= 0) throw ConfigError("margin head needs embedding_dim > 0");
  Rng rng(mix_seed(seed, 0x6865616421ULL));
  const double std_dev = std::sqrt(1.0 / emb_dim);
  weight.assign(static_cast<size_t>(cfg.num_classes) * emb_dim, 0.0);
  for (double& w : weight) w = std_dev * rng.normal();
}

namespace {
constexpr double kNormEps = 1e-12;

void check_labels(const std::vector<int>& labels, int num_classes, size_t batch) {
  if (labels.size() != batch) {
    throw ValidationError("labels size must match the batch");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw std::out_of_range("label out of range for margin head");
    }
  }
}
}  // namespace

std::vector<Vec> margin_logits(const MarginHead& head,
                               const std::vector<Vec>& embeddings,
                               const std::vector<int>& labels) {
  const int K = head.config.num_classes;
  const int d = head.embedding_dim;
  check_labels(labels, K, embeddings.size());
  const double s = head.config.scale_s;
  const double cos_m = std::cos(head.config.margin_m);
  const double sin_m = std::sin(head.config.margin_m);

  std::vector<Vec> w_norm(K);
  for (int j = 0; j < K; ++j) {
    Vec wj(head.weight.begin() + static_cast<size_t>(j) * d,
           head.weight.begin() + static_cast<size_t>(j + 1) * d);
    w_norm[j] = l2_normalize(wj, kNormEps);
  }

  std::vector<Vec> logits(embeddings.size(), Vec(K, 0.0));
  for (size_t i = 0; i < embeddings.size(); ++i) {
    if (!all_finite(embeddings[i])) {
      throw ValidationError("non-finite embedding in margin_logits");
    }
    const Vec e = l2_normalize(embeddings[i], kNormEps);
    for (int j = 0; j < K; ++j) {
      double c = std::clamp(dot(e, w_norm[j]), -1.0, 1.0);
      if (j == labels[i]) {
        const double sin_a = std::sqrt(std::clamp(1.0 - c * c, 0.0, 1.0));
        logits[i][j] = s * (c * cos_m - sin_a * sin_m);
      } else {
        logits[i][j] = s * c;
      }
    }
  }
  return logits;
}

MarginLossGrads margin_ce_with_grads(const MarginHead& head,
                                     const std::vector<Vec>& embeddings,
                                     const std::vector<int>& labels) {
  const int K = head.config.num_classes;
  const int d = head.embedding_dim;
  check_labels(labels, K, embeddings.size());
  const size_t B = embeddings.size();
  const double s = head.config.scale_s;
  const double cos_m = std::cos(head.config.margin_m);
  const double sin_m = std::sin(head.config.margin_m);

  std::vector<Vec> w_norm(K);
  std::vector<double> w_len(K);
  for (int j = 0; j < K; ++j) {
    Vec wj(head.weight.begin() + static_cast<size_t>(j) * d,
           head.weight.begin() + static_cast<size_t>(j + 1) * d);
    w_len[j] = std::max(l2_norm(wj), kNormEps);
    w_norm[j] = l2_normalize(wj, kNormEps);
  }

  MarginLossGrads out;
  out.d_embeddings.assign(B, Vec(d, 0.0));
  out.d_weight.assign(head.weight.size(), 0.0);

  for (size_t i = 0; i < B; ++i) {
    const double e_len = std::max(l2_norm(embeddings[i]), kNormEps);
    const Vec e = l2_normalize(embeddings[i], kNormEps);
    const int t = labels[i];

    Vec raw_cos(K), logits(K);
    for (int j = 0; j < K; ++j) {
      raw_cos[j] = dot(e, w_norm[j]);
      const double c = std::clamp(raw_cos[j], -1.0, 1.0);
      if (j == t) {
        const double sin_a = std::sqrt(std::clamp(1.0 - c * c, 0.0, 1.0));
        logits[j] = s * (c * cos_m - sin_a * sin_m);
      } else {
        logits[j] = s * c;
      }
    }

    // Softmax cross-entropy, max-subtracted.
    const double zmax = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (int j = 0; j < K; ++j) denom += std::exp(logits[j] - zmax);
    out.loss += (std::log(denom) - (logits[t] - zmax)) / B;

    for (int j = 0; j < K; ++j) {
      const double p = std::exp(logits[j] - zmax) / denom;
      const double g_logit = (p - (j == t ? 1.0 : 0.0)) / B;
      if (g_logit == 0.0) continue;

      // d logit / d cos; zero where the clamp saturated.
      double g_cos;
      if (raw_cos[j] <= -1.0 || raw_cos[j] >= 1.0) {
        g_cos = 0.0;
      } else if (j == t) {
        const double c = raw_cos[j];
        const double sin_a = std::sqrt(std::max(1.0 - c * c, 1e-24));
        g_cos = g_logit * s * (cos_m + sin_m * c / sin_a);
      } else {
        g_cos = g_logit * s;
      }
      if (g_cos == 0.0) continue;

      const double c = raw_cos[j];
      for (int k = 0; k < d; ++k) {
        out.d_embeddings[i][k] += g_cos * (w_norm[j][k] - c * e[k]) / e_len;
        out.d_weight[static_cast<size_t>(j) * d + k] +=
            g_cos * (e[k] - c * w_norm[j][k]) / w_len[j];
      }
    }
  }
  return out;
}

}  // namespace clface
