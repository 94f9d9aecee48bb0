#pragma once

#include "setcls/binary_io.hpp"
#include "setcls/ops.hpp"
#include "setcls/rng.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace setcls {

struct SetClassifierConfig {
  std::size_t input_dim = 0;
  std::size_t model_dim = 512;
  std::size_t heads = 8;
  std::size_t encoder_layers = 3;
  std::size_t num_classes = 0;
  std::size_t feedforward_dim = 2048;
  // Longest tracklet accepted by forward(); not persisted in checkpoints.
  std::size_t max_length = 128;

  void validate() const {
    if (input_dim == 0) throw std::invalid_argument("set classifier: input_dim must be positive");
    if (model_dim == 0 || heads == 0 || model_dim % heads != 0) {
      throw std::invalid_argument("set classifier: model_dim " + std::to_string(model_dim) +
                                  " must be a positive multiple of heads " + std::to_string(heads));
    }
    if (encoder_layers < 1) throw std::invalid_argument("set classifier: need at least one encoder layer");
    if (num_classes < 2) throw std::invalid_argument("set classifier: need at least two classes");
    if (feedforward_dim == 0) throw std::invalid_argument("set classifier: feedforward_dim must be positive");
    if (max_length == 0) throw std::invalid_argument("set classifier: max_length must be positive");
  }

  friend bool operator==(const SetClassifierConfig&, const SetClassifierConfig&) = default;
};

template <typename T>
struct LinearParams {
  Parameter<T> weight;
  Parameter<T> bias;
};

template <typename T>
struct NormParams {
  Parameter<T> gain;
  Parameter<T> shift;
};

template <typename T>
struct EncoderLayerParams {
  LinearParams<T> q, v, out;
  Parameter<T> k;  // key projection carries no bias
  NormParams<T> norm1;
  LinearParams<T> ff1, ff2;
  NormParams<T> norm2;
};

// Embedding head, classification token, post-norm encoder stack and the
// three linear heads (set, per-token instance, pre-encoder cluster).
template <typename T>
class SetClassifier {
 public:
  SetClassifier() = default;

  // Xavier-uniform weights, zero biases, unit norm gains, and a classification
  // token drawn from N(0, 0.02^2).
  SetClassifier(const SetClassifierConfig& config, Rng& rng) : SetClassifier(config) {
    for_each_parameter([&](Parameter<T>& p) {
      const std::string& n = p.name;
      if (n == "cls_token") {
        for (auto& v : p.value.values()) v = static_cast<T>(rng.normal(0.0, 0.02));
      } else if (n.ends_with(".weight")) {
        const double fan_in = static_cast<double>(p.value.shape()[0]);
        const double fan_out = static_cast<double>(p.value.shape()[1]);
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : p.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
      } else if (n.ends_with(".gain")) {
        p.value.fill(T(1));
      }
    });
  }

  // All parameters zero-filled with the right shapes; used to load checkpoints.
  explicit SetClassifier(const SetClassifierConfig& config) : config_(config) {
    config_.validate();
    const std::size_t din = config_.input_dim, d = config_.model_dim, c = config_.num_classes;
    const std::size_t ff = config_.feedforward_dim;
    embed1_ = make_linear("embed.fc1", din, d);
    embed2_ = make_linear("embed.fc2", d, d);
    cls_token_ = Parameter<T>("cls_token", Tensor<T>(Shape{d}));
    layers_.resize(config_.encoder_layers);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string pre = "encoder." + std::to_string(i) + ".";
      EncoderLayerParams<T>& l = layers_[i];
      l.q = make_linear(pre + "attn.q", d, d);
      l.k = Parameter<T>(pre + "attn.k.weight", Tensor<T>(Shape{d, d}));
      l.v = make_linear(pre + "attn.v", d, d);
      l.out = make_linear(pre + "attn.out", d, d);
      l.norm1 = make_norm(pre + "norm1", d);
      l.ff1 = make_linear(pre + "ff.fc1", d, ff);
      l.ff2 = make_linear(pre + "ff.fc2", ff, d);
      l.norm2 = make_norm(pre + "norm2", d);
    }
    set_head_ = make_linear("set_head", d, c);
    instance_head_ = make_linear("instance_head", d, c);
    cluster_head_ = make_linear("cluster_head", d, c);
  }

  const SetClassifierConfig& config() const { return config_; }
  SetClassifierConfig& mutable_config() { return config_; }

  // Canonical parameter order; checkpoints and optimizers rely on it.
  template <typename F>
  void for_each_parameter(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_parameter(F&& f) const {
    visit(*this, f);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for_each_parameter([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const Parameter<T>& p) { n += p.value.size(); });
    return n;
  }

  const LinearParams<T>& embed1() const { return embed1_; }
  const LinearParams<T>& embed2() const { return embed2_; }
  const Parameter<T>& cls_token() const { return cls_token_; }
  const std::vector<EncoderLayerParams<T>>& layers() const { return layers_; }
  const LinearParams<T>& set_head() const { return set_head_; }
  const LinearParams<T>& instance_head() const { return instance_head_; }
  const LinearParams<T>& cluster_head() const { return cluster_head_; }
  LinearParams<T>& embed1() { return embed1_; }
  LinearParams<T>& embed2() { return embed2_; }
  Parameter<T>& cls_token() { return cls_token_; }
  std::vector<EncoderLayerParams<T>>& layers() { return layers_; }
  LinearParams<T>& set_head() { return set_head_; }
  LinearParams<T>& instance_head() { return instance_head_; }
  LinearParams<T>& cluster_head() { return cluster_head_; }

  template <typename U>
  SetClassifier<U> cast() const {
    SetClassifier<U> out(config_);
    auto dst = out.parameters();
    std::size_t i = 0;
    for_each_parameter([&](const Parameter<T>& p) { dst[i++]->value = p.value.template cast<U>(); });
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& s, F& f) {
    auto lin = [&](auto& l) {
      f(l.weight);
      f(l.bias);
    };
    auto norm = [&](auto& n) {
      f(n.gain);
      f(n.shift);
    };
    lin(s.embed1_);
    lin(s.embed2_);
    f(s.cls_token_);
    for (auto& l : s.layers_) {
      lin(l.q);
      f(l.k);
      lin(l.v);
      lin(l.out);
      norm(l.norm1);
      lin(l.ff1);
      lin(l.ff2);
      norm(l.norm2);
    }
    lin(s.set_head_);
    lin(s.instance_head_);
    lin(s.cluster_head_);
  }

  static LinearParams<T> make_linear(const std::string& name, std::size_t in, std::size_t out) {
    return {Parameter<T>(name + ".weight", Tensor<T>(Shape{in, out})),
            Parameter<T>(name + ".bias", Tensor<T>(Shape{out}))};
  }
  static NormParams<T> make_norm(const std::string& name, std::size_t d) {
    return {Parameter<T>(name + ".gain", Tensor<T>(Shape{d}, T(1))),
            Parameter<T>(name + ".shift", Tensor<T>(Shape{d}))};
  }

  SetClassifierConfig config_;
  LinearParams<T> embed1_, embed2_;
  Parameter<T> cls_token_;
  std::vector<EncoderLayerParams<T>> layers_;
  LinearParams<T> set_head_, instance_head_, cluster_head_;
};

// ---- Graph construction ----------------------------------------------------

template <typename T>
struct LinearVars {
  Var<T> weight, bias;
};

template <typename T>
struct EncoderLayerVars {
  AttentionVars<T> attn;
  Var<T> norm1_gain, norm1_shift;
  LinearVars<T> ff1, ff2;
  Var<T> norm2_gain, norm2_shift;
};

// Model parameters bound to one tape.
template <typename T>
struct ModelVars {
  std::size_t heads = 1;
  LinearVars<T> embed1, embed2;
  Var<T> cls_token;
  std::vector<EncoderLayerVars<T>> layers;
  LinearVars<T> set_head, instance_head, cluster_head;
};

namespace detail {

template <typename T, typename Model, typename Bind>
inline ModelVars<T> bind_with(Model& m, Bind bind) {
  ModelVars<T> v;
  v.heads = m.config().heads;
  auto lin = [&](auto& l) { return LinearVars<T>{bind(l.weight), bind(l.bias)}; };
  v.embed1 = lin(m.embed1());
  v.embed2 = lin(m.embed2());
  v.cls_token = bind(m.cls_token());
  for (auto& l : m.layers()) {
    EncoderLayerVars<T> e;
    const LinearVars<T> q = lin(l.q), vv = lin(l.v), o = lin(l.out);
    e.attn = AttentionVars<T>{q.weight, q.bias, bind(l.k), Var<T>{}, vv.weight, vv.bias, o.weight, o.bias};
    e.norm1_gain = bind(l.norm1.gain);
    e.norm1_shift = bind(l.norm1.shift);
    e.ff1 = lin(l.ff1);
    e.ff2 = lin(l.ff2);
    e.norm2_gain = bind(l.norm2.gain);
    e.norm2_shift = bind(l.norm2.shift);
    v.layers.push_back(e);
  }
  v.set_head = lin(m.set_head());
  v.instance_head = lin(m.instance_head());
  v.cluster_head = lin(m.cluster_head());
  return v;
}

}  // namespace detail

// Binds for training: backward() accumulates into the model's gradients.
template <typename T>
inline ModelVars<T> bind_trainable(Tape<T>& tape, SetClassifier<T>& model) {
  return detail::bind_with<T>(model, [&](Parameter<T>& p) { return tape.parameter(p); });
}

// Binds read-only; safe for concurrent inference over one model.
template <typename T>
inline ModelVars<T> bind_frozen(Tape<T>& tape, const SetClassifier<T>& model) {
  return detail::bind_with<T>(model, [&](const Parameter<T>& p) { return tape.frozen(p.value); });
}

// Row-wise embedding head: two linear layers with a rectifier between.
template <typename T>
inline Var<T> embed_rois(const ModelVars<T>& m, Var<T> features) {
  return linear(relu(linear(features, m.embed1.weight, m.embed1.bias)), m.embed2.weight, m.embed2.bias);
}

template <typename T>
inline Var<T> encoder_layer(const EncoderLayerVars<T>& l, Var<T> tokens, std::size_t heads,
                     std::span<const std::size_t> offsets) {
  Var<T> attended = multi_head_attention(tokens, l.attn, heads, offsets);
  Var<T> h = layer_norm(add(tokens, attended), l.norm1_gain, l.norm1_shift);
  Var<T> ff = linear(relu(linear(h, l.ff1.weight, l.ff1.bias)), l.ff2.weight, l.ff2.bias);
  return layer_norm(add(h, ff), l.norm2_gain, l.norm2_shift);
}

// Graph outputs for a packed batch of B tracklets holding N RoIs in total.
template <typename T>
struct BatchVars {
  Var<T> set_logits;       // [B, C]
  Var<T> instance_logits;  // [N, C], rows in input order
  Var<T> cluster_logits;   // [N, C]
  Var<T> roi_tokens;       // [N, d], pre-encoder x_1..x_L
  Var<T> embeddings;       // [N + B, d], z_0..z_L of each tracklet in turn
  std::vector<std::size_t> token_offsets;
};

// Runs the set classifier over tracklets packed row-wise into `features`;
// tracklet b occupies rows [offsets[b], offsets[b+1]).
template <typename T>
inline BatchVars<T> forward_batch(const ModelVars<T>& m, Var<T> features, std::span<const std::size_t> offsets) {
  const std::size_t n = features.value().rows();
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != n) {
    throw std::invalid_argument("forward_batch: offsets must partition the feature rows");
  }
  const std::size_t batch = offsets.size() - 1;
  for (std::size_t b = 0; b < batch; ++b) {
    if (offsets[b + 1] <= offsets[b]) throw std::invalid_argument("forward_batch: empty tracklet");
  }

  BatchVars<T> out;
  out.roi_tokens = embed_rois(m, features);

  // Row 0 of `stacked` is the classification token, row 1 + i is RoI i.
  Var<T> stacked = concat_rows(m.cls_token, out.roi_tokens);
  std::vector<std::size_t> order, cls_rows, roi_rows;
  order.reserve(n + batch);
  out.token_offsets.push_back(0);
  for (std::size_t b = 0; b < batch; ++b) {
    cls_rows.push_back(order.size());
    order.push_back(0);
    for (std::size_t r = offsets[b]; r < offsets[b + 1]; ++r) {
      roi_rows.push_back(order.size());
      order.push_back(1 + r);
    }
    out.token_offsets.push_back(order.size());
  }
  Var<T> tokens = gather_rows(stacked, std::move(order));
  for (const auto& layer : m.layers) tokens = encoder_layer(layer, tokens, m.heads, out.token_offsets);
  out.embeddings = tokens;

  out.set_logits = linear(gather_rows(tokens, std::move(cls_rows)), m.set_head.weight, m.set_head.bias);
  out.instance_logits =
      linear(gather_rows(tokens, std::move(roi_rows)), m.instance_head.weight, m.instance_head.bias);
  out.cluster_logits = linear(out.roi_tokens, m.cluster_head.weight, m.cluster_head.bias);
  return out;
}

template <typename T>
struct SetClassifierOutput {
  Tensor<T> set_logits;        // [C]
  Tensor<T> instance_logits;   // [L, C]
  Tensor<T> cluster_logits;    // [L, C]
  Tensor<T> token_embeddings;  // [L + 1, d]
};

template <typename T>
inline void check_tracklet_features(const SetClassifierConfig& cfg, const Tensor<T>& features) {
  if (features.rank() != 2) throw std::invalid_argument("tracklet features must be a [L, d_in] matrix");
  if (features.rows() == 0) throw std::invalid_argument("tracklet must contain at least one RoI");
  if (features.cols() != cfg.input_dim) {
    throw std::invalid_argument("feature width " + std::to_string(features.cols()) +
                                " does not match model input_dim " + std::to_string(cfg.input_dim));
  }
  if (features.rows() > cfg.max_length) {
    throw std::invalid_argument("tracklet length " + std::to_string(features.rows()) +
                                " exceeds max_length " + std::to_string(cfg.max_length));
  }
}

template <typename T>
inline SetClassifierOutput<T> forward(const Tensor<T>& features, const SetClassifier<T>& model) {
  check_tracklet_features(model.config(), features);
  Tape<T> tape;
  const ModelVars<T> m = bind_frozen(tape, model);
  const std::size_t offsets[2] = {0, features.rows()};
  const BatchVars<T> b = forward_batch(m, tape.frozen(features), std::span<const std::size_t>(offsets, 2));
  SetClassifierOutput<T> out;
  out.set_logits = Tensor<T>(Shape{model.config().num_classes}, b.set_logits.value().values());
  out.instance_logits = b.instance_logits.value();
  out.cluster_logits = b.cluster_logits.value();
  out.token_embeddings = b.embeddings.value();
  return out;
}

// Softmax of the set logits.
template <typename T>
inline Tensor<T> predict_set_probs(const SetClassifierOutput<T>& output) {
  Tensor<T> probs(Shape{output.set_logits.size()});
  probs.mat() = detail::softmax_rows<T>(output.set_logits.mat());
  return probs;
}

// Set probabilities for many tracklets in one packed pass; rows follow
// `tracklets`.
template <typename T>
inline std::vector<std::vector<double>> predict_set_probs_batch(const SetClassifier<T>& model,
                                                         std::span<const Tensor<T>> tracklets) {
  std::vector<std::vector<double>> out;
  if (tracklets.empty()) return out;
  std::size_t total = 0;
  std::vector<std::size_t> offsets{0};
  for (const auto& t : tracklets) {
    check_tracklet_features(model.config(), t);
    total += t.rows();
    offsets.push_back(total);
  }
  Tensor<T> packed(Shape{total, model.config().input_dim});
  for (std::size_t b = 0; b < tracklets.size(); ++b) {
    std::copy(tracklets[b].values().begin(), tracklets[b].values().end(),
              packed.values().begin() + static_cast<std::ptrdiff_t>(offsets[b] * model.config().input_dim));
  }
  Tape<T> tape;
  const ModelVars<T> m = bind_frozen(tape, model);
  const BatchVars<T> b = forward_batch(m, tape.frozen(packed), offsets);
  const Matrix<T> probs = detail::softmax_rows<T>(b.set_logits.value().mat());
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(probs.cols()));
    for (Eigen::Index c = 0; c < probs.cols(); ++c) row[static_cast<std::size_t>(c)] = probs(r, c);
    out.push_back(std::move(row));
  }
  return out;
}

// Evenly spaced indices floor(k * length / cap), k = 0..cap-1; identity when
// length <= cap.
inline std::vector<std::size_t> subsample_indices(std::size_t length, std::size_t cap) {
  std::vector<std::size_t> idx;
  if (length <= cap) {
    for (std::size_t i = 0; i < length; ++i) idx.push_back(i);
    return idx;
  }
  for (std::size_t k = 0; k < cap; ++k) idx.push_back(k * length / cap);
  return idx;
}

// ---- Checkpoints -----------------------------------------------------------
//
// "SCKP", u32 version, u32 x 6 config (input, model, heads, layers, classes,
// feedforward), u64 parameter count, then per parameter: u32 name length,
// name bytes, u32 rank, u64 extents, f64 values. All little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
inline void write_checkpoint(std::ostream& os, const SetClassifier<T>& model) {
  const SetClassifierConfig& c = model.config();
  binary::put_bytes(os, "SCKP");
  binary::put_u32(os, kCheckpointVersion);
  for (std::size_t v : {c.input_dim, c.model_dim, c.heads, c.encoder_layers, c.num_classes, c.feedforward_dim}) {
    binary::put_u32(os, static_cast<std::uint32_t>(v));
  }
  std::uint64_t count = 0;
  model.for_each_parameter([&](const Parameter<T>&) { ++count; });
  binary::put_u64(os, count);
  model.for_each_parameter([&](const Parameter<T>& p) {
    binary::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    binary::put_bytes(os, p.name);
    binary::put_u32(os, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t e : p.value.shape()) binary::put_u64(os, e);
    for (T v : p.value.values()) binary::put_f64(os, static_cast<double>(v));
  });
  if (!os) throw std::runtime_error("write_checkpoint: stream error");
}

template <typename T>
inline SetClassifier<T> read_checkpoint(std::istream& is) {
  binary::expect_magic(is, "SCKP");
  const std::uint32_t version = binary::get_u32(is, "version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  SetClassifierConfig c;
  c.input_dim = binary::get_u32(is, "config");
  c.model_dim = binary::get_u32(is, "config");
  c.heads = binary::get_u32(is, "config");
  c.encoder_layers = binary::get_u32(is, "config");
  c.num_classes = binary::get_u32(is, "config");
  c.feedforward_dim = binary::get_u32(is, "config");
  SetClassifier<T> model(c);
  const std::uint64_t count = binary::get_u64(is, "parameter count");
  auto params = model.parameters();
  if (count != params.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                             std::to_string(params.size()));
  }
  for (Parameter<T>* p : params) {
    const std::uint32_t len = binary::get_u32(is, "name length");
    const std::string name = binary::get_bytes(is, len, "name");
    if (name != p->name) throw std::runtime_error("checkpoint parameter '" + name + "', expected '" + p->name + "'");
    const std::uint32_t rank = binary::get_u32(is, "rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(binary::get_u64(is, "extent"));
    if (shape != p->value.shape()) {
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + shape_string(shape) +
                               ", expected " + shape_string(p->value.shape()));
    }
    for (auto& v : p->value.values()) v = static_cast<T>(binary::get_f64(is, "values"));
    p->zero_grad();
  }
  return model;
}

template <typename T>
inline void save_checkpoint(const std::string& path, const SetClassifier<T>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  write_checkpoint(os, model);
}

template <typename T>
inline SetClassifier<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  return read_checkpoint<T>(is);
}

}  // namespace setcls
