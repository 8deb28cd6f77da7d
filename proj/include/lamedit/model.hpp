#pragma once

// Toy residual stack of linear-associative-memory FFN layers.
//
//   h^0 = x
//   k^l = act(W_in^l norm(h^{l-1}))
//   h^l = h^{l-1} + W_out^l k^l
//
// Attention is omitted; only W_out of the edit layers is ever modified. The
// readout picks the codebook column with the largest inner product with h^L.

#include "lamedit/container.hpp"
#include "lamedit/core.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace lamedit {

enum class NormKind { kLayerNorm, kIdentity };
enum class ActivationKind { kRelu, kIdentity };

inline constexpr double kLayerNormEps = 1e-5;

struct LamLayer {
  Matrix w_in;       // h x d
  Matrix w_out;      // d x h
  Vector norm_scale; // d
  Vector norm_bias;  // d
};

struct EditRequest {
  FactId fact_id;
  LanguageId language_id;
  Vector input;
  TokenId old_token = 0;
  TokenId new_token = 0;
};

// A fact the model should keep recalling (preserved sample, unrelated probe).
struct KnownFact {
  FactId fact_id;
  LanguageId language_id;
  Vector input;
  TokenId token = 0;
};

struct HiddenTrace {
  std::vector<Vector> hidden;  // L+1 entries, hidden[0] is the input
  std::vector<Vector> keys;    // L entries, keys[l-1] belongs to layer l

  const Vector& output() const { return hidden.back(); }
};

class ToyModel {
 public:
  ToyModel() = default;

  ToyModel(std::vector<LamLayer> layers, Matrix codebook, std::vector<int> edit_layers,
           NormKind norm = NormKind::kLayerNorm, ActivationKind activation = ActivationKind::kRelu)
      : layers_(std::move(layers)),
        codebook_(std::move(codebook)),
        edit_layers_(std::move(edit_layers)),
        norm_(norm),
        activation_(activation) {
    validate();
  }

  Index model_dim() const { return codebook_.rows(); }
  Index ffn_dim() const { return layers_.empty() ? 0 : layers_.front().w_in.rows(); }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  Index vocab_size() const { return codebook_.cols(); }

  const std::vector<LamLayer>& layers() const { return layers_; }
  const LamLayer& layer(int l) const {
    check_layer(l);
    return layers_[static_cast<std::size_t>(l - 1)];
  }
  const Matrix& codebook() const { return codebook_; }
  const std::vector<int>& edit_layers() const { return edit_layers_; }
  NormKind norm_kind() const { return norm_; }
  ActivationKind activation_kind() const { return activation_; }

  bool is_edit_layer(int l) const {
    return std::find(edit_layers_.begin(), edit_layers_.end(), l) != edit_layers_.end();
  }

  // Number of edit layers at or above `l`; the divisor used when spreading a
  // residual bottom-to-top.
  int edit_layers_remaining(int l) const {
    return static_cast<int>(std::count_if(edit_layers_.begin(), edit_layers_.end(), [l](int e) { return e >= l; }));
  }

  void check_layer(int l) const {
    if (l < 1 || l > num_layers())
      throw ShapeError("layer index " + std::to_string(l) + " out of range 1.." + std::to_string(num_layers()));
  }

  Vector normalize(const LamLayer& layer, const Vector& h) const {
    if (norm_ == NormKind::kIdentity) return h;
    const double mean = h.mean();
    const Vector centered = h.array() - mean;
    const double var = centered.squaredNorm() / static_cast<double>(h.size());
    return (centered / std::sqrt(var + kLayerNormEps)).cwiseProduct(layer.norm_scale) + layer.norm_bias;
  }

  Vector activate(Vector z) const {
    if (activation_ == ActivationKind::kRelu) z = z.cwiseMax(0.0);
    return z;
  }

  Vector compute_key(int l, const Vector& h_prev) const {
    check_layer(l);
    require_shape(h_prev.size() == model_dim(), "compute_key: hidden state has dimension " +
                                                    std::to_string(h_prev.size()) + ", expected " +
                                                    std::to_string(model_dim()));
    const auto& layer = layers_[static_cast<std::size_t>(l - 1)];
    return activate(layer.w_in * normalize(layer, h_prev));
  }

  HiddenTrace forward(const Vector& x) const {
    require_shape(x.size() == model_dim(),
                  "forward: input has dimension " + std::to_string(x.size()) + ", expected " + std::to_string(model_dim()));
    HiddenTrace t;
    t.hidden.reserve(layers_.size() + 1);
    t.keys.reserve(layers_.size());
    t.hidden.push_back(x);
    for (int l = 1; l <= num_layers(); ++l) {
      t.keys.push_back(compute_key(l, t.hidden.back()));
      t.hidden.push_back(t.hidden.back() + layers_[static_cast<std::size_t>(l - 1)].w_out * t.keys.back());
    }
    return t;
  }

  Vector output(const Vector& x) const { return forward(x).output(); }

  // Lowest index wins ties.
  TokenId predict_from_output(const Vector& out) const {
    require_shape(vocab_size() > 0, "predict: empty codebook");
    const Vector scores = codebook_.transpose() * out;
    Index best = 0;
    for (Index j = 1; j < scores.size(); ++j)
      if (scores(j) > scores(best)) best = j;
    return static_cast<TokenId>(best);
  }

  TokenId predict(const Vector& x) const { return predict_from_output(output(x)); }

  struct KeysAndTargets {
    Matrix keys;    // h x n
    Matrix values;  // d x n
  };

  // K_req and V_req for one edit layer from a single forward pass per
  // request. V_req is the layer's current value plus an equal share of the
  // residual still missing at the output, split over this and the edit
  // layers above it.
  KeysAndTargets compute_keys_and_targets(std::span<const EditRequest> requests, int layer) const {
    check_layer(layer);
    if (!is_edit_layer(layer)) throw ConfigError("layer " + std::to_string(layer) + " is not an edit layer");
    const int remaining = edit_layers_remaining(layer);
    const auto& w_out = layers_[static_cast<std::size_t>(layer - 1)].w_out;
    KeysAndTargets kt{Matrix(ffn_dim(), static_cast<Index>(requests.size())),
                      Matrix(model_dim(), static_cast<Index>(requests.size()))};
    for (std::size_t i = 0; i < requests.size(); ++i) {
      const auto& req = requests[i];
      check_token(req.new_token);
      const auto trace = forward(req.input);
      const Vector& key = trace.keys[static_cast<std::size_t>(layer - 1)];
      const Vector residual = codebook_.col(req.new_token) - trace.output();
      kt.keys.col(static_cast<Index>(i)) = key;
      kt.values.col(static_cast<Index>(i)) = w_out * key + residual / remaining;
    }
    return kt;
  }

  Matrix compute_target_values(std::span<const EditRequest> requests, int layer) const {
    return compute_keys_and_targets(requests, layer).values;
  }

  void check_token(TokenId t) const {
    if (static_cast<Index>(t) >= vocab_size())
      throw InvalidRequestError("token " + std::to_string(t) + " outside vocabulary of size " +
                                std::to_string(vocab_size()));
  }

  // Copy with W_out^l += scale * delta.
  ToyModel with_w_out_update(int l, const Matrix& delta, double scale = 1.0) const {
    check_layer(l);
    auto& w = layers_[static_cast<std::size_t>(l - 1)].w_out;
    require_shape(delta.rows() == w.rows() && delta.cols() == w.cols(), "W_out update has wrong shape");
    ToyModel copy = *this;
    copy.add_to_w_out(l, delta, scale);
    return copy;
  }

  // In-place variant for working copies owned by the caller.
  void add_to_w_out(int l, const Matrix& delta, double scale = 1.0) {
    check_layer(l);
    auto& w = layers_[static_cast<std::size_t>(l - 1)].w_out;
    require_shape(delta.rows() == w.rows() && delta.cols() == w.cols(), "W_out update has wrong shape");
    w.noalias() += scale * delta;
  }

  void set_w_out(int l, Matrix w) {
    check_layer(l);
    auto& dst = layers_[static_cast<std::size_t>(l - 1)].w_out;
    require_shape(w.rows() == dst.rows() && w.cols() == dst.cols(), "W_out replacement has wrong shape");
    dst = std::move(w);
  }

  void validate() const {
    if (layers_.empty()) throw ShapeError("model needs at least one layer");
    const Index d = codebook_.rows();
    const Index h = layers_.front().w_in.rows();
    if (d < 2 || h < d) throw ShapeError("model needs h >= d >= 2");
    for (const auto& layer : layers_) {
      require_shape(layer.w_in.rows() == h && layer.w_in.cols() == d, "W_in must be h x d");
      require_shape(layer.w_out.rows() == d && layer.w_out.cols() == h, "W_out must be d x h");
      require_shape(layer.norm_scale.size() == d && layer.norm_bias.size() == d, "norm parameters must have size d");
      if (!layer.w_in.allFinite() || !layer.w_out.allFinite() || !layer.norm_scale.allFinite() ||
          !layer.norm_bias.allFinite())
        throw NumericalError("model layer has non-finite entries");
    }
    if (codebook_.cols() < 1) throw ShapeError("codebook must be nonempty");
    for (Index j = 0; j < codebook_.cols(); ++j)
      if (std::abs(codebook_.col(j).norm() - 1.0) > 1e-9) throw ShapeError("codebook columns must have unit norm");
    if (edit_layers_.empty()) throw ConfigError("edit_layers must be nonempty");
    for (std::size_t i = 0; i < edit_layers_.size(); ++i) {
      if (edit_layers_[i] < 1 || edit_layers_[i] > num_layers())
        throw ConfigError("edit layer " + std::to_string(edit_layers_[i]) + " out of range");
      if (i > 0 && edit_layers_[i] <= edit_layers_[i - 1]) throw ConfigError("edit_layers must be strictly increasing");
    }
  }

  // -------------------------------------------------------------------------
  // serialization
  // -------------------------------------------------------------------------

  MatrixContainer to_container() const {
    MatrixContainer c;
    Matrix meta(1, 6);
    meta << static_cast<double>(model_dim()), static_cast<double>(ffn_dim()), num_layers(),
        static_cast<double>(vocab_size()), norm_ == NormKind::kLayerNorm ? 0.0 : 1.0,
        activation_ == ActivationKind::kRelu ? 0.0 : 1.0;
    c.put("model/meta", meta);
    Matrix el(1, static_cast<Index>(edit_layers_.size()));
    for (std::size_t i = 0; i < edit_layers_.size(); ++i) el(0, static_cast<Index>(i)) = edit_layers_[i];
    c.put("model/edit_layers", el);
    for (int l = 1; l <= num_layers(); ++l) {
      const auto& layer = layers_[static_cast<std::size_t>(l - 1)];
      const auto p = "model/layer" + std::to_string(l) + "/";
      c.put(p + "w_in", layer.w_in);
      c.put(p + "w_out", layer.w_out);
      c.put_vector(p + "norm_scale", layer.norm_scale);
      c.put_vector(p + "norm_bias", layer.norm_bias);
    }
    c.put("model/codebook", codebook_);
    return c;
  }

  static ToyModel from_container(const MatrixContainer& c) {
    const auto& meta = c.get("model/meta");
    require_shape(meta.rows() == 1 && meta.cols() == 6, "model/meta must be 1 x 6");
    const int num = static_cast<int>(meta(0, 2));
    std::vector<LamLayer> layers;
    for (int l = 1; l <= num; ++l) {
      const auto p = "model/layer" + std::to_string(l) + "/";
      layers.push_back({c.get(p + "w_in"), c.get(p + "w_out"), c.get_vector(p + "norm_scale"),
                        c.get_vector(p + "norm_bias")});
    }
    const auto& el = c.get("model/edit_layers");
    std::vector<int> edit;
    for (Index i = 0; i < el.cols(); ++i) edit.push_back(static_cast<int>(el(0, i)));
    return ToyModel(std::move(layers), c.get("model/codebook"), std::move(edit),
                    meta(0, 4) == 0.0 ? NormKind::kLayerNorm : NormKind::kIdentity,
                    meta(0, 5) == 0.0 ? ActivationKind::kRelu : ActivationKind::kIdentity);
  }

 private:
  std::vector<LamLayer> layers_;
  Matrix codebook_;
  std::vector<int> edit_layers_;
  NormKind norm_ = NormKind::kLayerNorm;
  ActivationKind activation_ = ActivationKind::kRelu;
};

}  // namespace lamedit
