#pragma once

// The four-module counting network: multi-scale front-end with cross-layer
// fusion, count-group classifier whose predicted-class weights are mapped
// back onto the features, confidence head, density head, and the
// confidence-gated fusion head. Also the named-parameter store and its
// binary checkpoint format.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crowdcount/groundtruth.hpp"
#include "crowdcount/rng.hpp"
#include "crowdcount/tensor.hpp"

namespace crowdcount {

struct ArchConfig {
  int in_channels = 1;
  int base_channels = 8;               // per front-end branch
  std::vector<int> dilation_set = {1, 2, 3, 4};
  int pool_stages = 2;                 // output divisor = 2^pool_stages
  int k_groups = 5;
  int c1 = 32;                         // fused feature (FM1) width
  // Trunk tapers after the second tap so that disabling the cross-layer
  // connection strictly shrinks the model (its single 1x1 conv reads the
  // last tap only).
  int trunk_w1 = 32, trunk_w2 = 64, trunk_w3 = 48;
  bool use_confidence = true;
  bool use_cross_layer = true;
  enum class FmOutput { fm1_only, fm2_only, both } fm_output = FmOutput::both;

  int divisor() const { return 1 << pool_stages; }
  int out_channels() const { return fm_output == FmOutput::both ? 2 * c1 : c1; }

  void validate() const {
    if (in_channels != 1 && in_channels != 3)
      throw std::invalid_argument("arch: in_channels must be 1 or 3");
    if (base_channels < 1 || c1 < 1 || trunk_w1 < 1 || trunk_w2 < 1 || trunk_w3 < 1)
      throw std::invalid_argument("arch: channel widths must be positive");
    if (dilation_set.empty())
      throw std::invalid_argument("arch: dilation_set must be nonempty");
    for (int d : dilation_set)
      if (d < 1) throw std::invalid_argument("arch: dilations must be positive");
    if (pool_stages != 2)
      throw std::invalid_argument("arch: the trunk is built for exactly two pool stages");
    if (k_groups < 1) throw std::invalid_argument("arch: k_groups must be >= 1");
    if (use_cross_layer && c1 % 2 != 0)
      throw std::invalid_argument("arch: c1 must be even with the cross-layer connection");
  }
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

// Learnable tensors addressable by stable names. Values are derived from
// (seed, name), so shared modules initialize identically across ablation
// variants that add or drop other parameters.
class ModelParams {
 public:
  ModelParams() = default;

  static ModelParams init(const ArchConfig& arch, std::uint64_t seed) {
    arch.validate();
    ModelParams p;
    const int nb = static_cast<int>(arch.dilation_set.size());
    for (int i = 0; i < nb; ++i)
      p.add_conv(seed, "frontend.b" + std::to_string(i),
                 {arch.base_channels, arch.in_channels, 3, 3});
    p.add_conv(seed, "trunk.c1", {arch.trunk_w1, nb * arch.base_channels, 3, 3});
    p.add_conv(seed, "trunk.c2", {arch.trunk_w2, arch.trunk_w1, 3, 3});
    p.add_conv(seed, "trunk.c3", {arch.trunk_w3, arch.trunk_w2, 3, 3});
    if (arch.use_cross_layer) {
      p.add_conv(seed, "fuse.t1", {arch.c1 / 2, arch.trunk_w2, 1, 1});
      p.add_conv(seed, "fuse.t2", {arch.c1 / 2, arch.trunk_w3, 1, 1});
    } else {
      p.add_conv(seed, "fuse.t2", {arch.c1, arch.trunk_w3, 1, 1});
    }
    p.add(seed, "classifier.fc.weight", {arch.k_groups, arch.c1}, 0.01);
    p.add(seed, "classifier.fc.bias", {arch.k_groups}, 0.0);
    p.add(seed, "classifier.prelu.slope", {1}, 0.0);
    p.at("classifier.prelu.slope").data()[0] = 0.25;
    if (arch.use_confidence) p.add_conv(seed, "conf.conv", {1, arch.out_channels(), 1, 1});
    p.add_conv(seed, "den.conv", {1, arch.out_channels(), 1, 1});
    p.add_conv(seed, "fusion.conv", {1, 1, 3, 3});
    // identity-leaning start: a net-negative 3x3 kernel on the single fused
    // channel would die at the output relu with no way back
    p.at("fusion.conv.weight").at(0, 0, 1, 1) += 1.0;
    return p;
  }

  Tensor& at(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return t;
    throw std::out_of_range("no parameter named '" + name + "'");
  }
  const Tensor& at(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return t;
    throw std::out_of_range("no parameter named '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return true;
    return false;
  }

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

  void add_raw(std::string name, Tensor t) {
    if (has(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    items_.emplace_back(std::move(name), std::move(t));
  }

 private:
  void add(std::uint64_t seed, const std::string& name, std::vector<int> shape,
           double stddev) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    if (stddev > 0.0) {
      Rng rng(Rng::mix(seed, detail::fnv1a(name)));
      for (auto& v : t.data()) v = rng.normal(0.0, stddev);
    }
    add_raw(name, std::move(t));
  }
  void add_conv(std::uint64_t seed, const std::string& stem, std::vector<int> wshape) {
    const int cout = wshape[0];
    add(seed, stem + ".weight", std::move(wshape), 0.01);
    add(seed, stem + ".bias", {cout}, 0.0);
  }

  std::vector<std::pair<std::string, Tensor>> items_;
};

struct ForwardOutput {
  Tensor class_logits;   // [K]
  Tensor fm1;            // [C1,H',W'] fused multi-scale features
  Tensor fm2;            // [C1,H',W'] features scaled by the predicted class's weights
  Tensor confidence;     // [1,H',W'] in (0,1); undefined when the head is ablated
  Tensor est_density;    // [1,H',W'] >= 0
  Tensor fusion_input;   // the map entering the post-fusion conv
  Tensor final_density;  // [1,H',W'] >= 0
  int predicted_group = 0;
};

inline int argmax(const Tensor& t) {
  int best = 0;
  for (std::size_t i = 1; i < t.numel(); ++i)
    if (t.data()[i] > t.data()[best]) best = static_cast<int>(i);
  return best;
}

// Pools any spatial extent down to one value per channel (adaptive 4x4 max,
// then mean), then scores the K count groups through the FC layer.
inline Tensor classify_groups(Tensor fm1, const ModelParams& params) {
  const int gh = std::min(fm1.extent(1), 4), gw = std::min(fm1.extent(2), 4);
  Tensor v = avg_pool_all(adaptive_max_pool(fm1, gh, gw));
  return prelu(linear(v, params.at("classifier.fc.weight"), params.at("classifier.fc.bias")),
               params.at("classifier.prelu.slope"));
}

// fm2[c] = fc_weight[predicted, c] * fm1[c]. The row choice is a fixed
// selection; scaling stays differentiable in fm1 and the selected row.
inline Tensor map_class_weights(Tensor fm1, Tensor fc_weight, int predicted) {
  return scale_channels(fm1, select_row(fc_weight, predicted));
}

struct MihOutput {
  Tensor fm1;
  Tensor fm2;
  Tensor logits;
  Tensor fm_out;
  int predicted_group = 0;
};

inline MihOutput mih_forward(Tensor image, const ModelParams& params,
                             const ArchConfig& arch,
                             std::optional<int> force_class = std::nullopt) {
  // center the [0,1] input so conv zero padding reads as mid-gray rather
  // than as the darkest possible content
  Tensor centered = add(image, Tensor::full(image.shape(), -0.5));

  // parallel dilated branches over the input image
  Tensor branches;
  for (std::size_t i = 0; i < arch.dilation_set.size(); ++i) {
    const std::string stem = "frontend.b" + std::to_string(i);
    Tensor b = relu(conv2d(centered, params.at(stem + ".weight"), params.at(stem + ".bias"),
                           arch.dilation_set[i]));
    branches = i == 0 ? b : concat_channels(branches, b);
  }

  // trunk with taps at both pooled depths
  Tensor t0 = relu(conv2d(branches, params.at("trunk.c1.weight"), params.at("trunk.c1.bias")));
  Tensor t1 = relu(conv2d(maxpool2(t0), params.at("trunk.c2.weight"), params.at("trunk.c2.bias")));
  Tensor t1_pooled = maxpool2(t1);
  Tensor t2 = relu(conv2d(t1_pooled, params.at("trunk.c3.weight"), params.at("trunk.c3.bias")));

  Tensor fm1;
  if (arch.use_cross_layer) {
    Tensor shallow =
        relu(conv2d(t1_pooled, params.at("fuse.t1.weight"), params.at("fuse.t1.bias")));
    Tensor deep = relu(conv2d(t2, params.at("fuse.t2.weight"), params.at("fuse.t2.bias")));
    fm1 = concat_channels(shallow, deep);
  } else {
    fm1 = relu(conv2d(t2, params.at("fuse.t2.weight"), params.at("fuse.t2.bias")));
  }

  MihOutput out;
  out.fm1 = fm1;
  out.logits = classify_groups(fm1, params);
  out.predicted_group = force_class.value_or(argmax(out.logits));
  if (out.predicted_group < 0 || out.predicted_group >= arch.k_groups)
    throw std::invalid_argument("mih_forward: class index out of range");
  out.fm2 = map_class_weights(fm1, params.at("classifier.fc.weight"), out.predicted_group);
  switch (arch.fm_output) {
    case ArchConfig::FmOutput::fm1_only: out.fm_out = fm1; break;
    case ArchConfig::FmOutput::fm2_only: out.fm_out = out.fm2; break;
    case ArchConfig::FmOutput::both: out.fm_out = concat_channels(fm1, out.fm2); break;
  }
  return out;
}

// 1x1 conv then logistic squashing; the BCE target is binary, so outputs
// must stay inside (0,1).
inline Tensor confidence_head(Tensor features, const ModelParams& params) {
  return logistic(conv2d(features, params.at("conf.conv.weight"), params.at("conf.conv.bias")));
}

inline Tensor density_head(Tensor features, const ModelParams& params) {
  return relu(conv2d(features, params.at("den.conv.weight"), params.at("den.conv.bias")));
}

struct FusionOutput {
  Tensor final_density;
  Tensor fusion_input;  // exposed so the gating property is observable
};

inline FusionOutput fusion_head(Tensor est_density, Tensor confidence,
                                const ModelParams& params, bool use_confidence) {
  FusionOutput out;
  out.fusion_input = use_confidence ? mul_elementwise(est_density, confidence) : est_density;
  out.final_density = relu(
      conv2d(out.fusion_input, params.at("fusion.conv.weight"), params.at("fusion.conv.bias")));
  return out;
}

inline ForwardOutput forward(Tensor image, const ModelParams& params, const ArchConfig& arch,
                             std::optional<int> force_class = std::nullopt) {
  MihOutput mih = mih_forward(image, params, arch, force_class);
  ForwardOutput out;
  out.class_logits = mih.logits;
  out.fm1 = mih.fm1;
  out.fm2 = mih.fm2;
  out.predicted_group = mih.predicted_group;
  out.est_density = density_head(mih.fm_out, params);
  if (arch.use_confidence) out.confidence = confidence_head(mih.fm_out, params);
  FusionOutput fused =
      fusion_head(out.est_density, out.confidence, params, arch.use_confidence);
  out.fusion_input = fused.fusion_input;
  out.final_density = fused.final_density;
  return out;
}

inline double integrate_count(const Tensor& density) {
  double total = 0.0;
  for (double v : density.data()) total += v;
  return total;
}

// ---- checkpoint format ----
//
// version byte, then ArchConfig, GroupBins edges, and a flat archive of
// (name, shape, raw little-endian f64 values) triples. Round-trips bit
// exactly.

struct Checkpoint {
  ArchConfig arch;
  GroupBins bins;
  ModelParams params;
};

namespace detail {

inline void put_u8(std::ostream& out, std::uint8_t v) {
  out.put(static_cast<char>(v));
}
inline void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>(v >> (8 * i) & 0xff));
}
inline void put_i32(std::ostream& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}
inline void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>(bits >> (8 * i) & 0xff));
}
inline void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint8_t get_u8(std::istream& in) {
  const int c = in.get();
  if (c < 0) throw std::runtime_error("checkpoint: unexpected end of file");
  return static_cast<std::uint8_t>(c);
}
inline std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(get_u8(in)) << (8 * i);
  return v;
}
inline std::int32_t get_i32(std::istream& in) {
  return static_cast<std::int32_t>(get_u32(in));
}
inline double get_f64(std::istream& in) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(get_u8(in)) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}
inline std::string get_str(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (static_cast<std::uint32_t>(in.gcount()) != n)
    throw std::runtime_error("checkpoint: unexpected end of file");
  return s;
}

}  // namespace detail

inline constexpr std::uint8_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open checkpoint for writing");
  detail::put_u8(out, kCheckpointVersion);
  const ArchConfig& a = ckpt.arch;
  detail::put_i32(out, a.in_channels);
  detail::put_i32(out, a.base_channels);
  detail::put_u32(out, static_cast<std::uint32_t>(a.dilation_set.size()));
  for (int d : a.dilation_set) detail::put_i32(out, d);
  detail::put_i32(out, a.pool_stages);
  detail::put_i32(out, a.k_groups);
  detail::put_i32(out, a.c1);
  detail::put_i32(out, a.trunk_w1);
  detail::put_i32(out, a.trunk_w2);
  detail::put_i32(out, a.trunk_w3);
  detail::put_u8(out, a.use_confidence ? 1 : 0);
  detail::put_u8(out, a.use_cross_layer ? 1 : 0);
  detail::put_u8(out, static_cast<std::uint8_t>(a.fm_output));
  detail::put_i32(out, ckpt.bins.k);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.bins.edges.size()));
  for (double e : ckpt.bins.edges) detail::put_f64(out, e);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.params.items().size()));
  for (const auto& [name, t] : ckpt.params.items()) {
    detail::put_str(out, name);
    detail::put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) detail::put_i32(out, d);
    for (double v : t.data()) detail::put_f64(out, v);
  }
  if (!out) throw std::runtime_error(path + ": short checkpoint write");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open checkpoint");
  const std::uint8_t version = detail::get_u8(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  Checkpoint ckpt;
  ArchConfig& a = ckpt.arch;
  a.in_channels = detail::get_i32(in);
  a.base_channels = detail::get_i32(in);
  a.dilation_set.resize(detail::get_u32(in));
  for (int& d : a.dilation_set) d = detail::get_i32(in);
  a.pool_stages = detail::get_i32(in);
  a.k_groups = detail::get_i32(in);
  a.c1 = detail::get_i32(in);
  a.trunk_w1 = detail::get_i32(in);
  a.trunk_w2 = detail::get_i32(in);
  a.trunk_w3 = detail::get_i32(in);
  a.use_confidence = detail::get_u8(in) != 0;
  a.use_cross_layer = detail::get_u8(in) != 0;
  a.fm_output = static_cast<ArchConfig::FmOutput>(detail::get_u8(in));
  ckpt.bins.k = detail::get_i32(in);
  ckpt.bins.edges.resize(detail::get_u32(in));
  for (double& e : ckpt.bins.edges) e = detail::get_f64(in);
  const std::uint32_t n_params = detail::get_u32(in);
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const std::string name = detail::get_str(in);
    const int rank = detail::get_u8(in);
    std::vector<int> shape(static_cast<std::size_t>(rank));
    for (int& d : shape) d = detail::get_i32(in);
    Tensor t = Tensor::zeros(shape, true);
    for (auto& v : t.data()) v = detail::get_f64(in);
    ckpt.params.add_raw(name, std::move(t));
  }
  return ckpt;
}

}  // namespace crowdcount
