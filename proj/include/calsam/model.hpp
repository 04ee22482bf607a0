#pragma once

// Frozen encoder (theta) and trainable mask decoder (phi).
//
// Encoder: strided patch embedding (kernel = stride = patch) followed by two
// 3x3x3 conv + ReLU blocks. Decoder: 3x3x3 conv + ReLU at feature
// resolution, upsampling by the patch size, then a 1x1x1 conv to one logit
// channel. Prompts enter as two extra input channels when guided.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "calsam/autodiff.hpp"
#include "calsam/synthdata.hpp"
#include "calsam/volume.hpp"

namespace calsam {

struct ModelConfig {
  bool guided = true;
  std::size_t feature_channels = 16;
  std::size_t decoder_channels = 8;
  std::size_t patch = 4;
  ad::kernels::UpsampleMode upsample = ad::kernels::UpsampleMode::linear;
  std::uint64_t encoder_seed = 20240101;

  std::size_t input_channels() const { return guided ? 3 : 1; }
};

struct NamedTensor {
  std::string name;
  ad::Tensor value;
};

/// Encoder parameters are fixed at construction; only the decoder can be
/// updated.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(std::vector<NamedTensor> theta, std::vector<NamedTensor> phi)
      : theta_(std::move(theta)), phi_(std::move(phi)) {}

  const std::vector<NamedTensor>& theta() const { return theta_; }
  const std::vector<NamedTensor>& phi() const { return phi_; }

  std::vector<ad::Tensor> phi_values() const {
    std::vector<ad::Tensor> out;
    for (const auto& p : phi_) out.push_back(p.value);
    return out;
  }

  void set_phi(std::size_t i, ad::Tensor value) {
    auto& slot = phi_.at(i);
    if (value.shape() != slot.value.shape()) {
      throw std::invalid_argument("decoder parameter " + slot.name + " shape " +
                                  ad::to_string(value.shape()) + " != " +
                                  ad::to_string(slot.value.shape()));
    }
    for (double v : value.values()) {
      if (!std::isfinite(v)) {
        throw std::runtime_error("non-finite value in decoder parameter " + slot.name);
      }
    }
    slot.value = value.detach();
  }

  std::size_t phi_count() const {
    std::size_t n = 0;
    for (const auto& p : phi_) n += p.value.size();
    return n;
  }

 private:
  std::vector<NamedTensor> theta_;
  std::vector<NamedTensor> phi_;
};

namespace detail {

inline ad::Tensor he_normal(const ad::Shape& shape, std::size_t fan_in, std::mt19937_64& rng,
                            double gain = 1.0) {
  std::normal_distribution<double> n(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(ad::element_count(shape));
  for (auto& x : v) x = n(rng);
  return ad::Tensor(shape, std::move(v));
}

inline ad::Tensor add_channel_bias(const ad::Tensor& x, const ad::Tensor& bias) {
  const auto c = bias.size();
  return ad::add(x, ad::broadcast_to(ad::reshape(bias, {c, 1, 1, 1}), x.shape()));
}

}  // namespace detail

inline std::vector<NamedTensor> init_encoder(const ModelConfig& cfg) {
  std::mt19937_64 rng(cfg.encoder_seed);
  const std::size_t c = cfg.feature_channels, in = cfg.input_channels(), p = cfg.patch;
  return {
      {"encoder.patch.weight", detail::he_normal({c, in, p, p, p}, in * p * p * p, rng)},
      {"encoder.patch.bias", ad::Tensor::zeros({c})},
      {"encoder.block1.weight", detail::he_normal({c, c, 3, 3, 3}, c * 27, rng)},
      {"encoder.block1.bias", ad::Tensor::zeros({c})},
      {"encoder.block2.weight", detail::he_normal({c, c, 3, 3, 3}, c * 27, rng)},
      {"encoder.block2.bias", ad::Tensor::zeros({c})},
  };
}

inline std::vector<NamedTensor> init_decoder(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(synth::mix_seed(seed, 0xdec));
  const std::size_t c = cfg.feature_channels, d = cfg.decoder_channels;
  return {
      {"decoder.conv.weight", detail::he_normal({d, c, 3, 3, 3}, c * 27, rng)},
      {"decoder.conv.bias", ad::Tensor::zeros({d})},
      {"decoder.head.weight", detail::he_normal({1, d, 1, 1, 1}, d, rng, 0.5)},
      {"decoder.head.bias", ad::Tensor::zeros({1})},
  };
}

inline ParamStore init_params(const ModelConfig& cfg, std::uint64_t decoder_seed) {
  return ParamStore(init_encoder(cfg), init_decoder(cfg, decoder_seed));
}

/// [1, C, nz, ny, nx] network input: intensity, then prompt channels if guided.
inline ad::Tensor make_input(const Volume3D& v, const Prompt& p, bool guided) {
  const auto& d = v.dims;
  std::vector<double> data(v.data.begin(), v.data.end());
  std::size_t channels = 1;
  if (guided) {
    const auto prompt = synth::encode_prompt_channels(p, d, v.spacing);
    data.insert(data.end(), prompt.begin(), prompt.end());
    channels = 3;
  }
  return ad::Tensor({1, channels, d.nz, d.ny, d.nx}, std::move(data));
}

/// Concatenates constant tensors along the batch axis.
inline ad::Tensor stack_batch(std::span<const ad::Tensor> items) {
  if (items.empty()) throw std::invalid_argument("empty batch");
  ad::Shape shape = items[0].shape();
  std::vector<double> data;
  for (const auto& t : items) {
    ad::Shape s = t.shape();
    s[0] = shape[0];
    if (s != shape) {
      throw std::invalid_argument("batch items differ in shape: " + ad::to_string(items[0].shape()) +
                                  " vs " + ad::to_string(t.shape()));
    }
    const auto v = t.values();
    data.insert(data.end(), v.begin(), v.end());
  }
  shape[0] = 0;
  for (const auto& t : items) shape[0] += t.shape()[0];
  return ad::Tensor(std::move(shape), std::move(data));
}

/// Frozen image + prompt encoder. Parameters enter as constants, so nothing
/// here is ever recorded for differentiation.
inline ad::Tensor encode(const ad::Tensor& x, const ParamStore& params, const ModelConfig& cfg) {
  if (x.rank() != 5 || x.shape()[1] != cfg.input_channels()) {
    throw std::invalid_argument("encoder expects [N," + std::to_string(cfg.input_channels()) +
                                ",D,H,W] input, got " + ad::to_string(x.shape()));
  }
  for (std::size_t a = 2; a < 5; ++a) {
    if (x.shape()[a] % cfg.patch != 0) {
      throw std::invalid_argument("input extents " + ad::to_string(x.shape()) +
                                  " not divisible by patch size " + std::to_string(cfg.patch));
    }
  }
  const auto& th = params.theta();
  auto w = [&](std::size_t i) { return th.at(i).value.detach(); };
  ad::Tensor z = ad::conv3d(x.detach(), w(0), cfg.patch, 0);
  z = detail::add_channel_bias(z, w(1));
  z = ad::relu(detail::add_channel_bias(ad::conv3d(z, w(2), 1, 1), w(3)));
  z = ad::relu(detail::add_channel_bias(ad::conv3d(z, w(4), 1, 1), w(5)));
  return z;
}

/// Per-voxel logits [N,1,D,H,W]. `phi` holds the decoder tensors in
/// init_decoder order; pass graph leaves to differentiate.
inline ad::Tensor decode(const ad::Tensor& z, std::span<const ad::Tensor> phi,
                         const ModelConfig& cfg) {
  if (phi.size() != 4) throw std::invalid_argument("decoder expects 4 parameter tensors");
  if (z.rank() != 5 || z.shape()[1] != cfg.feature_channels) {
    throw std::invalid_argument("decoder expects [N," + std::to_string(cfg.feature_channels) +
                                ",d,h,w] features, got " + ad::to_string(z.shape()));
  }
  ad::Tensor h = ad::relu(detail::add_channel_bias(ad::conv3d(z, phi[0], 1, 1), phi[1]));
  h = ad::upsample3d(h, cfg.patch, cfg.upsample);
  return detail::add_channel_bias(ad::conv3d(h, phi[2], 1, 0), phi[3]);
}

/// A sample ready for the network: input channels and truth as tensors.
struct Example {
  std::string id;
  DomainTag domain;
  ad::Tensor input;  // [1, C, nz, ny, nx]
  ad::Tensor truth;  // [1, 1, nz, ny, nx], 0/1
  SegMask mask;
  Spacing spacing{1.0, 1.0, 1.0};
};

inline Example prepare_example(std::string id, const synth::Sample& s, bool guided) {
  Example e;
  e.id = std::move(id);
  e.domain = s.domain;
  e.input = make_input(s.volume, s.prompt, guided);
  const auto& d = s.mask.dims;
  e.truth = ad::Tensor({1, 1, d.nz, d.ny, d.nx}, std::vector<double>(s.mask.labels.begin(), s.mask.labels.end()));
  e.mask = s.mask;
  e.spacing = s.volume.spacing;
  return e;
}

/// Logits of the current parameters, no differentiation.
inline ad::Tensor predict_logits(const ad::Tensor& x, const ParamStore& params, const ModelConfig& cfg) {
  const auto phi = params.phi_values();
  std::vector<ad::Tensor> constants;
  for (const auto& p : phi) constants.push_back(p.detach());
  return decode(encode(x, params, cfg), constants, cfg);
}

}  // namespace calsam
