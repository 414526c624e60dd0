#include "jlml/model.hpp"

#include <cmath>
#include <optional>
#include <random>

#include "jlml/errors.hpp"

namespace jlml {

namespace {

struct ConvUnit {
  Tensor weight;
  Tensor bias;  // only without batch norm
  Tensor gamma;
  Tensor beta;
  BatchNormState bn;
  Conv2dOptions options;

  Tensor operator()(const Tensor& x, Mode mode) const {
    Tensor y = conv2d(x, weight, bias, options);
    if (gamma.defined()) y = batchnorm2d(y, gamma, beta, bn, mode);
    return y;
  }
};

struct Block {
  ConvUnit reduce;
  ConvUnit spatial;
  ConvUnit expand;
  std::optional<ConvUnit> projection;

  Tensor operator()(const Tensor& x, Mode mode) const {
    Tensor h = relu(reduce(x, mode));
    h = relu(spatial(h, mode));
    h = expand(h, mode);
    const Tensor shortcut = projection ? (*projection)(x, mode) : x;
    return relu(add(h, shortcut));
  }
};

struct Dense {
  Tensor weight;  // out x in
  Tensor bias;

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

std::uint64_t name_hash(std::string_view name) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

struct JlmlModel::Impl {
  ModelConfig config;
  DType dtype = DType::f32;
  ConvUnit stem_global;
  std::optional<ConvUnit> stem_local;
  std::vector<Block> global_blocks;
  std::vector<std::vector<Block>> local_blocks;  // one stream per stripe
  Dense global_feature;
  Dense local_feature;
  Dense global_head;
  Dense local_head;
  Dense fused_head;
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> buffers;
};

namespace {

// Every tensor draws from its own generator keyed by (seed, name), so the
// values of a layer do not depend on which other layers exist.
class Builder {
 public:
  Builder(std::uint64_t seed, DType dtype, std::vector<NamedTensor>& params, std::vector<NamedTensor>& buffers)
      : seed_(seed), dtype_(dtype), params_(params), buffers_(buffers) {}

  Tensor normal(const std::string& name, Shape shape, double stddev) {
    auto rng = generator(name);
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return param(name, Tensor::from_vector(std::move(shape), std::move(v)));
  }

  Tensor uniform(const std::string& name, Shape shape, double bound) {
    auto rng = generator(name);
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return param(name, Tensor::from_vector(std::move(shape), std::move(v)));
  }

  Tensor constant(const std::string& name, Shape shape, double value) {
    return param(name, Tensor::full(std::move(shape), value, DType::f64));
  }

  Tensor buffer(const std::string& name, Shape shape, double value) {
    Tensor t = Tensor::full(std::move(shape), value, dtype_);
    buffers_.push_back({name, t});
    return t;
  }

  ConvUnit conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                bool batch_norm) {
    ConvUnit u;
    const std::size_t pad = kernel / 2;
    u.options = {{stride, stride}, {pad, pad}};
    // He initialisation for ReLU networks.
    const double fan_in = static_cast<double>(in * kernel * kernel);
    u.weight = normal(name + ".weight", {out, in, kernel, kernel}, std::sqrt(2.0 / fan_in));
    if (batch_norm) {
      u.gamma = constant(name + ".gamma", {out}, 1.0);
      u.beta = constant(name + ".beta", {out}, 0.0);
      u.bn.running_mean = buffer(name + ".running_mean", {out}, 0.0);
      u.bn.running_var = buffer(name + ".running_var", {out}, 1.0);
    } else {
      u.bias = constant(name + ".bias", {out}, 0.0);
    }
    return u;
  }

  Dense dense(const std::string& name, std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Dense d;
    d.weight = uniform(name + ".weight", {out, in}, bound);
    d.bias = constant(name + ".bias", {out}, 0.0);
    return d;
  }

  std::vector<Block> stream(const std::string& prefix, std::size_t in, const StageWidths& widths,
                            std::size_t blocks, bool batch_norm) {
    std::vector<Block> out;
    for (std::size_t s = 0; s < kStages; ++s) {
      const auto& w = widths[s];
      for (std::size_t b = 0; b < blocks; ++b) {
        const std::string name = prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        // Downsampling happens in the first 1x1 of a stage, as does the
        // matching projection shortcut.
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        Block blk;
        blk.reduce = conv(name + ".reduce", in, w.reduce, 1, stride, batch_norm);
        blk.spatial = conv(name + ".spatial", w.reduce, w.spatial, 3, 1, batch_norm);
        blk.expand = conv(name + ".expand", w.spatial, w.expand, 1, 1, batch_norm);
        if (in != w.expand || stride != 1) {
          blk.projection = conv(name + ".projection", in, w.expand, 1, stride, batch_norm);
        }
        out.push_back(std::move(blk));
        in = w.expand;
      }
    }
    return out;
  }

 private:
  std::mt19937_64 generator(const std::string& name) const {
    const std::uint64_t h = name_hash(name);
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    return std::mt19937_64(seq);
  }

  Tensor param(const std::string& name, Tensor t) {
    Tensor p = t.to(dtype_);
    p.set_requires_grad(true);
    params_.push_back({name, p});
    return p;
  }

  std::uint64_t seed_;
  DType dtype_;
  std::vector<NamedTensor>& params_;
  std::vector<NamedTensor>& buffers_;
};

}  // namespace

JlmlModel JlmlModel::build(const ModelConfig& config, std::uint64_t seed, DType dtype) {
  config.validate();
  JlmlModel model;
  model.impl_ = std::make_shared<Impl>();
  Impl& m = *model.impl_;
  m.config = config;
  m.dtype = dtype;
  Builder b(seed, dtype, m.parameters, m.buffers);
  const bool bn = config.batch_norm;

  if (config.share_stem) {
    m.stem_global = b.conv("stem", 3, config.stem_channels, 3, 2, bn);
  } else {
    m.stem_global = b.conv("stem_global", 3, config.stem_channels, 3, 2, bn);
    m.stem_local = b.conv("stem_local", 3, config.stem_channels, 3, 2, bn);
  }
  m.global_blocks = b.stream("global", config.stem_channels, config.global_stages, config.blocks_per_stage, bn);
  for (std::size_t j = 0; j < config.stripes; ++j) {
    m.local_blocks.push_back(b.stream("local.stripe" + std::to_string(j + 1), config.stem_channels,
                                      config.local_stages, config.blocks_per_stage, bn));
  }
  m.global_feature = b.dense("global.feature", config.global_channels(), config.global_feature_dim);
  m.local_feature = b.dense("local.feature", config.stripes * config.local_channels(), config.local_feature_dim);
  if (config.loss_mode == LossMode::multi) {
    m.global_head = b.dense("global.head", config.global_feature_dim, config.num_identities);
    m.local_head = b.dense("local.head", config.local_feature_dim, config.num_identities);
  } else {
    m.fused_head = b.dense("fused.head", config.global_feature_dim + config.local_feature_dim, config.num_identities);
  }
  return model;
}

const ModelConfig& JlmlModel::config() const { return impl_->config; }
DType JlmlModel::dtype() const { return impl_->dtype; }
const std::vector<NamedTensor>& JlmlModel::parameters() const { return impl_->parameters; }
const std::vector<NamedTensor>& JlmlModel::buffers() const { return impl_->buffers; }

std::vector<NamedTensor> JlmlModel::state() const {
  std::vector<NamedTensor> out = impl_->parameters;
  out.insert(out.end(), impl_->buffers.begin(), impl_->buffers.end());
  return out;
}

std::size_t JlmlModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : impl_->parameters) n += p.tensor.numel();
  return n;
}

const Tensor& JlmlModel::tensor(std::string_view name) const {
  for (const auto* list : {&impl_->parameters, &impl_->buffers}) {
    for (const auto& p : *list)
      if (p.name == name) return p.tensor;
  }
  throw ConfigError("model has no tensor named '" + std::string(name) + "'");
}

const Tensor& JlmlModel::global_feature_weight() const { return impl_->global_feature.weight; }
const Tensor& JlmlModel::local_feature_weight() const { return impl_->local_feature.weight; }

ForwardOutput JlmlModel::forward(const Tensor& batch, Mode mode) const {
  const Impl& m = *impl_;
  const ModelConfig& c = m.config;
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != c.input_height || batch.dim(3) != c.input_width) {
    throw DimensionError("forward: expected N x 3 x " + std::to_string(c.input_height) + " x " +
                         std::to_string(c.input_width) + " batch, got " + shape_str(batch.shape()));
  }
  if (batch.dtype() != m.dtype) {
    throw DimensionError(std::string("forward: batch is ") + dtype_name(batch.dtype()) + " but model is " +
                         dtype_name(m.dtype));
  }

  const Tensor stem_g = relu(m.stem_global(batch, mode));
  const Tensor stem_l = m.stem_local ? relu((*m.stem_local)(batch, mode)) : stem_g;

  Tensor g = maxpool2d(stem_g, Pool2dOptions::square(3, 2, 1));
  for (const Block& blk : m.global_blocks) g = blk(g, mode);
  ForwardOutput out;
  out.global_feature = m.global_feature(global_avgpool(g));

  std::vector<Tensor> parts;
  const std::vector<Tensor> stripes = slice_h(stem_l, c.stripes);
  for (std::size_t j = 0; j < stripes.size(); ++j) {
    const Tensor& s = stripes[j];
    Tensor h = maxpool2d(s, Pool2dOptions::same({2, 2}, {1, 2}, s.dim(2), s.dim(3)));
    for (const Block& blk : m.local_blocks[j]) h = blk(h, mode);
    parts.push_back(global_avgpool(h));
  }
  out.local_feature = m.local_feature(concat(std::span<const Tensor>(parts), 1));

  if (c.loss_mode == LossMode::multi) {
    out.global_logits = m.global_head(out.global_feature);
    out.local_logits = m.local_head(out.local_feature);
  } else {
    out.fused_logits = m.fused_head(concat({out.global_feature, out.local_feature}, 1));
  }
  return out;
}

JlmlModel JlmlModel::clone(DType dtype) const {
  JlmlModel copy = build(impl_->config, 0, dtype);
  copy.copy_state_from(*this);
  return copy;
}

void JlmlModel::copy_state_from(const JlmlModel& other) {
  const auto dst = state();
  const auto src = other.state();
  if (dst.size() != src.size()) throw DimensionError("copy_state_from: models have different layouts");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name) {
      throw DimensionError("copy_state_from: tensor '" + dst[i].name + "' faces '" + src[i].name + "'");
    }
    Tensor t = dst[i].tensor;
    t.copy_from(src[i].tensor);
  }
}

void JlmlModel::zero_grad() const {
  for (const auto& p : impl_->parameters) {
    Tensor t = p.tensor;
    t.clear_grad();
  }
}

}  // namespace jlml
