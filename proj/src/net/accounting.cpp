#include "jlml/accounting.hpp"

#include <array>

#include "jlml/ops.hpp"

namespace jlml {

namespace {

struct Planner {
  const ModelConfig& config;
  Accounting& acc;

  void conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
            std::size_t& h, std::size_t& w, std::size_t copies) {
    const std::size_t pad = kernel / 2;
    h = window_output(h, kernel, stride, pad, pad);
    w = window_output(w, kernel, stride, pad, pad);
    LayerRow row{name, "conv", kernel, stride, stride, in, out, h, w, copies};
    const std::size_t extra = config.batch_norm ? 2 * out : out;
    row.params = copies * (in * out * kernel * kernel + extra);
    row.macs = copies * in * out * kernel * kernel * h * w;
    acc.layers.push_back(row);
  }

  void pool(const std::string& name, std::size_t channels, std::size_t kernel, std::size_t sh, std::size_t sw,
            std::size_t h, std::size_t w, std::size_t copies) {
    LayerRow row{name, "pool", kernel, sh, sw, channels, channels, h, w, copies};
    acc.layers.push_back(row);
  }

  void fc(const std::string& name, std::size_t in, std::size_t out, bool head) {
    LayerRow row{name, "fc", 1, 1, 1, in, out, 1, 1, 1};
    row.params = in * out + out;
    row.macs = in * out;
    row.head = head;
    acc.layers.push_back(row);
  }

  // Returns the channel count; h and w are updated to the stage outputs.
  std::size_t stream(const std::string& prefix, std::size_t in, const StageWidths& widths, std::size_t& h,
                     std::size_t& w, std::size_t copies, std::vector<std::array<std::size_t, 2>>& stage_out) {
    for (std::size_t s = 0; s < kStages; ++s) {
      const auto& wd = widths[s];
      for (std::size_t b = 0; b < config.blocks_per_stage; ++b) {
        const std::string name = prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        std::size_t bh = h, bw = w;
        if (in != wd.expand || stride != 1) {
          std::size_t ph = h, pw = w;
          conv(name + ".projection", in, wd.expand, 1, stride, ph, pw, copies);
        }
        conv(name + ".reduce", in, wd.reduce, 1, stride, bh, bw, copies);
        conv(name + ".spatial", wd.reduce, wd.spatial, 3, 1, bh, bw, copies);
        conv(name + ".expand", wd.spatial, wd.expand, 1, 1, bh, bw, copies);
        h = bh;
        w = bw;
        in = wd.expand;
      }
      stage_out.push_back({h, w});
    }
    return in;
  }
};

}  // namespace

Accounting account(const ModelConfig& config) {
  config.validate();
  Accounting acc;
  Planner p{config, acc};
  const std::size_t m = config.stripes;

  std::size_t h = config.input_height, w = config.input_width;
  p.conv("stem", 3, config.stem_channels, 3, 2, h, w, config.share_stem ? 1 : 2);
  const std::size_t stem_h = h, stem_w = w;

  std::size_t gh = window_output(stem_h, 3, 2, 1, 1), gw = window_output(stem_w, 3, 2, 1, 1);
  p.pool("global.maxpool", config.stem_channels, 3, 2, 2, gh, gw, 1);
  std::vector<std::array<std::size_t, 2>> g_sizes, l_sizes;
  const std::size_t dg = p.stream("global", config.stem_channels, config.global_stages, gh, gw, 1, g_sizes);

  // Stripe pooling keeps the height and halves the width (far-edge padding).
  std::size_t lh = stem_h / m, lw = (stem_w + 1) / 2;
  p.pool("local.maxpool", config.stem_channels, 2, 1, 2, lh, lw, m);
  const std::size_t dl = p.stream("local.stripe", config.stem_channels, config.local_stages, lh, lw, m, l_sizes);

  p.fc("global.feature", dg, config.global_feature_dim, false);
  p.fc("local.feature", m * dl, config.local_feature_dim, false);
  if (config.loss_mode == LossMode::multi) {
    p.fc("global.head", config.global_feature_dim, config.num_identities, true);
    p.fc("local.head", config.local_feature_dim, config.num_identities, true);
  } else {
    p.fc("fused.head", config.global_feature_dim + config.local_feature_dim, config.num_identities, true);
  }

  acc.stages.push_back({"conv1", stem_h, stem_w, stem_h, stem_w});
  for (std::size_t s = 0; s < kStages; ++s) {
    acc.stages.push_back({"conv" + std::to_string(s + 2) + "_x", g_sizes[s][0], g_sizes[s][1], l_sizes[s][0],
                          l_sizes[s][1]});
  }
  for (const LayerRow& row : acc.layers) {
    acc.params_total += row.params;
    if (row.head) {
      acc.params_heads += row.params;
      acc.flops_heads += 2 * row.macs;
    } else {
      acc.flops += 2 * row.macs;
    }
  }
  acc.depth = 1 + kStages * config.blocks_per_stage * 3 + 2;
  acc.streams = 1 + m;
  return acc;
}

}  // namespace jlml
