#include "jlml/model_config.hpp"

#include "jlml/errors.hpp"
#include "jlml/ops.hpp"

namespace jlml {

std::string loss_mode_name(LossMode mode) { return mode == LossMode::multi ? "multi" : "uni"; }

LossMode parse_loss_mode(std::string_view text) {
  if (text == "multi" || text == "MultiLoss" || text == "multiloss") return LossMode::multi;
  if (text == "uni" || text == "UniLoss" || text == "uniloss") return LossMode::uni;
  throw ConfigError("unknown loss mode '" + std::string(text) + "' (expected multi or uni)");
}

namespace {

StageWidths scaled(const StageWidths& w, std::size_t divisor) {
  StageWidths out = w;
  for (auto& b : out) {
    b.reduce /= divisor;
    b.spatial /= divisor;
    b.expand /= divisor;
  }
  return out;
}

std::string widths_text(const BottleneckWidths& w) {
  return std::to_string(w.reduce) + "," + std::to_string(w.spatial) + "," + std::to_string(w.expand);
}

BottleneckWidths parse_widths(std::string_view key, std::string_view text) {
  std::array<std::size_t, 3> v{};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto comma = text.find(',');
    if ((i < 2) == (comma == std::string_view::npos)) {
      throw ConfigError("invalid value '" + std::string(text) + "' for " + std::string(key) +
                        " (expected reduce,spatial,expand)");
    }
    v[i] = parse_size(key, text.substr(0, comma));
    if (i < 2) text.remove_prefix(comma + 1);
  }
  return {v[0], v[1], v[2]};
}

const StageWidths kPaperGlobal{{{32, 32, 64}, {64, 64, 128}, {128, 128, 256}, {256, 256, 512}}};
const StageWidths kPaperLocal{{{16, 16, 32}, {32, 32, 64}, {64, 64, 128}, {128, 128, 256}}};

}  // namespace

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.global_stages = kPaperGlobal;
  c.local_stages = kPaperLocal;
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c = paper();
  c.input_height = 64;
  c.input_width = 64;
  c.stem_channels = 8;
  c.global_stages = scaled(kPaperGlobal, 4);
  c.local_stages = scaled(kPaperLocal, 4);
  c.global_feature_dim = 128;
  c.local_feature_dim = 128;
  c.num_identities = 16;
  return c;
}

std::size_t ModelConfig::stem_height() const { return window_output(input_height, 3, 2, 1, 1); }
std::size_t ModelConfig::stem_width() const { return window_output(input_width, 3, 2, 1, 1); }

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(input_height, "input_height");
  positive(input_width, "input_width");
  positive(stem_channels, "stem_channels");
  positive(blocks_per_stage, "blocks_per_stage");
  positive(stripes, "stripes");
  positive(global_feature_dim, "global_feature_dim");
  positive(local_feature_dim, "local_feature_dim");
  positive(num_identities, "num_identities");
  for (std::size_t s = 0; s < kStages; ++s) {
    for (const auto* w : {&global_stages[s], &local_stages[s]}) {
      if (w->reduce == 0 || w->spatial == 0 || w->expand == 0) {
        throw ConfigError("stage " + std::to_string(s + 1) + " has a zero width");
      }
    }
  }
  if (lambda_global < 0 || lambda_local < 0) throw ConfigError("regulariser weights must be non-negative");
  if (input_height < 2 || input_width < 2) throw ConfigError("input must be at least 2x2");
  const std::size_t sh = stem_height();
  if (sh % stripes != 0) {
    throw ConfigError("stem output height " + std::to_string(sh) + " is not divisible by " +
                      std::to_string(stripes) + " stripes");
  }
}

KeyValues ModelConfig::to_key_values() const {
  KeyValues kv{
      {"input_height", std::to_string(input_height)},
      {"input_width", std::to_string(input_width)},
      {"stem_channels", std::to_string(stem_channels)},
  };
  for (std::size_t s = 0; s < kStages; ++s) {
    kv.emplace_back("global_stage" + std::to_string(s + 1), widths_text(global_stages[s]));
  }
  for (std::size_t s = 0; s < kStages; ++s) {
    kv.emplace_back("local_stage" + std::to_string(s + 1), widths_text(local_stages[s]));
  }
  kv.insert(kv.end(), {
                          {"blocks_per_stage", std::to_string(blocks_per_stage)},
                          {"stripes", std::to_string(stripes)},
                          {"global_feature_dim", std::to_string(global_feature_dim)},
                          {"local_feature_dim", std::to_string(local_feature_dim)},
                          {"num_identities", std::to_string(num_identities)},
                          {"share_stem", format_bool(share_stem)},
                          {"sfl_enabled", format_bool(sfl_enabled)},
                          {"loss_mode", loss_mode_name(loss_mode)},
                          {"lambda_global", format_double(lambda_global)},
                          {"lambda_local", format_double(lambda_local)},
                          {"batch_norm", format_bool(batch_norm)},
                      });
  return kv;
}

bool ModelConfig::apply(std::string_view key, std::string_view value) {
  if (key == "input_height") input_height = parse_size(key, value);
  else if (key == "input_width") input_width = parse_size(key, value);
  else if (key == "input_size") input_height = input_width = parse_size(key, value);
  else if (key == "stem_channels") stem_channels = parse_size(key, value);
  else if (key == "blocks_per_stage") blocks_per_stage = parse_size(key, value);
  else if (key == "stripes" || key == "m") stripes = parse_size(key, value);
  else if (key == "global_feature_dim") global_feature_dim = parse_size(key, value);
  else if (key == "local_feature_dim") local_feature_dim = parse_size(key, value);
  else if (key == "num_identities") num_identities = parse_size(key, value);
  else if (key == "share_stem") share_stem = parse_bool(key, value);
  else if (key == "sfl_enabled") sfl_enabled = parse_bool(key, value);
  else if (key == "loss_mode") loss_mode = parse_loss_mode(value);
  else if (key == "lambda_global") lambda_global = parse_double(key, value);
  else if (key == "lambda_local") lambda_local = parse_double(key, value);
  else if (key == "batch_norm") batch_norm = parse_bool(key, value);
  else {
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::string n = std::to_string(s + 1);
      if (key == "global_stage" + n) {
        global_stages[s] = parse_widths(key, value);
        return true;
      }
      if (key == "local_stage" + n) {
        local_stages[s] = parse_widths(key, value);
        return true;
      }
    }
    return false;
  }
  return true;
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv, const ModelConfig& base) {
  ModelConfig c = base;
  for (const auto& [k, v] : kv) {
    if (!c.apply(k, v)) throw ConfigError("unknown model key '" + k + "'");
  }
  return c;
}

}  // namespace jlml
