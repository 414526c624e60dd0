#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "jlml/accounting.hpp"
#include "jlml/binary_io.hpp"
#include "jlml/checkpoint.hpp"
#include "jlml/cli.hpp"
#include "jlml/dataset_io.hpp"
#include "jlml/errors.hpp"
#include "jlml/grad_suite.hpp"
#include "jlml/graph.hpp"

namespace jlml {

namespace {

namespace fs = std::filesystem;

// Command-line defaults: the generator defaults, the toy network and the
// default SGD hyperparameters with a short schedule.
ExperimentConfig cli_base() {
  ExperimentConfig c;
  c.model = ModelConfig::toy();
  return c;
}

struct Settings {
  std::string config_file;
  std::vector<std::string> assignments;
  KeyValues flags;  // filled by flag callbacks, applied last

  ExperimentConfig resolve(const ExperimentConfig& base) const {
    KeyValues overrides;
    for (const auto& a : assignments) overrides.push_back(parse_assignment(a));
    overrides.insert(overrides.end(), flags.begin(), flags.end());
    std::optional<fs::path> file;
    if (!config_file.empty()) file = config_file;
    return resolve_run_config(base, file, overrides);
  }
};

void add_settings(CLI::App* cmd, Settings& s) {
  cmd->add_option("--config", s.config_file, "key=value configuration file ('#' starts a comment)");
  cmd->add_option("--set", s.assignments, "override one key, e.g. --set train.base_lr=0.02 (repeatable)");
}

// A flag that stands for one configuration key.
template <class T>
void add_key_flag(CLI::App* cmd, Settings& s, const std::string& flag, const std::string& key,
                  const std::string& help) {
  cmd->add_option_function<T>(
      flag,
      [&s, key](const T& v) {
        std::ostringstream text;
        if constexpr (std::is_floating_point_v<T>) text << format_double(v);
        else text << v;
        s.flags.emplace_back(key, text.str());
      },
      help);
}

KeyValues prefixed(const KeyValues& kv, const std::string& prefix) {
  KeyValues out;
  for (const auto& [k, v] : kv) out.emplace_back(prefix + k, v);
  return out;
}

KeyValues section(const KeyValues& kv, std::initializer_list<std::string_view> prefixes) {
  KeyValues out;
  for (const auto& p : kv)
    for (auto pre : prefixes)
      if (std::string_view(p.first).starts_with(pre)) {
        out.push_back(p);
        break;
      }
  return out;
}

void append(KeyValues& to, const KeyValues& from) { to.insert(to.end(), from.begin(), from.end()); }

KeyValues read_sidecar(const fs::path& path) {
  return fs::exists(path) ? parse_key_values(binary::read_file(path)) : KeyValues{};
}

fs::path sidecar(const fs::path& path, const char* suffix) { return fs::path(path.string() + suffix); }

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---- gen --------------------------------------------------------------------

struct GenArgs {
  Settings settings;
  std::string out;
  std::string format = "jlmi";
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  const ExperimentConfig cfg = a.settings.resolve(cli_base());
  const ImageFormat format = parse_image_format(a.format);
  const IdentityDataset ds = tag_splits(generate(cfg.data), cfg.train_frac, cfg.data.seed);
  const KeyValues provenance = section(cfg.to_key_values(), {"synth.", "split."});
  write_dataset(a.out, ds, format, provenance);
  const DatasetSplit parts = by_tag(ds);
  out << "gen: " << ds.size() << " images (" << cfg.data.num_ids << " ids x " << cfg.data.cameras << " cameras x "
      << cfg.data.images_per_id_per_cam << ") " << ds.height << "x" << ds.width << " -> " << a.out << "\n"
      << "     train " << parts.train.size() << " / probe " << parts.probe.size() << " / gallery "
      << parts.gallery.size() << " images\n";
  return kExitOk;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  Settings settings;
  std::string data;
  std::string out;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg = a.settings.resolve(cli_base());
  const IdentityDataset ds = read_dataset(a.data);
  // The dataset's own generator settings are what was actually trained on.
  for (const auto& [k, v] : read_dataset_config(a.data))
    if (k.starts_with("synth.") || k.starts_with("split.")) cfg.apply(k, v);
  const IdentityDataset train_set = by_tag(ds).train;
  if (train_set.size() == 0) throw ConfigError("train: dataset " + a.data + " has no images tagged train");
  cfg.model.input_height = ds.height;
  cfg.model.input_width = ds.width;
  cfg.model.num_identities = ClassMap(train_set).size();
  cfg.model.validate();
  cfg.train.validate();

  const JlmlModel model = JlmlModel::build(cfg.model, cfg.train.seed);
  const std::size_t every = std::max<std::size_t>(1, cfg.train.iterations / 10);
  const auto history = train(model, train_set, cfg.train, [&](const IterationRecord& r, const Batch&) {
    if (r.iter % every == 0 || r.iter + 1 == cfg.train.iterations) {
      err << "iter " << r.iter << " lr " << format_double(r.lr) << " ce_global " << fixed(r.loss.ce_global)
          << " ce_local " << fixed(r.loss.ce_local) << "\n";
    }
  });

  const KeyValues provenance = cfg.to_key_values();
  const fs::path dir(a.out);
  save_checkpoint(model, dir / "checkpoint.jlmc");
  binary::write_file(sidecar(dir / "checkpoint.jlmc", ".config"), to_text(provenance));
  binary::write_file(dir / "train_log.csv", training_log_csv(history, provenance));
  out << "train: " << history.size() << " iterations on " << train_set.size() << " images of "
      << cfg.model.num_identities << " identities (" << loss_mode_name(cfg.model.loss_mode) << ", sfl "
      << (cfg.model.sfl_enabled ? "on" : "off") << ")\n";
  if (!history.empty()) {
    const auto& first = history.front().loss;
    const auto& last = history.back().loss;
    out << "       ce_global " << fixed(first.ce_global) << " -> " << fixed(last.ce_global) << ", ce_local "
        << fixed(first.ce_local) << " -> " << fixed(last.ce_local) << "\n";
  }
  out << "       wrote " << (dir / "checkpoint.jlmc").string() << " and " << (dir / "train_log.csv").string() << "\n";
  return kExitOk;
}

// ---- extract ----------------------------------------------------------------

struct ExtractArgs {
  std::string ckpt;
  std::string data;
  std::string split = "all";
  std::string out;
  std::size_t batch_size = 32;
};

int cmd_extract(const ExtractArgs& a, std::ostream& out) {
  const JlmlModel model = load_checkpoint(a.ckpt);
  const IdentityDataset ds = read_dataset(a.data);
  std::vector<std::size_t> chosen;
  const bool all = a.split == "all";
  const Split wanted = all ? Split::none : parse_split(a.split);
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (all || ds.splits[i] == wanted) chosen.push_back(i);
  if (chosen.empty()) throw ConfigError("extract: no images in split '" + a.split + "'");
  const IdentityDataset part = ds.subset(chosen);
  ExtractResult r = extract(model, part, a.batch_size);

  const std::string ext = fs::exists(fs::path(a.data) / "images" / "000000.ppm") ? ".ppm" : ".jlmi";
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu", chosen[k]);
    r.features.records[k].source = name + ext;
  }
  KeyValues provenance = read_sidecar(sidecar(a.ckpt, ".config"));
  if (provenance.empty()) provenance = prefixed(model.config().to_key_values(), "model.");
  for (const auto& p : read_dataset_config(a.data)) {
    auto it = std::find_if(provenance.begin(), provenance.end(), [&](const auto& q) { return q.first == p.first; });
    if (it != provenance.end()) it->second = p.second;
    else provenance.push_back(p);
  }
  provenance.emplace_back("extract.split", a.split);
  write_features(a.out, r.features, provenance);
  out << "extract: " << part.size() << " images (" << a.split << ") -> " << r.features.dim() << "-D features ("
      << r.features.global_dim << " global + " << r.features.local_dim << " local), "
      << fixed(r.images_per_second, 1) << " images/s\n";
  return kExitOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  Settings settings;
  std::string probe;
  std::string gallery;
  std::string report;
  std::string branch = "joint";
  bool no_filter = false;
};

Branch parse_branch(std::string_view text) {
  if (text == "joint") return Branch::joint;
  if (text == "global") return Branch::global;
  if (text == "local") return Branch::local;
  throw ConfigError("unknown branch '" + std::string(text) + "' (expected joint, global or local)");
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  ExperimentConfig cfg = a.settings.resolve(cli_base());
  if (a.no_filter) cfg.eval.cross_camera_filter = false;
  const Branch branch = parse_branch(a.branch);
  const FeatureSet probe = read_features(a.probe), gallery = read_features(a.gallery);
  const EvalReport r = evaluate(select_branch(probe, branch), select_branch(gallery, branch), cfg.eval);

  KeyValues provenance = section(cfg.to_key_values(), {"eval."});
  provenance.emplace_back("eval.branch", branch_name(branch));
  append(provenance, prefixed(read_sidecar(sidecar(a.probe, ".config")), "probe."));
  append(provenance, prefixed(read_sidecar(sidecar(a.gallery, ".config")), "gallery."));
  if (!a.report.empty()) binary::write_file(a.report, report_json(r, provenance));

  out << "eval: " << r.protocol << " " << r.metric << " " << branch_name(branch) << ", " << r.num_probes
      << " probes (" << r.excluded_probes << " without a true match)\n";
  for (std::size_t k : {1, 5, 10, 20}) {
    if (k <= r.cmc.size()) out << "  rank-" << k << " " << fixed(r.cmc[k - 1]) << "\n";
  }
  out << "  mAP    " << fixed(r.map) << "\n";
  return kExitOk;
}

// ---- inspect ----------------------------------------------------------------

struct InspectArgs {
  Settings settings;
  bool layers = true;
};

std::string stride_text(const LayerRow& r) {
  if (r.stride_h == r.stride_w) return std::to_string(r.stride_h);
  return std::to_string(r.stride_h) + "x" + std::to_string(r.stride_w);
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  ExperimentConfig base = cli_base();
  base.model = ModelConfig::paper();
  const ExperimentConfig cfg = a.settings.resolve(base);
  cfg.model.validate();
  const Accounting acc = account(cfg.model);
  if (a.layers) {
    out << std::left << std::setw(40) << "layer" << std::setw(6) << "kind" << std::setw(8) << "kernel"
        << std::setw(8) << "stride" << std::setw(12) << "channels" << std::setw(10) << "output" << std::setw(7)
        << "copies" << std::right << std::setw(11) << "params" << std::setw(15) << "MACs" << "\n";
    for (const auto& r : acc.layers) {
      const std::string kernel = r.kernel ? std::to_string(r.kernel) + "x" + std::to_string(r.kernel) : "-";
      out << std::left << std::setw(40) << (r.name + (r.head ? " (head)" : "")) << std::setw(6) << r.kind
          << std::setw(8) << kernel << std::setw(8) << stride_text(r) << std::setw(12)
          << (std::to_string(r.in_channels) + "->" + std::to_string(r.out_channels)) << std::setw(10)
          << (std::to_string(r.out_h) + "x" + std::to_string(r.out_w)) << std::setw(7) << r.copies << std::right
          << std::setw(11) << r.params << std::setw(15) << r.macs << "\n";
    }
    out << "\n";
  }
  out << std::left << std::setw(10) << "stage" << std::setw(10) << "global" << "local (per stripe)\n";
  for (const auto& s : acc.stages) {
    out << std::left << std::setw(10) << s.stage << std::setw(10)
        << (std::to_string(s.global_h) + "x" + std::to_string(s.global_w)) << s.local_h << "x" << s.local_w << "\n";
  }
  out << std::right << "\n"
      << "depth             " << acc.depth << "\n"
      << "streams           " << acc.streams << "\n"
      << "params            " << acc.params_without_heads() << " (" << fixed(acc.params_without_heads() / 1e6, 2)
      << "M, heads excluded)\n"
      << "head params       " << acc.params_heads << " (" << cfg.model.num_identities << " identities, "
      << loss_mode_name(cfg.model.loss_mode) << ")\n"
      << "FLOPs             " << acc.flops << " (" << fixed(acc.flops / 1e9, 3) << "e9, heads excluded)\n"
      << "joint feature     " << cfg.model.global_feature_dim + cfg.model.local_feature_dim << "-D\n";
  return kExitOk;
}

// ---- ablate -----------------------------------------------------------------

struct AblateArgs {
  Settings settings;
  std::string suite;
  std::size_t seeds = 3;
  std::string out;
  bool strict = false;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = a.settings.resolve(ExperimentConfig::desk());
  if (a.seeds == 0) throw ConfigError("ablate: --seeds must be positive");
  std::vector<std::string> suites;
  if (a.suite == "all") suites = suite_names();
  else suites = {a.suite};
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < a.seeds; ++s) seeds.push_back(s);

  nlohmann::ordered_json all = nlohmann::ordered_json::array();
  bool every_claim_holds = true;
  for (const auto& name : suites) {
    const SuiteReport rep = run_suite(name, cfg, seeds, [&](const std::string& line) { err << line << "\n"; });
    all.push_back(nlohmann::ordered_json::parse(suite_json(rep)));
    out << "suite " << name << "\n";
    for (const auto& r : rep.rows) {
      out << "  " << std::left << std::setw(12) << r.name << std::right << " mean rank-1 " << fixed(r.mean_rank1())
          << "  mean mAP " << fixed(r.mean_map()) << "\n";
    }
    for (const auto& c : rep.comparisons) {
      every_claim_holds = every_claim_holds && c.holds();
      out << "  " << c.better << " >= " << c.worse << ": " << c.wins() << "/" << c.margins.size() << " seeds -> "
          << (c.holds() ? "holds" : "does not hold") << "\n";
    }
  }
  if (!a.out.empty()) {
    const std::string text = (suites.size() == 1 ? all[0] : all).dump(2) + "\n";
    binary::write_file(a.out, text);
  }
  return a.strict && !every_claim_holds ? kExitFailure : kExitOk;
}

// ---- gradcheck --------------------------------------------------------------

struct GradArgs {
  std::size_t seeds = 10;
  std::string op;
  std::string fault;
};

int cmd_gradcheck(const GradArgs& a, std::ostream& out) {
  if (!a.fault.empty()) fault::inject_sign_flip(a.fault);
  std::vector<GradCaseReport> reports;
  try {
    reports = run_grad_suite(a.seeds, a.op, [&](const GradCaseReport& r) {
      out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(28) << r.op << std::right << " max rel err "
          << std::scientific << std::setprecision(2) << r.max_rel_error << " (tol " << r.tolerance << ")"
          << std::defaultfloat;
      if (!r.error.empty()) out << " error: " << r.error;
      else if (!r.passed) out << " at " << r.worst_location;
      out << "\n";
    });
  } catch (...) {
    fault::clear();
    throw;
  }
  fault::clear();
  const auto failed = std::count_if(reports.begin(), reports.end(), [](const auto& r) { return !r.passed; });
  out << reports.size() - static_cast<std::size_t>(failed) << "/" << reports.size() << " operations pass over "
      << a.seeds << " seeds" << (a.fault.empty() ? "" : " (sign flip injected into " + a.fault + ")") << "\n";
  return failed ? kExitFailure : kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint global/local person re-identification toolkit", "jlml"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic multi-camera identity dataset");
  add_settings(g, gen.settings);
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--format", gen.format, "image files: jlmi (raw f32) or ppm (8-bit)");
  add_key_flag<std::size_t>(g, gen.settings, "--ids", "synth.num_ids", "identities");
  add_key_flag<std::size_t>(g, gen.settings, "--cams", "synth.cameras", "cameras");
  add_key_flag<std::size_t>(g, gen.settings, "--per-cam", "synth.images_per_id_per_cam", "images per identity and camera");
  g->add_option_function<std::size_t>(
      "--size",
      [&gen](std::size_t n) {
        gen.settings.flags.emplace_back("synth.height", std::to_string(n));
        gen.settings.flags.emplace_back("synth.width", std::to_string(n));
      },
      "image height and width");
  add_key_flag<std::uint64_t>(g, gen.settings, "--seed", "synth.seed", "generator and split seed");
  add_key_flag<double>(g, gen.settings, "--occlusion", "synth.occlusion_prob", "probability of an occluder");
  add_key_flag<std::size_t>(g, gen.settings, "--misalign", "synth.misalign_max_shift", "max vertical shift (px)");
  add_key_flag<double>(g, gen.settings, "--train-frac", "split.train_frac", "fraction of identities for training");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model on the train split of a dataset");
  add_settings(t, tr.settings);
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--out", tr.out, "output directory for checkpoint and log")->required();
  add_key_flag<std::string>(t, tr.settings, "--preset", "model.preset", "paper or toy");
  add_key_flag<std::size_t>(t, tr.settings, "--iterations", "train.iterations", "SGD iterations");
  add_key_flag<std::uint64_t>(t, tr.settings, "--seed", "train.seed", "initialisation and sampling seed");
  add_key_flag<double>(t, tr.settings, "--lr", "train.base_lr", "base learning rate");
  add_key_flag<std::size_t>(t, tr.settings, "--batch-size", "train.batch_size", "images per batch");
  add_key_flag<std::string>(t, tr.settings, "--loss-mode", "model.loss_mode", "multiloss or uniloss");
  add_key_flag<std::size_t>(t, tr.settings, "--m", "model.stripes", "stripes of the local branch");
  t->add_flag_callback(
      "--no-sfl", [&tr] { tr.settings.flags.emplace_back("model.sfl_enabled", "false"); },
      "disable the sparsity penalties (both lambdas become 0)");

  ExtractArgs ex;
  auto* e = app.add_subcommand("extract", "extract normalised joint features");
  e->add_option("--ckpt", ex.ckpt, "checkpoint file")->required();
  e->add_option("--data", ex.data, "dataset directory")->required();
  e->add_option("--split", ex.split, "probe, gallery, train or all");
  e->add_option("--out", ex.out, "feature file to write")->required();
  e->add_option("--batch-size", ex.batch_size, "images per forward pass");

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "rank a gallery for every probe and report CMC and mAP");
  add_settings(v, ev.settings);
  v->add_option("--probe-features", ev.probe, "probe feature file")->required();
  v->add_option("--gallery-features", ev.gallery, "gallery feature file")->required();
  add_key_flag<std::string>(v, ev.settings, "--protocol", "eval.query", "sq (single query) or mq (multi query)");
  add_key_flag<std::string>(v, ev.settings, "--shot", "eval.shot", "ss (single shot) or ms (multi shot)");
  add_key_flag<std::string>(v, ev.settings, "--metric", "eval.metric", "l1 or l2");
  add_key_flag<std::size_t>(v, ev.settings, "--trials", "eval.trials", "single-shot trials");
  add_key_flag<std::uint64_t>(v, ev.settings, "--seed", "eval.seed", "single-shot sampling seed");
  v->add_option("--branch", ev.branch, "joint, global or local");
  v->add_flag("--no-cross-camera-filter", ev.no_filter, "keep same-camera true matches in the gallery");
  v->add_option("--report", ev.report, "JSON report to write");

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "print the layer plan with parameter and FLOP counts");
  add_settings(i, in.settings);
  add_key_flag<std::string>(i, in.settings, "--preset", "model.preset", "paper (default) or toy");
  add_key_flag<std::size_t>(i, in.settings, "--m", "model.stripes", "stripes of the local branch");
  add_key_flag<std::size_t>(i, in.settings, "--ids", "model.num_identities", "identity classes of the heads");
  add_key_flag<std::size_t>(i, in.settings, "--size", "model.input_size", "input height and width");
  add_key_flag<std::string>(i, in.settings, "--loss-mode", "model.loss_mode", "multiloss or uniloss");
  i->add_flag("!--no-layers", in.layers, "only print stage sizes and totals");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "train and compare model variants on synthetic data");
  add_settings(b, ab.settings);
  b->add_option("--suite", ab.suite, "branches, uniloss, noshare, nosfl, parts, robustness, metric or all")
      ->required();
  b->add_option("--seeds", ab.seeds, "number of seeds (0..k-1)");
  b->add_option("--out", ab.out, "JSON report to write");
  add_key_flag<std::size_t>(b, ab.settings, "--iterations", "train.iterations", "SGD iterations per run");
  b->add_flag("--strict", ab.strict, "exit 1 when a claimed direction does not hold");

  GradArgs gr;
  auto* c = app.add_subcommand("gradcheck", "central-difference check of every differentiable operation");
  c->add_option("--seeds", gr.seeds, "seeds per operation");
  c->add_option("--op", gr.op, "check only this operation");
  c->add_option("--inject-fault", gr.fault, "flip the sign of this op's backward (self-test)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h, out, err);
  } catch (const CLI::ParseError& p) {
    app.exit(p, out, err);
    return kExitUsage;
  }

  try {
    if (*g) return cmd_gen(gen, out);
    if (*t) return cmd_train(tr, out, err);
    if (*e) return cmd_extract(ex, out);
    if (*v) return cmd_eval(ev, out);
    if (*i) return cmd_inspect(in, out);
    if (*b) return cmd_ablate(ab, out, err);
    if (*c) return cmd_gradcheck(gr, out);
  } catch (const std::invalid_argument& x) {
    err << "error: " << x.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& x) {
    err << "error: " << x.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace jlml
