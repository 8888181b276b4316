#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ctxseg/dataset.hpp"
#include "ctxseg/error.hpp"
#include "ctxseg/evalmetrics.hpp"
#include "ctxseg/graph.hpp"
#include "ctxseg/verify.hpp"

namespace ctxseg::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

std::string normalize_key(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::vector<KeyInfo> build_table() {
  const SlideParams sp;
  const TrainConfig tc;
  const ModelConfig& mc = tc.model;
  using V = ValueType;
  return {
      {"seed", V::UInt, "0", "master seed for synthesis and training"},
      {"out", V::Text, "out", "directory for reports, logs and sweep runs"},
      {"dataset", V::Text, "data", "dataset directory (written by synth, read elsewhere)"},
      {"checkpoint", V::Text, "model.gcun", "checkpoint path (written by train, read by eval/export-masks)"},
      {"split", V::Choice, "test", "split evaluated by eval and export-masks", {"train", "val", "test"}},
      {"slides", V::UInt, "200", "number of slides synthesized"},
      {"grid", V::UInt, std::to_string(sp.grid), "slide side in tiles"},
      {"min-structures", V::UInt, std::to_string(sp.min_structures), "fewest structures per slide"},
      {"max-structures", V::UInt, std::to_string(sp.max_structures), "most structures per slide"},
      {"min-radius", V::Real, fmt_real(sp.min_radius), "smallest structure radius in tiles"},
      {"max-radius", V::Real, fmt_real(sp.max_radius), "largest structure radius in tiles"},
      {"radius-step", V::Real, fmt_real(sp.radius_step), "radius lattice step in tiles, 0 for continuous radii"},
      {"gc-probability", V::Real, fmt_real(sp.gc_probability), "probability that a structure is SEL"},
      {"early-probability", V::Real, fmt_real(sp.early_probability), "probability of E among non-SEL structures"},
      {"noise", V::Real, fmt_real(sp.noise), "half-width of uniform pixel noise"},
      {"foreground-fraction", V::Real, fmt_real(kDefaultForegroundFraction),
       "fraction of dark pixels that makes a tile foreground"},
      {"patch", V::UInt, std::to_string(mc.patch), "tile side in pixels"},
      {"classes", V::UInt, std::to_string(mc.classes), "number of classes"},
      {"token-side", V::UInt, std::to_string(mc.token_side), "token side in pixels"},
      {"hidden", V::UInt, std::to_string(mc.hidden), "embedding width"},
      {"gcn-layers", V::UInt, std::to_string(mc.gcn_layers), "graph convolution layers"},
      {"aggregation", V::Choice, to_string(mc.aggregation), "neighbour aggregation", {"sym", "softmax-temp"}},
      {"fusion", V::Choice, to_string(mc.fusion), "context fusion strategy", {"dcfusion", "cat", "dot", "none"}},
      {"fusion-layers", V::UInt, std::to_string(mc.fusion_layers), "attention blocks in dcfusion"},
      {"heads", V::UInt, std::to_string(mc.heads), "attention heads"},
      {"feed-forward", V::Bool, fmt_bool(mc.feed_forward), "add an MLP sub-layer to each attention block"},
      {"stem-kernel", V::UInt, std::to_string(mc.stem_kernel), "encoder kernel, 3 (padded) or 2 (patchify)"},
      {"batch", V::UInt, std::to_string(tc.batch), "target tiles per sampled slide"},
      {"slides-per-step", V::UInt, std::to_string(tc.slides_per_step), "slides averaged per update"},
      {"lr", V::Real, fmt_real(tc.lr), "Adam learning rate"},
      {"steps", V::UInt, std::to_string(tc.steps), "optimizer steps"},
      {"precision", V::Choice, to_string(tc.precision), "training arithmetic", {"f32", "f64"}},
      {"granularity", V::UInt, std::to_string(tc.granularity), "pixel block-averaging factor"},
      {"freeze-featurizer", V::Bool, fmt_bool(tc.freeze_featurizer), "keep the node featurizer at its init"},
      {"node-loss-weight", V::Real, fmt_real(tc.node_loss_weight), "weight of the tile-level loss on context rows"},
      {"layers", V::UIntList, "0,1,3", "GCN depths swept by ablate-layers"},
      {"fusions", V::ChoiceList, "none,cat,dot,dcfusion", "strategies swept by ablate-fusion",
       {"dcfusion", "cat", "dot", "none"}},
      {"granularities", V::UIntList, "1,2,4", "factors swept by ablate-granularity"},
      {"slide", V::UInt, "0", "slide id inspected by graph-stats"},
      {"alpha", V::Real, "0.5", "overlay opacity in export-masks"},
  };
}

const KeyInfo* find_key(const std::string& key) {
  for (const auto& k : key_table())
    if (k.key == key) return &k;
  return nullptr;
}

bool parse_uint(const std::string& s, std::uint64_t& v) {
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

bool parse_real(const std::string& s, double& v) {
  if (s.empty()) return false;
  std::size_t used = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == s.size() && std::isfinite(v);
}

bool parse_bool(const std::string& s, bool& v) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return v = true, true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return v = false, true;
  return false;
}

bool is_choice(const KeyInfo& k, const std::string& s) {
  return std::find(k.choices.begin(), k.choices.end(), s) != k.choices.end();
}

// Returns the canonical spelling of `value` or throws UsageError.
std::string check_value(const KeyInfo& k, const std::string& value, const std::string& origin) {
  const auto bad = [&](const std::string& expected) {
    return UsageError(origin + ": " + k.key + " = '" + value + "' is not " + expected);
  };
  switch (k.type) {
    case ValueType::UInt: {
      std::uint64_t v;
      if (!parse_uint(value, v)) throw bad("a non-negative integer");
      return std::to_string(v);
    }
    case ValueType::Real: {
      double v;
      if (!parse_real(value, v)) throw bad("a finite number");
      return fmt_real(v);
    }
    case ValueType::Bool: {
      bool v;
      if (!parse_bool(value, v)) throw bad("a boolean (true/false)");
      return fmt_bool(v);
    }
    case ValueType::Text:
      return value;
    case ValueType::Choice:
      if (!is_choice(k, value)) throw bad("one of the allowed values");
      return value;
    case ValueType::UIntList: {
      std::string canon;
      for (const auto& item : split_commas(value)) {
        std::uint64_t v;
        if (!parse_uint(item, v)) throw bad("a comma-separated list of integers");
        canon += (canon.empty() ? "" : ",") + std::to_string(v);
      }
      if (canon.empty()) throw bad("a non-empty list");
      return canon;
    }
    case ValueType::ChoiceList: {
      std::string canon;
      for (const auto& item : split_commas(value)) {
        if (!is_choice(k, item)) throw bad("a comma-separated list of allowed values");
        canon += (canon.empty() ? "" : ",") + item;
      }
      if (canon.empty()) throw bad("a non-empty list");
      return canon;
    }
  }
  return value;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw FormatError("cannot write " + path.string());
}

void print_metrics_line(std::ostream& out, const std::string& label, const MetricsReport& r) {
  out << label << std::fixed << std::setprecision(4) << " mF1=" << r.macro.f1 << " mIoU=" << r.macro.iou
      << " mP=" << r.macro.precision << " mR=" << r.macro.recall << std::defaultfloat << "\n";
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const RunConfig& c, std::ostream& out) {
  const Dataset ds = synthesize_dataset(slide_params(c), c.uint("slides"), c.seed, c.real("foreground-fraction"));
  save_dataset(ds, c.text("dataset"));
  const auto& m = ds.manifest;
  out << "wrote " << ds.slides.size() << " slides to " << c.text("dataset") << " (train " << m.train.size()
      << ", val " << m.val.size() << ", test " << m.test.size() << ")\n";
  return 0;
}

TrainResult train_logged(const TrainConfig& tc, const Dataset& ds, std::ostream& out) {
  const std::size_t every = std::max<std::size_t>(1, tc.steps / 20);
  return train(tc, ds, [&](const LogRow& row) {
    if (row.step % every == 0 || row.step == tc.steps) {
      out << "step " << row.step << " loss " << row.loss << " (" << std::fixed << std::setprecision(1)
          << row.elapsed_seconds << " s)" << std::defaultfloat << "\n"
          << std::flush;
    }
  });
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  const Dataset ds = load_dataset(c.text("dataset"));
  const TrainConfig tc = train_config(c);
  const TrainResult r = train_logged(tc, ds, out);
  save_checkpoint(r.checkpoint, c.text("checkpoint"));
  const fs::path log = fs::path(c.text("out")) / "train_log.csv";
  write_train_log(log, r.log);
  out << "checkpoint " << c.text("checkpoint") << ", log " << log.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& c, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(c.text("checkpoint"));
  const Dataset ds = load_dataset(c.text("dataset"));
  const Evaluation ev = evaluate(ck, ds, parse_split(c.text("split")));
  const fs::path dir = c.text("out");
  fs::create_directories(dir);
  write_metrics(ev.report, dir / "metrics.csv", dir / "metrics.json");
  out << metrics_csv(ev.report);
  return 0;
}

struct SweepRun {
  std::string key;
  TrainConfig config;
};

std::string metrics_header(const std::string& key, const std::vector<std::string>& names) {
  std::string h = key + ",mf1,miou,mprecision,mrecall";
  for (const auto& n : names) h += "," + n + "_f1";
  return h + "\n";
}

std::string metrics_row(const std::string& key, const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << key << "," << r.macro.f1 << "," << r.macro.iou << ","
     << r.macro.precision << "," << r.macro.recall;
  for (const auto& m : r.classes) os << "," << m.f1;
  os << "\n";
  return os.str();
}

// Each run trains from scratch into its own directory; nothing is shared
// between runs except the read-only dataset.
int run_sweep(const RunConfig& c, std::ostream& out, const std::string& name, const std::string& column,
              const std::vector<SweepRun>& runs) {
  const Dataset ds = load_dataset(c.text("dataset"));
  const Split split = parse_split(c.text("split"));
  const fs::path root = c.text("out");
  std::string table;
  for (const auto& run : runs) {
    const fs::path dir = root / (name + "_" + run.key);
    fs::create_directories(dir);
    out << "== " << column << " = " << run.key << "\n";
    const TrainResult r = train_logged(run.config, ds, out);
    save_checkpoint(r.checkpoint, dir / "model.gcun");
    write_train_log(dir / "train_log.csv", r.log);
    const Evaluation ev = evaluate(r.checkpoint, ds, split);
    write_metrics(ev.report, dir / "metrics.csv", dir / "metrics.json");
    print_metrics_line(out, column + "=" + run.key, ev.report);
    if (table.empty()) table = metrics_header(column, ev.report.class_names);
    table += metrics_row(run.key, ev.report);
  }
  const fs::path summary = root / (name + ".csv");
  write_text(summary, table);
  out << table << "summary " << summary.string() << "\n";
  return 0;
}

int cmd_ablate_layers(const RunConfig& c, std::ostream& out) {
  std::vector<SweepRun> runs;
  for (auto t : c.uint_list("layers")) {
    TrainConfig tc = train_config(c);
    tc.model.gcn_layers = t;
    tc.validate();
    runs.push_back({std::to_string(t), tc});
  }
  return run_sweep(c, out, "ablate_layers", "gcn_layers", runs);
}

int cmd_ablate_fusion(const RunConfig& c, std::ostream& out) {
  std::vector<SweepRun> runs;
  for (const auto& f : c.text_list("fusions")) {
    TrainConfig tc = train_config(c);
    tc.model.fusion = parse_fusion(f);
    tc.validate();
    runs.push_back({f, tc});
  }
  return run_sweep(c, out, "ablate_fusion", "fusion", runs);
}

int cmd_ablate_granularity(const RunConfig& c, std::ostream& out) {
  std::vector<SweepRun> runs;
  for (auto g : c.uint_list("granularities")) {
    TrainConfig tc = train_config(c);
    tc.granularity = g;
    tc.validate();
    runs.push_back({std::to_string(g), tc});
  }
  return run_sweep(c, out, "ablate_granularity", "granularity", runs);
}

int cmd_gradcheck(const RunConfig& c, std::ostream& out) {
  const auto cases = gradcheck_suite(c.seed);
  std::ostringstream csv;
  csv << "case,max_rel_error,passed\n";
  bool ok = true;
  for (const auto& gc : cases) {
    const double e = gc.report.max_rel_error();
    const bool pass = gc.report.passed(kGradCheckTolerance);
    ok = ok && pass;
    csv << gc.name << "," << std::scientific << std::setprecision(3) << e << "," << (pass ? "yes" : "no") << "\n";
  }
  write_text(fs::path(c.text("out")) / "gradcheck.csv", csv.str());
  out << csv.str() << (ok ? "all cases below " : "FAILED: some case at or above ") << kGradCheckTolerance << "\n";
  return ok ? 0 : 1;
}

int cmd_graph_stats(const RunConfig& c, std::ostream& out) {
  const Dataset ds = load_dataset(c.text("dataset"));
  const auto id = static_cast<std::uint64_t>(c.uint("slide"));
  if (id >= ds.slides.size()) {
    throw IndexError("slide " + std::to_string(id) + " not in dataset of " + std::to_string(ds.slides.size()));
  }
  const TileGrid grid = tile_slide(ds.slide(id), c.uint("patch"), ds.manifest.foreground_fraction);
  const std::string json = to_json(graph_stats(build_context_graph(grid)));
  write_text(fs::path(c.text("out")) / "graph_stats.json", json + "\n");
  out << json << "\n";
  return 0;
}

int cmd_export_masks(const RunConfig& c, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(c.text("checkpoint"));
  const Dataset ds = load_dataset(c.text("dataset"));
  const Evaluation ev = evaluate(ck, ds, parse_split(c.text("split")));
  const fs::path dir = fs::path(c.text("out")) / "masks";
  fs::create_directories(dir);
  const double alpha = c.real("alpha");
  for (const auto& p : ev.predictions) {
    const auto& slide = ds.slide(p.slide_id);
    const std::string stem = slide_dir_name(p.slide_id);
    write_png(dir / (stem + "_pred.png"), p.mask);
    write_png(dir / (stem + "_overlay.png"), overlay(slide.image, p.mask, alpha));
    write_png(dir / (stem + "_gt_overlay.png"), overlay(slide.image, slide.labels, alpha));
  }
  out << "wrote " << 3 * ev.predictions.size() << " files to " << dir.string() << "\n";
  return 0;
}

std::string type_label(ValueType t) {
  switch (t) {
    case ValueType::UInt: return "UINT";
    case ValueType::Real: return "REAL";
    case ValueType::Bool: return "BOOL";
    case ValueType::UIntList: return "UINT,...";
    case ValueType::ChoiceList: return "NAME,...";
    default: return "TEXT";
  }
}

bool trains(const std::string& command) {
  return command == "train" || command.rfind("ablate-", 0) == 0;
}

}  // namespace

const std::vector<KeyInfo>& key_table() {
  static const std::vector<KeyInfo> table = build_table();
  return table;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"synth",         "train",    "eval",        "ablate-layers",
                                                 "ablate-fusion", "ablate-granularity", "gradcheck",
                                                 "graph-stats",   "export-masks"};
  return names;
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> values;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = normalize_key(trim(line.substr(0, eq)));
    if (key.empty()) throw UsageError("config line " + std::to_string(lineno) + ": empty key");
    values[key] = trim(line.substr(eq + 1));
  }
  return values;
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot read config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

RunConfig resolve_config(const std::string& command, const std::map<std::string, std::string>& file_values,
                         const std::map<std::string, std::string>& flag_values) {
  const auto& names = command_names();
  if (std::find(names.begin(), names.end(), command) == names.end()) {
    throw UsageError("unknown command '" + command + "'");
  }
  RunConfig c;
  c.command = command;
  c.file_values = file_values;
  c.flag_values = flag_values;
  for (const auto& k : key_table()) c.resolved[k.key] = k.default_value;
  const auto apply = [&](const std::map<std::string, std::string>& values, const std::string& origin) {
    for (const auto& [raw, value] : values) {
      const std::string key = normalize_key(raw);
      const KeyInfo* k = find_key(key);
      if (!k) throw UsageError(origin + ": unknown key '" + raw + "'");
      c.resolved[key] = check_value(*k, value, origin);
    }
  };
  apply(file_values, "config file");
  apply(flag_values, "command line");
  c.seed = c.uint("seed");
  if (trains(command)) {
    try {
      train_config(c).validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  return c;
}

std::size_t RunConfig::uint(const std::string& key) const {
  std::uint64_t v = 0;
  parse_uint(resolved.at(key), v);
  return static_cast<std::size_t>(v);
}

double RunConfig::real(const std::string& key) const {
  double v = 0.0;
  parse_real(resolved.at(key), v);
  return v;
}

bool RunConfig::flag(const std::string& key) const { return resolved.at(key) == "true"; }

const std::string& RunConfig::text(const std::string& key) const { return resolved.at(key); }

std::vector<std::size_t> RunConfig::uint_list(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const auto& item : split_commas(resolved.at(key))) {
    std::uint64_t v = 0;
    parse_uint(item, v);
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::vector<std::string> RunConfig::text_list(const std::string& key) const { return split_commas(resolved.at(key)); }

std::string describe(const RunConfig& c) {
  std::ostringstream os;
  os << "# ctxseg " << c.command << "\n";
  for (const auto& k : key_table()) os << k.key << " = " << c.resolved.at(k.key) << "\n";
  return os.str();
}

SlideParams slide_params(const RunConfig& c) {
  SlideParams p;
  p.grid = c.uint("grid");
  p.patch = c.uint("patch");
  p.min_structures = c.uint("min-structures");
  p.max_structures = c.uint("max-structures");
  p.min_radius = c.real("min-radius");
  p.max_radius = c.real("max-radius");
  p.radius_step = c.real("radius-step");
  p.gc_probability = c.real("gc-probability");
  p.early_probability = c.real("early-probability");
  p.noise = c.real("noise");
  p.classes = c.uint("classes");
  return p;
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  ModelConfig& m = t.model;
  m.classes = c.uint("classes");
  m.patch = c.uint("patch");
  m.token_side = c.uint("token-side");
  m.hidden = c.uint("hidden");
  m.gcn_layers = c.uint("gcn-layers");
  m.aggregation = parse_aggregation(c.text("aggregation"));
  m.fusion = parse_fusion(c.text("fusion"));
  m.fusion_layers = c.uint("fusion-layers");
  m.heads = c.uint("heads");
  m.feed_forward = c.flag("feed-forward");
  m.stem_kernel = c.uint("stem-kernel");
  t.seed = c.seed;
  t.batch = c.uint("batch");
  t.slides_per_step = c.uint("slides-per-step");
  t.lr = c.real("lr");
  t.steps = c.uint("steps");
  t.precision = parse_precision(c.text("precision"));
  t.granularity = c.uint("granularity");
  t.freeze_featurizer = c.flag("freeze-featurizer");
  t.node_loss_weight = c.real("node-loss-weight");
  return t;
}

int dispatch(const RunConfig& c, std::ostream& out) {
  const std::string& cmd = c.command;
  if (cmd == "synth") return cmd_synth(c, out);
  if (cmd == "train") return cmd_train(c, out);
  if (cmd == "eval") return cmd_eval(c, out);
  if (cmd == "ablate-layers") return cmd_ablate_layers(c, out);
  if (cmd == "ablate-fusion") return cmd_ablate_fusion(c, out);
  if (cmd == "ablate-granularity") return cmd_ablate_granularity(c, out);
  if (cmd == "gradcheck") return cmd_gradcheck(c, out);
  if (cmd == "graph-stats") return cmd_graph_stats(c, out);
  if (cmd == "export-masks") return cmd_export_masks(c, out);
  throw UsageError("unknown command '" + cmd + "'");
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"ctxseg: context-aware patch segmentation of synthetic slides"};
  app.require_subcommand(1, 1);
  app.fallthrough(false);

  struct Sub {
    CLI::App* app;
    std::string config_path;
    std::map<std::string, std::string> values;
  };
  static const std::map<std::string, std::string> blurbs = {
      {"synth", "generate a synthetic slide dataset"},
      {"train", "train a model and write a checkpoint and loss log"},
      {"eval", "evaluate a checkpoint on a split and write metrics"},
      {"ablate-layers", "train and evaluate one model per GCN depth"},
      {"ablate-fusion", "train and evaluate one model per fusion strategy"},
      {"ablate-granularity", "train and evaluate one model per downsampling factor"},
      {"gradcheck", "finite-difference check of every trainable operation"},
      {"graph-stats", "context graph statistics of one slide as JSON"},
      {"export-masks", "write predicted masks and overlays for a split"},
  };
  std::vector<Sub> subs;
  subs.reserve(command_names().size());
  for (const auto& name : command_names()) {
    subs.push_back({app.add_subcommand(name, blurbs.at(name)), {}, {}});
    Sub& s = subs.back();
    s.app->add_option("--config", s.config_path, "key = value config file (flags override it)");
    for (const auto& k : key_table()) {
      std::string help = k.help;
      if (!k.choices.empty()) {
        help += " {";
        for (std::size_t i = 0; i < k.choices.size(); ++i) help += (i ? "," : "") + k.choices[i];
        help += "}";
      }
      help += " [default: " + k.default_value + "]";
      s.app->add_option_function<std::string>(
          "--" + k.key, [&s, key = k.key](const std::string& v) { s.values[key] = v; }, help)
          ->type_name(type_label(k.type));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  const Sub* chosen = nullptr;
  for (const auto& s : subs)
    if (s.app->parsed()) chosen = &s;

  RunConfig config;
  try {
    const auto file_values =
        chosen->config_path.empty() ? std::map<std::string, std::string>{} : read_config_file(chosen->config_path);
    config = resolve_config(chosen->app->get_name(), file_values, chosen->values);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }

  const std::string text = describe(config);
  out << text << std::flush;
  try {
    const fs::path log = fs::path(config.text("out")) / (config.command + ".config.txt");
    write_text(log, text);
    return dispatch(config, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ctxseg::cli
