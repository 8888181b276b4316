#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "ctxseg/dataset.hpp"

using namespace ctxseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr) {
  args.insert(args.begin(), "ctxseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// A small but complete slide/model setup shared by the end-to-end cases.
std::vector<std::string> small_flags(const fs::path& root) {
  return {"--grid", "8", "--patch", "16", "--max-structures", "2", "--max-radius", "1.5", "--slides", "5",
          "--hidden", "16", "--heads", "2", "--fusion-layers", "1", "--batch", "4", "--steps", "2",
          "--dataset", (root / "data").string(), "--out", (root / "out").string(),
          "--checkpoint", (root / "model.gcun").string()};
}

std::vector<std::string> with(std::string command, std::vector<std::string> flags,
                              std::vector<std::string> extra = {}) {
  flags.insert(flags.begin(), std::move(command));
  flags.insert(flags.end(), extra.begin(), extra.end());
  return flags;
}

}  // namespace

TEST_CASE("config precedence: defaults < file < flags") {
  const auto defaults = cli::resolve_config("train", {}, {});
  CHECK(defaults.uint("gcn-layers") == 3);

  const auto file = cli::parse_config_text("# comment\ngcn_layers = 1\nlr = 0.01\n");
  const auto from_file = cli::resolve_config("train", file, {});
  CHECK(from_file.uint("gcn-layers") == 1);
  CHECK(from_file.real("lr") == 0.01);

  const auto both = cli::resolve_config("train", file, {{"gcn-layers", "3"}});
  CHECK(both.uint("gcn-layers") == 3);
  CHECK(both.real("lr") == 0.01);
  CHECK(cli::train_config(both).model.gcn_layers == 3);
}

TEST_CASE("unknown keys and malformed values are usage errors") {
  CHECK_THROWS_AS(cli::resolve_config("train", {{"foo", "1"}}, {}), cli::UsageError);
  CHECK_THROWS_AS(cli::resolve_config("train", {}, {{"gcn-layers", "x"}}), cli::UsageError);
  CHECK_THROWS_AS(cli::resolve_config("train", {}, {{"fusion", "sum"}}), cli::UsageError);
  CHECK_THROWS_AS(cli::resolve_config("train", {}, {{"heads", "5"}}), cli::UsageError);
  CHECK_THROWS_AS(cli::parse_config_text("no equals sign\n"), cli::UsageError);

  try {
    cli::resolve_config("train", {{"foo", "1"}}, {});
  } catch (const cli::UsageError& e) {
    CHECK(std::string(e.what()).find("foo") != std::string::npos);
  }

  CHECK(run_cli({"train", "--no-such-flag", "1"}) == 2);
  CHECK(run_cli({"bogus"}) == 2);
}

TEST_CASE("describe output parses back to the same configuration") {
  const auto cfg = cli::resolve_config("ablate-fusion", {}, {{"fusions", "none,dot"}, {"alpha", "0.25"}});
  const auto text = cli::describe(cfg);
  CHECK(text.rfind("# ctxseg ablate-fusion", 0) == 0);
  const auto again = cli::resolve_config("ablate-fusion", cli::parse_config_text(text), {});
  CHECK(again.resolved == cfg.resolved);
  CHECK(again.text_list("fusions") == std::vector<std::string>{"none", "dot"});
}

TEST_CASE("synth is byte-deterministic") {
  TempDir tmp("ctxseg_cli_synth");
  auto flags = small_flags(tmp.path);
  REQUIRE(run_cli(with("synth", flags)) == 0);
  fs::rename(tmp.path / "data", tmp.path / "first");
  REQUIRE(run_cli(with("synth", flags)) == 0);
  for (const auto& e : fs::recursive_directory_iterator(tmp.path / "first")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), tmp.path / "first");
    CHECK(slurp(e.path()) == slurp(tmp.path / "data" / rel));
  }
  CHECK(fs::exists(tmp.path / "out" / "synth.config.txt"));
}

TEST_CASE("train, eval, export-masks and a layer sweep end to end") {
  TempDir tmp("ctxseg_cli_e2e");
  const auto flags = small_flags(tmp.path);
  REQUIRE(run_cli(with("synth", flags)) == 0);
  REQUIRE(run_cli(with("train", flags)) == 0);
  CHECK(slurp(tmp.path / "model.gcun").substr(0, 4) == "GCUN");
  CHECK(fs::exists(tmp.path / "out" / "train_log.csv"));

  std::string printed;
  REQUIRE(run_cli(with("eval", flags), &printed) == 0);
  CHECK(printed.find("macro,") != std::string::npos);
  CHECK(fs::exists(tmp.path / "out" / "metrics.json"));

  REQUIRE(run_cli(with("export-masks", flags)) == 0);
  const auto ds = load_dataset(tmp.path / "data");
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(tmp.path / "out" / "masks")) pngs += e.path().extension() == ".png";
  CHECK(pngs == 3 * ds.manifest.test.size());

  REQUIRE(run_cli(with("ablate-layers", flags, {"--layers", "0,1"})) == 0);
  std::istringstream summary(slurp(tmp.path / "out" / "ablate_layers.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(summary, line))
    if (!line.empty()) lines.push_back(line);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0].rfind("gcn_layers,mf1,", 0) == 0);
  CHECK(lines[1].rfind("0,", 0) == 0);
  CHECK(lines[2].rfind("1,", 0) == 0);

  // A missing checkpoint is a runtime failure (status 1), not a usage error.
  auto missing = flags;
  missing.back() = (tmp.path / "missing.gcun").string();
  CHECK(run_cli(with("eval", missing)) == 1);
}
