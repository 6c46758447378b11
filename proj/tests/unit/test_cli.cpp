#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"

namespace {

struct Run {
  int status = -1;
  std::string out, err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Run run_cli(const std::string& args, const std::filesystem::path& cwd) {
  const auto out = cwd / "stdout.txt", err = cwd / "stderr.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && CTGUARD_DATA_DIR='" + cwd.string() + "' '" CTGUARD_CLI_PATH "' " +
                          args + " > '" + out.string() + "' 2> '" + err.string() + "'";
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  std::filesystem::remove(out);
  std::filesystem::remove(err);
  return r;
}

std::size_t entries(const std::filesystem::path& dir) {
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++n;
  return n;
}

}  // namespace

TEST_CASE("unknown verbs and keys are usage errors with no side effects") {
  const auto dir = fixtures::scratch_dir("cli_usage");
  const Run r = run_cli("frobnicate", dir);
  CHECK(r.status == 2);
  CHECK(r.err.rfind("ctguard: error[config]:", 0) == 0);
  CHECK(entries(dir) == 0);

  const Run k = run_cli("train --set alpah=1", dir);
  CHECK(k.status == 2);
  CHECK(k.err.find("alpah") != std::string::npos);
  CHECK(entries(dir) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("protect with a missing checkpoint is a runtime failure") {
  const auto dir = fixtures::scratch_dir("cli_protect");
  std::ofstream(dir / "cfg.txt") << "output_dir = nowhere\n";
  const Run r = run_cli("protect --config cfg.txt --in vol.raw --dims 1,64,64 --out p.raw", dir);
  CHECK(r.status == 1);
  CHECK(r.err.find("checkpoint not found") != std::string::npos);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dry run prints the resolved configuration and touches nothing") {
  const auto dir = fixtures::scratch_dir("cli_dry");
  std::ofstream(dir / "cfg.txt") << "alpha = 0.4\nepochs = 3\n";
  const Run r = run_cli("--dry-run train --config cfg.txt --set alpha=1.0", dir);
  CHECK(r.status == 0);
  CHECK(r.out.find("alpha = 1\n") != std::string::npos);
  CHECK(r.out.find("epochs = 3\n") != std::string::npos);
  CHECK(entries(dir) == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("phantom, tamper and heatmap verbs compose") {
  const auto dir = fixtures::scratch_dir("cli_flow");
  REQUIRE(run_cli("phantom --size 64 --slices 2 --seed 3 --out vol.raw", dir).status == 0);
  CHECK(std::filesystem::file_size(dir / "vol.raw") == 2 * 64 * 64 * 2);
  REQUIRE(run_cli("tamper --in vol.raw --dims 2,64,64 --region 32,32 --kind blur_blend --out t.raw", dir).status == 0);
  REQUIRE(run_cli("heatmap --a vol.raw --b t.raw --dims 2,64,64 --slice 1 --out h.png", dir).status == 0);
  CHECK(std::filesystem::exists(dir / "h.png"));

  const Run bad = run_cli("tamper --in vol.raw --dims 2,64,64 --region 4,4 --kind blur_blend --out t2.raw", dir);
  CHECK(bad.status == 3);
  CHECK_FALSE(std::filesystem::exists(dir / "t2.raw"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("train then protect end to end on a tiny phantom set") {
  const auto dir = fixtures::scratch_dir("cli_train");
  std::ofstream(dir / "cfg.txt") << "epochs = 1\nbatch_size = 4\ntrunk_width = 4\nresidual_blocks = 1\n"
                                    "disc_base_width = 2\nsurrogate_epochs = 1\nsurrogate_patches = 16\n"
                                    "phantom_volumes = 2\nphantom_slices = 4\noutput_dir = run\n";
  const Run t = run_cli("train --config cfg.txt --set alpha=1.0", dir);
  REQUIRE(t.status == 0);
  CHECK(std::filesystem::exists(dir / "run/checkpoint_final.mca"));
  REQUIRE(run_cli("phantom --size 64 --slices 2 --seed 3 --out vol.raw", dir).status == 0);
  const Run p1 = run_cli("protect --config cfg.txt --in vol.raw --dims 2,64,64 --out p1.raw", dir);
  const Run p2 = run_cli("protect --checkpoint run/checkpoint_final.mca --in vol.raw --dims 2,64,64 --out p2.raw", dir);
  CHECK(p1.status == 0);
  CHECK(p2.status == 0);
  CHECK(slurp(dir / "p1.raw") == slurp(dir / "p2.raw"));
  std::filesystem::remove_all(dir);
}
