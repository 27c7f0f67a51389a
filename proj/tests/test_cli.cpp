// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "moqe/data.hpp"

using moqe::testing::TempDir;

namespace {

struct CliRun {
  int code;
  std::string out;
};

// Runs the CLI with `args`, capturing stdout and stderr together.
CliRun cli(const std::string& args, const TempDir& scratch) {
  const std::string log = (scratch / "cli.log").string();
  const std::string cmd = std::string(MOQE_CLI_PATH) + " " + args + " >" + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
  TempDir t("moqe_cli");
  EXPECT_EQ(cli("", t).code, 2);
  EXPECT_EQ(cli("no-such-command", t).code, 2);
  EXPECT_EQ(cli("gen-data --kind audio --out " + (t / "x").string(), t).code, 2);
  EXPECT_EQ(cli("pipeline no-such-stage --run-dir " + (t / "r").string(), t).code, 2);
  EXPECT_EQ(cli("--help", t).code, 0);
}

TEST(Cli, GenDataWritesSevenSubsetsDeterministically) {
  TempDir t("moqe_cli");
  const CliRun a = cli("gen-data --kind cv --seed 5 --out " + (t / "a").string(), t);
  ASSERT_EQ(a.code, 0) << a.out;
  const CliRun b = cli("gen-data --kind cv --seed 5 --out " + (t / "b").string(), t);
  ASSERT_EQ(b.code, 0) << b.out;
  const moqe::Dataset da = moqe::load_dataset(t / "a"), db = moqe::load_dataset(t / "b");
  EXPECT_EQ(da.subset_count(), 7);
  EXPECT_EQ(da.digest(), db.digest());
  EXPECT_EQ(a.out.substr(a.out.find("digest")), b.out.substr(b.out.find("digest")));
  const CliRun c = cli("gen-data --kind cv --seed 6 --out " + (t / "c").string(), t);
  EXPECT_NE(moqe::load_dataset(t / "c").digest(), da.digest());
}

TEST(Cli, TooFewSubsetsIsAConfigError) {
  TempDir t("moqe_cli");
  const CliRun r = cli("gen-data --kind nlp --subsets 1 --out " + (t / "d").string(), t);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("subsets"), std::string::npos) << r.out;
}

TEST(Cli, StageOrderingAndOverwriteProtection) {
  TempDir t("moqe_cli");
  const std::string dir = " --kind cv --run-dir " + (t / "run").string();
  // A downstream stage before its inputs exist.
  const CliRun early = cli("pipeline train-router" + dir, t);
  EXPECT_EQ(early.code, 3) << early.out;
  ASSERT_EQ(cli("pipeline data" + dir, t).code, 0);
  EXPECT_EQ(cli("pipeline quantize" + dir, t).code, 3);
  // A completed stage is not silently overwritten.
  EXPECT_EQ(cli("pipeline data" + dir, t).code, 2);
  EXPECT_EQ(cli("pipeline data --force" + dir, t).code, 0);
  // A different configuration in the same run directory is refused.
  EXPECT_EQ(cli("pipeline data --kind nlp --run-dir " + (t / "run").string(), t).code, 3);
}

TEST(Cli, ConfigPrintsResolvedJson) {
  TempDir t("moqe_cli");
  const CliRun r = cli("config --kind nlp", t);
  ASSERT_EQ(r.code, 0);
  const nlohmann::json j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("data").at("kind"), "nlp");
  EXPECT_TRUE(j.at("router").is_object());
  EXPECT_NE(cli("config --config " + (t / "missing.json").string(), t).code, 0);
}
