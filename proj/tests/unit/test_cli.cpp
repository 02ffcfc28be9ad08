#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

#ifndef DRIFTALIGN_CLI
#error "DRIFTALIGN_CLI must name the built command-line tool"
#endif

namespace {

struct Invocation {
  int status = -1;
  std::string out, err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Invocation run(const testutil::TempDir& dir, const std::string& args) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + DRIFTALIGN_CLI + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int raw = std::system(cmd.c_str());
  Invocation r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

TEST(Cli, NegativeLambdaRejectedWithJsonError) {
  testutil::TempDir dir("cli_cfg");
  std::ofstream(dir / "bad.json") << R"({"defaults_version": 1, "align": {"lambda_tv": -3}})";
  std::filesystem::create_directories(dir / "scene");
  const Invocation r = run(dir, "--config \"" + (dir / "bad.json").string() + "\" pipeline \"" + (dir / "scene").string() +
                             "\" \"" + (dir / "out").string() + "\"");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find(R"("error":"config")"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("lambda_tv"), std::string::npos) << r.err;
  EXPECT_FALSE(std::filesystem::exists(dir / "out"));
}

TEST(Cli, RefineWithoutAlignFails) {
  testutil::TempDir dir("cli_stage");
  std::filesystem::create_directories(dir / "empty");
  const Invocation r = run(dir, "refine \"" + (dir / "empty").string() + "\" \"" + (dir / "ck").string() + "\"");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find(R"("error":)"), std::string::npos) << r.err;
}

TEST(Cli, MissingSceneIsReported) {
  testutil::TempDir dir("cli_missing");
  const Invocation r = run(dir, "align \"" + (dir / "absent").string() + "\" \"" + (dir / "ck").string() + "\"");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find(R"("error":"usage")"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("absent"), std::string::npos) << r.err;
}

TEST(Cli, SynthThenMetricsWritesJson) {
  testutil::TempDir dir("cli_ok");
  std::ofstream(dir / "spec.json") << R"({"width": 48, "height": 36, "orbit": {"count": 2}})";
  Invocation r = run(dir, "synth \"" + (dir / "scene").string() + "\" --spec \"" + (dir / "spec.json").string() + "\"");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("\"frames\""), std::string::npos) << r.out;
  r = run(dir, "--stride 4 filter \"" + (dir / "scene").string() + "\" \"" + (dir / "cloud.ply").string() + "\"");
  ASSERT_EQ(r.status, 0) << r.err;
  r = run(dir, "metrics \"" + (dir / "cloud.ply").string() + "\" \"" + (dir / "scene").string() + "\" \"" +
                   (dir / "m.json").string() + "\"");
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string m = slurp(dir / "m.json");
  EXPECT_NE(m.find("thickness"), std::string::npos) << m;
  EXPECT_NE(m.find("chamfer"), std::string::npos) << m;
}

}  // namespace
