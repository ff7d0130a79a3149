#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args)
{
    const std::string cmd = std::string(OCCLIP_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("occlip_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(Cli, BadConfigIsAValidationError)
{
    const auto dir = scratch("bad");
    std::ofstream(dir / "c.json") << R"({"train": {"epochz": 1}})";
    EXPECT_EQ(run("train --config " + (dir / "c.json").string() + " --out " + dir.string()), 1);
    std::ofstream(dir / "d.json") << R"({"world": {"split": {"pair_fraction": 0.01}}})";
    EXPECT_EQ(run("generate --config " + (dir / "d.json").string() + " --out " + dir.string()), 1);
    EXPECT_EQ(run("train --no-such-flag"), 1);
}

TEST(Cli, TemplateParseWritesGraphs)
{
    const auto dir = scratch("parse");
    std::ofstream(dir / "caps.txt") << "A photo of a red circle to the left of a blue square\nnot a template caption\n";
    EXPECT_EQ(run("parse --input " + (dir / "caps.txt").string() + " --mode template --out " + dir.string()), 0);
    std::ifstream report(dir / "parse_report.json");
    const auto j = nlohmann::json::parse(report);
    EXPECT_EQ(j.at("total"), 2);
    EXPECT_EQ(j.at("parsed"), 1);
}

TEST(Cli, MockLlmParse)
{
    const auto dir = scratch("llm");
    std::ofstream(dir / "caps.txt") << "A photo of a green star above a yellow bar\n";
    EXPECT_EQ(run("parse --input " + (dir / "caps.txt").string() + " --mode llm --transport mock --out " + dir.string()), 0);
    std::ifstream graphs(dir / "graphs.jsonl");
    std::string line;
    ASSERT_TRUE(std::getline(graphs, line));
    EXPECT_NE(line.find("green star"), std::string::npos);
}
