// Exercises the installed binary end to end: exit codes and the frozen
// golden fixture for predict + eval byte stability.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kBin = CONCORDIA_BIN;
const fs::path kFixtures = CONCORDIA_FIXTURES;

int run(const std::string& args) {
    const std::string cmd = kBin.string() + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("exit codes: 0 ok, 2 config error, 3 stage failure") {
    const fs::path dir = fs::temp_directory_path() / "concordia_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    CHECK(run("--help") == 0);
    CHECK(run("gen --help") == 0);

    // config error before any stage runs
    std::ofstream bad(dir / "bad.cfg");
    bad << "split.train = 0.9\nsplit.val = 0.9\nsplit.test = 0.9\n";
    bad.close();
    CHECK(run("run --config " + (dir / "bad.cfg").string() + " --out-dir " +
              (dir / "out").string()) == 2);

    // stage failure: qc pointed at a missing manifest
    CHECK(run("qc --manifest " + (dir / "missing.jsonl").string() + " --out-dir " +
              (dir / "qc").string()) == 3);

    fs::remove_all(dir);
}

TEST_CASE("golden fixture: predict then eval reproduce frozen bytes") {
    REQUIRE(fs::exists(kFixtures / "golden" / "manifest.jsonl"));
    const fs::path dir = fs::temp_directory_path() / "concordia_golden_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    const fs::path golden = kFixtures / "golden";
    const std::string predict_cmd = "predict --model " + (golden / "model.bin").string() +
                                    " --embeddings " + (golden / "embeddings.emb").string() +
                                    " --manifest " + (golden / "manifest.jsonl").string() +
                                    " --out " + (dir / "predictions.csv").string();
    REQUIRE(run(predict_cmd) == 0);
    CHECK(file_bytes(dir / "predictions.csv") == file_bytes(golden / "predictions.csv"));

    const std::string eval_cmd = "eval --predictions " + (dir / "predictions.csv").string() +
                                 " --manifest " + (golden / "manifest.jsonl").string() +
                                 " --gt-threshold 0.85 --resamples 200 --seed 11 --out-dir " +
                                 (dir / "eval").string();
    REQUIRE(run(eval_cmd) == 0);
    CHECK(file_bytes(dir / "eval" / "metrics.csv") == file_bytes(golden / "metrics.csv"));

    fs::remove_all(dir);
}
