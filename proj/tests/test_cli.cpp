#include "doctest.h"

#include "test_util.hpp"
#include "topofuse/cli.hpp"
#include "topofuse/dataio.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

using namespace topofuse;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result invoke(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

const std::vector<std::string> small_run = {"--set", "tau=1",       "--set", "n_pcs_mor=4", "--set",
                                            "epochs=5", "--set",    "d_emb=8", "--set",     "n_clusters=2",
                                            "--set", "vis_epochs=5", "--set", "svc_epochs=20"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
}

nlohmann::json json_file(const fs::path& p) { return nlohmann::json::parse(testutil::read_text(p)); }

void make_synth(const fs::path& dir) {
    const auto r = invoke({"synth", "--out", dir.string(), "--domains", "2", "--spots-per-domain", "15", "--genes",
                           "30", "--mor-dims", "6", "--grid-rows", "5"});
    REQUIRE(r.code == 0);
}

}

TEST_CASE("version, help and usage errors") {
    const auto v = invoke({"--version"});
    CHECK(v.code == exit_ok);
    CHECK(v.out.find(version) != std::string::npos);

    const auto h = invoke({"--help"});
    CHECK(h.code == exit_ok);
    CHECK(h.out.find("report") != std::string::npos);

    CHECK(invoke({}).code == exit_user_error);

    testutil::TempDir dir("cli_usage");
    const auto unknown = invoke({"train", "--data", dir.path().string(), "--out", (dir / "o").string(), "--bogus"});
    CHECK(unknown.code == exit_user_error);
    CHECK(unknown.err.find("Usage") != std::string::npos);

    const auto missing = invoke({"train", "--data", (dir / "absent").string(), "--out", (dir / "o").string()});
    CHECK(missing.code == exit_user_error);
}

TEST_CASE("subcommands on a small synthetic dataset") {
    testutil::TempDir dir("cli_flow");
    const fs::path data = dir / "data";
    make_synth(data);
    for (const char* name : {"tra.csv", "coords.csv", "mor.csv", "labels.csv", "truth_tra.csv", "manifest.json"}) {
        CHECK(fs::exists(data / name));
    }
    CHECK(json_file(data / "manifest.json").at("spec").at("n_domains") == 2);

    const fs::path pre = dir / "pre";
    CHECK(invoke(with({"preprocess", "--data", data.string(), "--out", pre.string()}, small_run)).code == 0);
    CHECK(fs::exists(pre / "model_input_tra.csv"));

    const fs::path trained = dir / "trained";
    const auto t = invoke(with({"train", "--data", data.string(), "--out", trained.string(), "--seed", "7"}, small_run));
    REQUIRE(t.code == 0);
    for (const char* name : {"checkpoint.json", "embedding.csv", "training.json", "manifest.json", "y_mor.csv"}) {
        CHECK(fs::exists(trained / name));
    }
    const auto manifest = json_file(trained / "manifest.json");
    CHECK(manifest.at("subcommand") == "train");
    CHECK(manifest.at("seed") == 7);
    CHECK(manifest.at("config").at("epochs") == 5);
    CHECK(json_file(trained / "training.json").at("loss_history").size() == 5);

    struct Step {
        const char* name;
        const char* output;
    };
    for (const Step& s : {Step{"cluster", "labels.csv"}, Step{"visualize", "visualization.csv"},
                          Step{"deconvolve", "deconvolution.csv"}, Step{"markers", "markers.csv"},
                          Step{"trajectory", "trajectory.json"}, Step{"evaluate", "metrics.json"}}) {
        const fs::path out = dir / s.name;
        const auto r = invoke({s.name, "--data", trained.string(), "--out", out.string()});
        INFO(s.name << ": " << r.err);
        CHECK(r.code == 0);
        CHECK(fs::exists(out / s.output));
    }
    CHECK(json_file(dir / "evaluate" / "metrics.json").at("metrics").contains("ari"));
    CHECK(testutil::read_text(dir / "markers" / "markers.csv").rfind("cluster,rank,gene_id,importance", 0) == 0);

    const auto with_labels = invoke({"deconvolve", "--data", trained.string(), "--out", (dir / "d2").string(), "--labels",
                                     (data / "labels.csv").string()});
    CHECK(with_labels.code == 0);

    const fs::path again = dir / "again";
    const auto reuse = invoke({"train", "--data", data.string(), "--out", again.string(), "--manifest",
                               (trained / "manifest.json").string()});
    REQUIRE(reuse.code == 0);
    CHECK(testutil::read_text(again / "embedding.csv") == testutil::read_text(trained / "embedding.csv"));
}

TEST_CASE("configuration errors map to the user exit code") {
    testutil::TempDir dir("cli_errors");
    const fs::path data = dir / "data";
    make_synth(data);
    const auto bad_key = invoke({"train", "--data", data.string(), "--out", (dir / "o").string(), "--set", "nope=1"});
    CHECK(bad_key.code == exit_user_error);
    CHECK(bad_key.err.find("nope") != std::string::npos);
    const auto bad_nu = invoke({"train", "--data", data.string(), "--out", (dir / "o").string(), "--set", "nu=-1"});
    CHECK(bad_nu.code == exit_user_error);
    const auto not_trained = invoke({"cluster", "--data", data.string(), "--out", (dir / "o").string()});
    CHECK(not_trained.code == exit_user_error);
}

TEST_CASE("report through the installed binary") {
    const char* bin = std::getenv("TOPOFUSE_BIN");
    REQUIRE(bin != nullptr);
    testutil::TempDir dir("cli_report");
    const fs::path data = dir / "data";
    make_synth(data);
    std::string cmd = std::string("\"") + bin + "\" report --data \"" + data.string() + "\" --out \"" +
                      (dir / "report").string() + "\" --threads 1";
    for (const auto& a : small_run) {
        cmd += " " + a;
    }
    cmd += " > /dev/null 2>&1";
    CHECK(std::system(cmd.c_str()) == 0);
    const auto report = json_file(dir / "report" / "report.json");
    CHECK(report.at("metrics").contains("ari"));
    CHECK(report.at("metrics").contains("mrre"));
    CHECK(fs::exists(dir / "report" / "manifest.json"));

    const std::string bad = std::string("\"") + bin + "\" report --unknown-flag > /dev/null 2>&1";
    const int status = std::system(bad.c_str());
    CHECK(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 1);
}
