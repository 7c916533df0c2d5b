// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "meteora/artifact.hpp"

using namespace meteora;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "meteora_cli_test";

struct Run {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Output after the echoed configuration block, which names the files used.
std::string body(const std::string& out) { return out.substr(out.find("# end configuration")); }

Run cli(const std::string& args) {
    fs::create_directories(kWork);
    const auto out = kWork / "stdout.txt", err = kWork / "stderr.txt";
    const std::string cmd = "cd '" + kWork.string() + "' && '" METEORA_CLI_PATH "' " + args + " >'" + out.string() +
                            "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

// A small trained artifact shared by the tests that only read it.
const fs::path& gated_artifact() {
    static const fs::path path = [] {
        REQUIRE(cli("train-adapters --out adapters.mtra --steps 5").code == 0);
        REQUIRE(cli("train-gates --in adapters.mtra --out gated.mtra --epochs 1 --per-task 5").code == 0);
        return kWork / "gated.mtra";
    }();
    return path;
}

} // namespace

TEST_CASE("usage errors exit with 1", "[cli]") {
    CHECK(cli("").code == 1);
    CHECK(cli("generate --bogus 3").code == 1);
    CHECK(cli("train-gates --out x.mtra").code == 1);  // --in is required
    CHECK(cli("--threads 0 inspect --in x.mtra").code == 1);
    CHECK(cli("generate --in x.mtra --prompt 4,5 --strategy fast").code == 1);
    CHECK(cli("--help").code == 0);
}

TEST_CASE("library errors exit with 2 and name the problem", "[cli]") {
    const auto missing = cli("inspect --in does-not-exist.mtra");
    CHECK(missing.code == 2);
    CHECK(missing.err.find("does-not-exist.mtra") != std::string::npos);

    save_artifact(kWork / "base.mtra", model_to_artifact(build_base_model({}, 0)));
    const auto no_bank = cli("train-gates --in base.mtra --out y.mtra");
    CHECK(no_bank.code == 2);
    CHECK(no_bank.err.find("has no adapter bank; run train-adapters first") != std::string::npos);

    gated_artifact();
    const auto bad_task = cli("generate --in gated.mtra --task nosuch");
    CHECK(bad_task.code == 2);
    const auto overflow = cli("generate --in gated.mtra --prompt 4,5 --max-tokens 500");
    CHECK(overflow.code == 2);
    CHECK(overflow.err.find("generation") != std::string::npos);

    auto bytes = slurp(kWork / "gated.mtra");
    bytes[bytes.size() - 3] ^= 0x01;
    std::ofstream(kWork / "flipped.mtra", std::ios::binary) << bytes;
    const auto corrupt = cli("inspect --in flipped.mtra");
    CHECK(corrupt.code == 2);
    CHECK(corrupt.err.find("checksum mismatch in section META") != std::string::npos);
}

TEST_CASE("numeric failures exit with 3", "[cli]") {
    auto model = model_from_artifact(load_artifact(gated_artifact()));
    model.site(0, Site::q).layer.gate.weight[0] = std::numeric_limits<float>::quiet_NaN();
    save_artifact(kWork / "nan.mtra", model_to_artifact(model));
    const auto r = cli("generate --in nan.mtra --prompt 4,5,6");
    CHECK(r.code == 3);
    CHECK(r.err.find("NaN") != std::string::npos);

    const auto diverged = cli("train-adapters --out d.mtra --steps 3 --lr 1e300");
    CHECK(diverged.code == 3);
    CHECK(diverged.err.find("task 'copy' diverged") != std::string::npos);
}

TEST_CASE("train-gates rewrites only the gate, config and metadata sections", "[cli]") {
    const auto in = load_artifact(kWork / "adapters.mtra");
    const auto out = load_artifact(gated_artifact());
    CHECK(in.find("BASE")->payload == out.find("BASE")->payload);
    CHECK(in.find("BANK")->payload == out.find("BANK")->payload);
    CHECK_FALSE(in.find("GATE")->payload == out.find("GATE")->payload);
}

TEST_CASE("loss mode and beta reach the logged decomposition", "[cli]") {
    gated_artifact();
    const auto top1 = cli("train-gates --in adapters.mtra --out t1.mtra --epochs 1 --per-task 3");
    REQUIRE(top1.code == 0);
    CHECK(top1.out.find("loss top1, k 1") != std::string::npos);
    CHECK(top1.out.find("(= lm +") == std::string::npos);

    const auto joint = cli("train-gates --in adapters.mtra --out tk.mtra --epochs 1 --per-task 3 --loss topk --k 2 "
                           "--beta 0.5 --curve tk.csv");
    REQUIRE(joint.code == 0);
    CHECK(joint.out.find("loss topk, k 2, beta 0.5") != std::string::npos);
    CHECK(joint.out.find("(= lm + 0.5 * gate)") != std::string::npos);
    std::istringstream csv(slurp(kWork / "tk.csv"));
    std::string line;
    std::getline(csv, line);
    std::getline(csv, line);
    double epoch, lm, gate, total;
    char c;
    std::istringstream(line) >> epoch >> c >> lm >> c >> gate >> c >> total;
    CHECK(total == Catch::Approx(lm + 0.5 * gate).epsilon(1e-9));
}

TEST_CASE("trace with no generated tokens renders the prompt only", "[cli]") {
    gated_artifact();
    const auto r = cli("trace --in gated.mtra --prompt 4,5,6 --max-tokens 0");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("output: \n") != std::string::npos);
    CHECK(r.out.find("strip: ") != std::string::npos);
    CHECK(r.out.find("*\n") == std::string::npos);
}

TEST_CASE("training and generation are byte reproducible", "[cli]") {
    REQUIRE(cli("--seed 3 train-adapters --out r1.mtra --steps 4").code == 0);
    REQUIRE(cli("--seed 3 train-adapters --out r2.mtra --steps 4").code == 0);
    CHECK(slurp(kWork / "r1.mtra") == slurp(kWork / "r2.mtra"));
    REQUIRE(cli("--seed 4 train-gates --in r1.mtra --out g1.mtra --epochs 1 --per-task 4 --curve c1.csv").code == 0);
    REQUIRE(cli("--seed 4 train-gates --in r2.mtra --out g2.mtra --epochs 1 --per-task 4 --curve c2.csv").code == 0);
    CHECK(slurp(kWork / "g1.mtra") == slurp(kWork / "g2.mtra"));
    CHECK(slurp(kWork / "c1.csv") == slurp(kWork / "c2.csv"));
    CHECK(slurp(kWork / "c1.csv").rfind("epoch,lm_loss,gate_loss,total\n", 0) == 0);

    const auto a = cli("trace --in g1.mtra --task reverse --sample 2 --jsonl t1.jsonl");
    const auto b = cli("trace --in g2.mtra --task reverse --sample 2 --jsonl t2.jsonl");
    REQUIRE(a.code == 0);
    CHECK(body(a.out) == body(b.out));
    CHECK(slurp(kWork / "t1.jsonl") == slurp(kWork / "t2.jsonl"));
    CHECK(slurp(kWork / "t1.jsonl").find("\"per_site\"") != std::string::npos);

    // Another seed gives another model.
    REQUIRE(cli("--seed 5 train-adapters --out r3.mtra --steps 4").code == 0);
    CHECK(slurp(kWork / "r1.mtra") != slurp(kWork / "r3.mtra"));
}

TEST_CASE("strategies produce the same generation through the CLI", "[cli]") {
    gated_artifact();
    std::string first;
    for (const char* s : {"loop", "batched", "blocked"}) {
        const auto r = cli(std::string("generate --in gated.mtra --task copy --sample 1 --strategy ") + s);
        REQUIRE(r.code == 0);
        const auto at = r.out.find("output:");
        REQUIRE(at != std::string::npos);
        const auto line = r.out.substr(at, r.out.find('\n', at) - at);
        if (first.empty()) first = line;
        CHECK(line == first);
    }
}

TEST_CASE("a config file is applied and command-line flags override it", "[cli][config]") {
    gated_artifact();
    std::ofstream(kWork / "run.ini") << "seed=7\ngenerate.max-tokens=3\ngenerate.strategy=blocked\n";
    const auto r = cli("--config run.ini generate --in gated.mtra --task copy --strategy batched");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("seed=\"7\"") != std::string::npos);
    CHECK(r.out.find("generate.max-tokens=\"3\"") != std::string::npos);
    CHECK(r.out.find("generate.strategy=\"batched\"") != std::string::npos);

    // The echoed block is itself a valid config file that reproduces the run.
    const auto begin = r.out.find('\n') + 1;
    const auto end = r.out.find("# end configuration");
    std::ofstream(kWork / "echo.ini") << r.out.substr(begin, end - begin);
    const auto again = cli("--config echo.ini generate");
    REQUIRE(again.code == 0);
    CHECK(again.out == r.out);
}

TEST_CASE("bench and composite-eval run end to end", "[cli]") {
    const auto bench = cli("bench --b 1,2 --n 4 --g 2 --d 16 --h 16 --reps 3 --out bench.csv");
    REQUIRE(bench.code == 0);
    const auto csv = slurp(kWork / "bench.csv");
    CHECK(csv.rfind("b,s,k,r,n,d,h,g,strategy,ms_per_token,floats_per_token,product,spread_ms,flagged\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
    CHECK(cli("bench --k 5 --n 4").code == 2);

    gated_artifact();
    const auto comp = cli("composite-eval --in gated.mtra --tasks copy,reverse --jsonl comp.jsonl");
    REQUIRE(comp.code == 0);
    CHECK(comp.out.find("min dominance") != std::string::npos);
    CHECK(cli("composite-eval --in gated.mtra --tasks copy").code == 2);
}
