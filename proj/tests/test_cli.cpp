#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fsta/config.hpp"

using namespace fsta;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(FSTA_CLI_PATH) + " " + args + " > cli_stdout.txt 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_tiny_config(const std::string& path, const std::string& fusion = "fsta") {
    std::ofstream os(path);
    os << "net.t = 3\nnet.base_channels = 4\nnet.growth = 2\nnet.dense_layers = 2\n"
       << "net.fsta_m = 2\nnet.fsta_n = 2\nnet.fusion = " << fusion << "\n"
       << "train.patch = 32\ntrain.batch = 2\ntrain.steps = 3\ntrain.seed = 5\n"
       << "data.sequences = 2\nsynth.frames = 6\nsynth.h = 32\nsynth.w = 32\n"
       << "eval.sequences = 1\n";
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(run("") == 2);                         // missing subcommand
    CHECK(run("frobnicate") == 2);               // unknown subcommand
    CHECK(run("synth") == 2);                    // missing required --out
    CHECK(run("oracle --bogus-flag 1") == 2);    // unknown flag
    CHECK(run("train --config no_such_file.cfg --out x.ckpt") == 2);
}

TEST_CASE("oracle subcommand passes and reports JSON") {
    CHECK(run("oracle --t 3 --h 4 --w 4 --m 2 --n 2 --seed 0 --out cli_oracle.json") == 0);
    const std::string report = slurp("cli_oracle.json");
    CHECK(report.find("\"pass\": true") != std::string::npos);
    CHECK(report.find("\"max_abs_diff\"") != std::string::npos);
    std::remove("cli_oracle.json");
}

TEST_CASE("gradcheck subcommand exits 0 on the fsta target") {
    CHECK(run("gradcheck --target fsta --seed 1") == 0);
    CHECK(run("gradcheck --target bogus") == 2);
}

TEST_CASE("report files are bit-identical across repeated runs") {
    CHECK(run("oracle --t 3 --h 4 --w 4 --m 2 --n 2 --seed 3 --out cli_o1.json") == 0);
    CHECK(run("oracle --t 3 --h 4 --w 4 --m 2 --n 2 --seed 3 --out cli_o2.json") == 0);
    CHECK(slurp("cli_o1.json") == slurp("cli_o2.json"));
    std::remove("cli_o1.json");
    std::remove("cli_o2.json");

    CHECK(run("bench --t 4 --h 7 --w 7 --m 4 --n 4 --mode fsta --repeat 2 --out cli_b1.csv") == 0);
    CHECK(run("bench --t 4 --h 7 --w 7 --m 4 --n 4 --mode fsta --repeat 2 --out cli_b2.csv") == 0);
    const std::string csv = slurp("cli_b1.csv");
    CHECK(csv == slurp("cli_b2.csv"));
    CHECK(csv.find("config,dense_elems,fsta_elems,ratio,measured_peak,wall_ms") == 0);
    CHECK(csv.find("38416,1584,24.25252525") != std::string::npos);
    std::remove("cli_b1.csv");
    std::remove("cli_b2.csv");
}

TEST_CASE("train is deterministic and infer round-trips bitwise") {
    write_tiny_config("cli_cfg.txt");
    CHECK(run("train --config cli_cfg.txt --out cli_ck1.fstac --log cli_log1.csv") == 0);
    CHECK(run("train --config cli_cfg.txt --out cli_ck2.fstac --log cli_log2.csv") == 0);
    CHECK(slurp("cli_ck1.fstac") == slurp("cli_ck2.fstac"));
    CHECK(slurp("cli_log1.csv") == slurp("cli_log2.csv"));
    CHECK(slurp("cli_log1.csv").find("step,loss,lr") == 0);

    // synth a sequence, restore it through the CLI, and compare with the
    // in-process forward pass on the loaded checkpoint
    CHECK(run("synth --seed 9 --frames 5 --h 32 --w 32 --out cli_seq") == 0);
    CHECK(run("infer --config cli_cfg.txt --ckpt cli_ck1.fstac --input cli_seq.blurred.fsta "
              "--out cli_restored") == 0);

    KeyValues kv = parse_key_values_file("cli_cfg.txt");
    NetConfig net = net_config_from(kv);
    ParamStore params = ParamStore::load("cli_ck1.fstac");
    Tensor blurred = load_tensor_file("cli_seq.blurred.fsta");
    Tensor restored = load_tensor_file("cli_restored.restored.fsta");

    SyntheticSequence seq;
    seq.blurred = blurred;
    seq.sharp = blurred;
    const std::size_t hw = 32 * 32;
    for (std::size_t center = 1; center <= 3; ++center) {
        Tensor win = window(seq, center, net.T);
        Tensor mine = net_restore(win, params, net);
        CHECK(std::memcmp(mine.ptr(), restored.ptr() + center * hw, sizeof(double) * hw) == 0);
    }

    CHECK(run("infer --config cli_cfg.txt --ckpt no_such.fstac --input cli_seq.blurred.fsta "
              "--out x") == 2);

    CHECK(run("eval --config cli_cfg.txt --ckpt cli_ck1.fstac --out cli_eval.json") == 0);
    CHECK(slurp("cli_eval.json").find("\"psnr_out\"") != std::string::npos);

    for (const char* f : {"cli_cfg.txt", "cli_ck1.fstac", "cli_ck2.fstac", "cli_log1.csv",
                          "cli_log2.csv", "cli_seq.blurred.fsta", "cli_seq.sharp.fsta",
                          "cli_restored.restored.fsta", "cli_eval.json", "cli_stdout.txt"})
        std::remove(f);
}
