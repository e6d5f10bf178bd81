#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mseg/decoder.hpp"
#include "mseg/image_io.hpp"
#include "support.hpp"

using namespace mseg;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Scratch {
 public:
  Scratch() : dir_(fs::temp_directory_path() / ("mseg_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Scratch() { fs::remove_all(dir_); }
  fs::path operator/(const std::string& name) const { return dir_ / name; }

  Run run(const std::string& args) const {
    const std::string cmd = std::string(MSEG_CLI_PATH) + " " + args + " >" + (dir_ / "stdout").string() + " 2>" +
                            (dir_ / "stderr").string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(dir_ / "stdout"), slurp(dir_ / "stderr")};
  }

 private:
  fs::path dir_;
};

void write_mask_file(const fs::path& p, std::uint64_t seed) {
  const auto bytes = write_mask(mseg::testing::random_binary<float>({1, 1, 12, 16}, seed));
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("eval on identical directories") {
    Scratch s;
    fs::create_directories(s / "pred");
    fs::create_directories(s / "gt");
    for (int i = 0; i < 3; ++i) {
      write_mask_file(s / ("pred/img" + std::to_string(i) + ".pgm"), i);
      write_mask_file(s / ("gt/img" + std::to_string(i) + ".pgm"), i);
    }
    const Run r = s.run("eval --pred " + (s / "pred").string() + " --gt " + (s / "gt").string() + " --json " +
                        (s / "report.json").string());
    CHECK(r.code == 0);
    CHECK(r.out.starts_with("# mseg eval"));
    const auto j = read_json(s / "report.json");
    CHECK(j["mdice"].get<double>() == 1.0);
    CHECK(j["miou"].get<double>() == 1.0);
    CHECK(j["images"].size() == 3);

    write_mask_file(s / "gt/extra.pgm", 9);
    const Run missing = s.run("eval --pred " + (s / "pred").string() + " --gt " + (s / "gt").string());
    CHECK(missing.code == 2);
    CHECK(missing.err.find("extra") != std::string::npos);
  }

  TEST_CASE("usage errors") {
    Scratch s;
    CHECK(s.run("").code == 1);
    CHECK(s.run("frobnicate").code == 1);
    CHECK(s.run("infer --in x.ppm").code == 1);
    CHECK(s.run("bench --preset tiny --size 64 --iters 5").code == 1);
    CHECK(s.run("summary --preset no-such-preset").code != 0);
  }

  TEST_CASE("summary json") {
    Scratch s;
    const Run r = s.run("summary --preset tiny --size 64 --json " + (s / "sum.json").string());
    CHECK(r.code == 0);
    const Model m = build_mseg(preset("tiny"));
    CHECK(read_json(s / "sum.json")["total_params"].get<std::int64_t>() == init_weights(m.graph, 0).element_count());
  }

  TEST_CASE("infer keeps the input resolution") {
    Scratch s;
    const Model m = build_mseg(preset("tiny"));
    save_weights(init_weights(m.graph, 4), s / "w.msegw");
    ImageBuffer img{70, 90, 3, {}};
    for (int i = 0; i < 70 * 90 * 3; ++i) img.samples.push_back(static_cast<std::uint8_t>(i % 251));
    save_image(img, s / "in.ppm");
    const Run r = s.run("infer --weights " + (s / "w.msegw").string() + " --in " + (s / "in.ppm").string() +
                        " --out " + (s / "mask.pgm").string() + " --size 64");
    CHECK(r.code == 0);
    const ImageBuffer mask = load_image(s / "mask.pgm");
    CHECK(mask.width == 70);
    CHECK(mask.height == 90);
    CHECK(mask.channels == 1);
    CHECK(s.run("infer --weights " + (s / "nope.msegw").string() + " --in " + (s / "in.ppm").string() + " --out " +
                (s / "m2.pgm").string())
              .code == 2);
  }

  TEST_CASE("bench and gradcheck") {
    Scratch s;
    const Run b = s.run("bench --preset tiny --size 64 --warmup 1 --iters 10 --json " + (s / "b.json").string());
    CHECK(b.code == 0);
    const auto j = read_json(s / "b.json");
    CHECK(j["latencies_ms"].size() == 10);
    CHECK(j["threads"] == 1);
    CHECK(j["fps"].get<double>() > 0);
    const Run g = s.run("gradcheck --seed 2");
    CHECK(g.code == 0);
  }

  TEST_CASE("train-toy is repeatable") {
    Scratch s;
    const std::string args = " --scale tiny --samples 5 --epochs 1 --size 64 --seed 3";
    CHECK(s.run("train-toy" + args + " --out " + (s / "a.msegw").string() + " --json " + (s / "a.json").string()).code == 0);
    CHECK(s.run("train-toy" + args + " --out " + (s / "b.msegw").string()).code == 0);
    CHECK(slurp(s / "a.msegw") == slurp(s / "b.msegw"));
    const auto j = read_json(s / "a.json");
    CHECK(j["train_samples"] == 4);
    CHECK(j["curve"].size() == 1);
    CHECK(s.run("train-toy --policy rmsprop --out " + (s / "c.msegw").string()).code == 1);
  }
}
