#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const std::string kCli = OPTRACE_CLI_PATH;

int run(const std::string& args) {
  const int status = std::system((kCli + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Workdir {
  fs::path root;
  explicit Workdir(const std::string& name) : root(fs::temp_directory_path() / name) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workdir() { fs::remove_all(root); }
  [[nodiscard]] std::string operator/(const std::string& leaf) const { return (root / leaf).string(); }
};

const std::string kGen = "--students 24 --questions 12 --subjects 3 --modes 4 --min-len 8 --max-len 14 --seed 5";

// Runs every subcommand into `dir` and returns the concatenated artifact bytes.
std::string pipeline(const Workdir& w, const std::string& dir) {
  fs::create_directories(w.root / dir);
  const std::string d = (w.root / dir).string() + "/";
  REQUIRE(run("generate --out " + d + "gen " + kGen) == 0);
  const std::string data = d + "gen/responses.csv";
  REQUIRE(run("split --data " + data + " --setup cf --seed 3 --out " + d + "split.json") == 0);
  REQUIRE(run("train --data " + data + " --split " + d + "split.json --model pobidkt --epochs 2 --batch-size 8 --dim 4 "
              "--hidden 8 --out " + d + "m.ckpt") == 0);
  REQUIRE(run("evaluate --data " + data + " --split " + d + "split.json --checkpoint " + d + "m.ckpt --out " + d +
              "eval.json") == 0);
  REQUIRE(run("train --data " + data + " --model pair --epochs 2 --batch-size 8 --dim 4 --hidden 8 --out " + d +
              "pair.ckpt") == 0);
  REQUIRE(run("cluster --data " + data + " --checkpoint " + d + "pair.ckpt --truth " + d +
              "gen/ground_truth_clusters.csv --k 4 --out " + d + "clusters.csv") == 0);
  std::string all;
  for (const char* f : {"gen/responses.csv", "gen/ground_truth_clusters.csv", "gen/manifest.json", "split.json",
                        "m.ckpt", "m.ckpt.history.json", "m.ckpt.manifest.json", "eval.json", "pair.ckpt",
                        "clusters.csv", "clusters.csv.metrics.json"}) {
    REQUIRE(fs::exists(d + f));
    std::string bytes = slurp(d + f);
    // Manifests echo output paths, which differ between the two directories.
    if (std::string(f).find("manifest") != std::string::npos) {
      auto j = nlohmann::json::parse(bytes);
      for (auto& o : j["outputs"]) o.erase("path");
      j.erase("config");
      j.erase("config_hash");
      bytes = j.dump();
    }
    all += std::string(f) + "\n" + bytes + "\n";
  }
  return all;
}

}  // namespace

TEST_CASE("identical seeds give byte-identical artifacts") {
  Workdir w("optrace_cli_determinism");
  const std::string a = pipeline(w, "a"), b = pipeline(w, "b");
  CHECK(a == b);
}

TEST_CASE("training twice writes the same checkpoint") {
  Workdir w("optrace_cli_train");
  REQUIRE(run("generate --out " + (w / "gen") + " " + kGen) == 0);
  const std::string args = "--data " + (w / "gen/responses.csv") + " --model dkt --setup kt --epochs 2 --dim 4 --hidden 8";
  REQUIRE(run("train " + args + " --out " + (w / "1.ckpt")) == 0);
  REQUIRE(run("train " + args + " --out " + (w / "2.ckpt")) == 0);
  CHECK(slurp(w / "1.ckpt") == slurp(w / "2.ckpt"));
  REQUIRE(run("train " + args + " --seed 1 --out " + (w / "3.ckpt")) == 0);
  CHECK(slurp(w / "1.ckpt") != slurp(w / "3.ckpt"));
}

TEST_CASE("evaluate reports both baselines") {
  Workdir w("optrace_cli_eval");
  REQUIRE(run("generate --out " + (w / "gen") + " " + kGen) == 0);
  REQUIRE(run("evaluate --data " + (w / "gen/responses.csv") + " --setup cf --out " + (w / "e.json")) == 0);
  const auto j = nlohmann::json::parse(slurp(w / "e.json"));
  CHECK(j["model"].is_null());
  CHECK(j["baselines"].contains("random"));
  CHECK(j["baselines"].contains("majority"));
}

TEST_CASE("config files supply flags that explicit flags override") {
  Workdir w("optrace_cli_config");
  std::ofstream(w / "cfg.json") << R"({"students": 7, "questions": 5, "subjects": 2, "modes": 3, "min-len": 4,
                                       "max-len": 6})";
  REQUIRE(run("--config " + (w / "cfg.json") + " generate --out " + (w / "g") + " --students 9") == 0);
  std::ifstream in(w / "g/responses.csv");
  std::string line;
  std::getline(in, line);
  std::set<std::string> students;
  while (std::getline(in, line)) students.insert(line.substr(0, line.find(',')));
  CHECK(students.size() == 9);
}

TEST_CASE("gradcheck passes") {
  Workdir w("optrace_cli_gradcheck");
  CHECK(run("gradcheck --seed 0 --out " + (w / "g.json")) == 0);
  const auto j = nlohmann::json::parse(slurp(w / "g.json"));
  CHECK(j["passed"] == true);
}

TEST_CASE("exit codes") {
  Workdir w("optrace_cli_exit");
  REQUIRE(run("generate --out " + (w / "gen") + " " + kGen) == 0);
  const std::string data = w / "gen/responses.csv";
  CHECK(run("") == 2);
  CHECK(run("train --no-such-flag") == 2);
  CHECK(run("train --data " + data + " --lr -1 --out " + (w / "x.ckpt")) == 2);
  CHECK(run("train --data " + data + " --model dkt --setup cf --out " + (w / "x.ckpt")) == 2);
  CHECK(run("train --data " + data + " --model nonsense") == 2);
  CHECK(run("generate --out " + (w / "bad") + " --modes 1000 --questions 3") == 2);
  CHECK(run("train --data " + (w / "missing.csv")) == 3);
  std::ofstream(w / "broken.csv") << "student_id,timestamp,question_id,subject_ids,chosen_option,correct_option\n1,x\n";
  CHECK(run("train --data " + (w / "broken.csv")) == 3);
  CHECK(run("evaluate --data " + data + " --checkpoint " + (w / "missing.ckpt")) == 3);
}
