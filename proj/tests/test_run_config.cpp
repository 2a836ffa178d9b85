#include <doctest.h>

#include <fstream>

#include "cfanet/experiment.hpp"
#include "cfanet/run_config.hpp"

using namespace cfanet;

TEST_CASE("defaults round trip through json") {
  const nlohmann::json j = to_json(RunConfig{});
  const RunConfig c = run_config_from_json(j);
  CHECK(to_json(c) == j);
  CHECK(c.train.epochs == 500);
  CHECK(c.model.k == 6);
  CHECK(j.at("supervision") == "1-4");
  CHECK(run_config_from_json(nlohmann::json::object()).out == "runs");
}

TEST_CASE("every key has a flag and a default") {
  const nlohmann::json j = to_json(RunConfig{});
  CHECK(config_keys().size() == j.size());
  for (const auto& k : config_keys()) {
    INFO(k.name);
    CHECK(j.contains(k.name));
    CHECK_FALSE(k.commands.empty());
  }
}

TEST_CASE("config errors") {
  auto from = [](const char* text) { return run_config_from_json(nlohmann::json::parse(text)); };
  CHECK_THROWS_AS(from(R"({"epoch": 3})"), InvalidArgument);
  CHECK_THROWS_AS(from(R"({"epochs": "3"})"), InvalidArgument);
  CHECK_THROWS_AS(from(R"({"epochs": 2.5})"), InvalidArgument);
  CHECK_THROWS_AS(from(R"({"seed": -1})"), InvalidArgument);
  CHECK_THROWS_AS(from(R"({"loss": "l1"})"), InvalidArgument);
  CHECK_THROWS_AS(from(R"({"layout": "spiral"})"), InvalidArgument);
  CHECK_THROWS_AS(from(R"({"k": 1})"), InvalidArgument);
  CHECK_THROWS_AS(from("[]"), InvalidArgument);
  const RunConfig c = from(R"({"seed": 9, "lr0": 1, "enable_bl": false})");
  CHECK(c.synth.seed == 9);
  CHECK(c.train.lr0 == 1.0);
  CHECK_FALSE(c.train.enable_bl);
}

TEST_CASE("supervision strings") {
  using S = std::array<bool, 4>;
  CHECK(parse_supervision("1-4") == S{true, true, true, true});
  CHECK(parse_supervision("4") == S{false, false, false, true});
  CHECK(parse_supervision("3-4") == S{false, false, true, true});
  CHECK(parse_supervision("1,3") == S{true, false, true, false});
  for (const char* bad : {"", "0", "5", "4-1", "1-", "a", "12"}) {
    INFO(bad);
    CHECK_THROWS_AS(parse_supervision(bad), InvalidArgument);
  }
  for (const char* s : {"1-4", "2-4", "3-4", "4", "1,3", "2"}) {
    CHECK(supervision_string(parse_supervision(s)) == s);
  }
}

TEST_CASE("flags are typed after the default") {
  nlohmann::json j = nlohmann::json::object();
  apply_flag(j, "epochs", "12");
  apply_flag(j, "lr0", "3e-4");
  apply_flag(j, "enable_bl", "false");
  apply_flag(j, "seed", "18446744073709551615");
  apply_flag(j, "loss", "mse");
  CHECK(j.at("epochs") == 12);
  CHECK(j.at("lr0") == 3e-4);
  CHECK(j.at("enable_bl") == false);
  CHECK(j.at("seed").get<uint64_t>() == 18446744073709551615ULL);
  CHECK(run_config_from_json(j).train.loss_kind == LossKind::kMse);
  CHECK_THROWS_AS(apply_flag(j, "epochs", "12x"), InvalidArgument);
  CHECK_THROWS_AS(apply_flag(j, "seed", "-1"), InvalidArgument);
  CHECK_THROWS_AS(apply_flag(j, "enable_bl", "yes"), InvalidArgument);
  CHECK_THROWS_AS(apply_flag(j, "nope", "1"), InvalidArgument);
}

TEST_CASE("config files") {
  const auto dir = std::filesystem::temp_directory_path() / "cfanet_run_config_test";
  std::filesystem::create_directories(dir);
  CHECK_THROWS_AS(read_config_file(dir / "missing.json"), IoError);
  std::ofstream(dir / "bad.json") << "{\"epochs\": ";
  CHECK_THROWS_AS(read_config_file(dir / "bad.json"), FormatError);
  std::ofstream(dir / "ok.json") << "{\"epochs\": 4}";
  CHECK(run_config_from_json(read_config_file(dir / "ok.json")).train.epochs == 4);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ablation arms") {
  const ModelConfig m;
  const TrainConfig t;
  auto labels = [&](AblationAxis a) {
    std::vector<std::string> out;
    for (const auto& arm : ablation_arms(a, m, t)) out.push_back(arm.label);
    return out;
  };
  CHECK(labels(AblationAxis::kBranches) ==
        std::vector<std::string>{"baseline", "+CRR", "+DLE", "+CRR+DLE"});
  CHECK(labels(AblationAxis::kK) == std::vector<std::string>{"k=4", "k=6", "k=8", "k=10"});
  const auto sup = ablation_arms(AblationAxis::kSupervision, m, t);
  CHECK(sup.front().train.supervision == std::array<bool, 4>{false, false, false, true});
  CHECK(sup.back().train.supervision == std::array<bool, 4>{true, true, true, true});
  const auto bl = ablation_arms(AblationAxis::kBl, m, t);
  CHECK_FALSE(bl[0].train.enable_bl);
  CHECK(bl[1].train.enable_bl);
  CHECK(parse_axis("loss") == AblationAxis::kLoss);
  CHECK_THROWS_AS(parse_axis("lr"), InvalidArgument);
}
