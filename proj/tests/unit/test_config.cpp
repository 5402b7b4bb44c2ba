#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "corrtime/config.hpp"
#include "doctest.h"

using namespace corrtime;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("corrtime_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

nlohmann::json default_json() { return nlohmann::json::parse(config_to_json(default_config())); }

}  // namespace

TEST_CASE("default config round trips through json") {
    const auto c = default_config();
    const auto text = config_to_json(c);
    const auto back = config_from_json(text);
    CHECK(config_to_json(back) == text);
    CHECK(config_hash(back) == config_hash(c));
    CHECK(config_hash(c).size() == 16);
}

TEST_CASE("shipped configs load and re-serialize identically") {
    for (const char* name : {"default.json", "legibility.json", "smoke.json"}) {
        const fs::path path = fs::path(CORRTIME_CONFIG_DIR) / name;
        INFO(path.string());
        const auto c = load_config(path);
        CHECK(nlohmann::json::parse(config_to_json(c)) == nlohmann::json::parse(read_file(path)));
    }
    CHECK(config_hash(load_config(fs::path(CORRTIME_CONFIG_DIR) / "default.json")) == config_hash(default_config()));
}

TEST_CASE("hash ignores placement fields and tracks content") {
    auto c = default_config();
    const auto h = config_hash(c);
    c.workers = 7;
    c.output_dir = "/tmp/x";
    CHECK(config_hash(c) == h);
    c.episodes += 1;
    CHECK(config_hash(c) != h);
    c = default_config();
    c.intervener.bias += 1e-9;
    CHECK(config_hash(c) != h);
}

TEST_CASE("content hash is sha256") {
    CHECK(content_hash("") == "e3b0c44298fc1c14");
    CHECK(content_hash("abc") == "ba7816bf8f01cfea");
}

TEST_CASE("malformed configs are rejected") {
    CHECK_THROWS_AS(config_from_json("{not json"), ConfigError);
    auto j = default_json();
    j["bogus"] = 1;
    CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
    j = default_json();
    j["simulation"]["typo"] = 1;
    CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
    j = default_json();
    j["version"] = 2;
    CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
    j = default_json();
    j["format"] = "other";
    CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
    j = default_json();
    j["simulation"]["episodes"] = 10;
    CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
    j = default_json();
    j["simulation"]["episodes"] = -5;
    CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
    j = default_json();
    j["evaluation"]["percentiles"] = nlohmann::json::array({0.0});
    CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
    j = default_json();
    j["intervener"]["terms"][0]["feature"] = 8;
    CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/corrtime.json"), ConfigError);
}

TEST_CASE("intervener features are 1-based in json") {
    const auto j = intervener_to_json(default_intervener());
    CHECK(j["terms"][0]["feature"] == 6);
    CHECK(j["terms"][1]["feature"] == 3);
    const auto back = intervener_from_json(j);
    CHECK(back.terms[0].feature == kDistanceToGoal);
    CHECK(back.terms[1].feature == kDirectness);
    CHECK(intervener_to_json(legibility_intervener())["terms"][1]["feature"] == 5);
}

TEST_CASE("output root resolution") {
    auto c = default_config();
    c.output_dir = "explicit";
    CHECK(c.resolved_output_dir() == fs::path("explicit"));
    c.output_dir.clear();
    ::setenv("CORRTIME_OUTPUT_ROOT", "/tmp/elsewhere", 1);
    CHECK(c.resolved_output_dir() == fs::path("/tmp/elsewhere"));
    ::unsetenv("CORRTIME_OUTPUT_ROOT");
    CHECK(c.resolved_output_dir() == fs::path("runs"));
    c.workers = 3;
    CHECK(c.resolved_workers() == 3);
    c.workers = 0;
    CHECK(c.resolved_workers() >= 1);
}

TEST_CASE("atomic write replaces content and leaves no temporaries") {
    const auto dir = scratch("atomic");
    const auto f = dir / "sub" / "out.txt";
    atomic_write(f, "first");
    atomic_write(f, "second");
    CHECK(read_file(f) == "second");
    std::size_t n = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir / "sub")) ++n;
    CHECK(n == 1);
    CHECK_THROWS_AS(read_file(dir / "missing"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("dataset directory round trip and tamper detection") {
    auto c = default_config();
    c.episodes = 60;
    c.simulation.min_length = 20;
    c.simulation.max_length = 30;
    const auto d = gen_dataset(c.layout, c.intervener, c.simulation, c.episodes, c.dataset_seed, 2);
    const auto dir = scratch("dataset");
    write_dataset(dir, d, c);
    const auto loaded = read_dataset(dir);
    CHECK(loaded.config_hash == config_hash(c));
    REQUIRE(loaded.dataset.episodes.size() == d.episodes.size());
    for (std::size_t i = 0; i < d.episodes.size(); ++i) {
        const auto& a = loaded.dataset.episodes[i];
        const auto& b = d.episodes[i];
        CHECK(a.trajectory.id == b.trajectory.id);
        CHECK(a.trajectory.positions == b.trajectory.positions);
        CHECK(a.correction.has_value() == b.correction.has_value());
        if (a.correction && b.correction) {
            CHECK(a.correction->t_c == b.correction->t_c);
            CHECK(a.correction->c_l == b.correction->c_l);
        }
        CHECK(a.intended_goal_id == b.intended_goal_id);
    }
    CHECK(loaded.dataset.corrected_count() == d.corrected_count());

    const auto again = dir / "again";
    write_dataset(again, loaded.dataset, c);
    CHECK(read_file(DatasetFiles::in(again).episodes) == read_file(DatasetFiles::in(dir).episodes));

    {
        std::ofstream os(DatasetFiles::in(dir).episodes, std::ios::app);
        os << " ";
    }
    CHECK_THROWS_AS(read_dataset(dir), IoError);
    CHECK_THROWS_AS(read_dataset(dir / "nowhere"), IoError);
    fs::remove_all(dir);
}
