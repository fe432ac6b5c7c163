#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lfuse/cli.hpp"
#include "lfuse/datahub.hpp"
#include "lfuse/errors.hpp"
#include "lfuse/evalkit.hpp"
#include "lfuse/run_config.hpp"
#include "lfuse/util.hpp"
#include "support.hpp"

using namespace lfuse;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "lfuse");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string line_after(const std::string& text, const std::string& key) {
    const auto at = text.find(key);
    if (at == std::string::npos) return {};
    const auto start = at + key.size();
    return text.substr(start, text.find('\n', start) - start);
}

// Snapshot of every file under a directory (path -> content hash).
std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = sha256_hex(read_text(e.path()));
    return out;
}

// Small settings shared by the pipeline tests.
const std::vector<std::string> kSmall{"--set", "datahub.size=64",
                                      "--set", "lesion_locator.steps=150",
                                      "--set", "trainer.image_size=64",
                                      "--set", "trainer.crop.fallback_size=32",
                                      "--set", "extractors.width=32"};

std::vector<std::string> with_small(std::vector<std::string> args) {
    std::vector<std::string> out = kSmall;
    out.insert(out.end(), args.begin(), args.end());
    return out;
}

}  // namespace

TEST_CASE("run configuration provenance") {
    testing::TempDir dir("cfg");
    auto cfg = RunConfig::defaults();
    CHECK(cfg.provenance()["trainer"]["epochs"] == "default");
    atomic_write_text(dir / "c.json", R"({"trainer": {"epochs": 5}, "datahub": {"seed": 3}})");
    cfg.merge_file(dir / "c.json");
    cfg.set("trainer.epochs", "7");
    CHECK(cfg.get("trainer.epochs") == 7);
    CHECK(cfg.provenance()["trainer"]["epochs"] == "flag");
    CHECK(cfg.provenance()["datahub"]["seed"] == "file");
    CHECK(cfg.train().epochs == 7);
    CHECK(cfg.data_seed() == 3);

    CHECK_THROWS_AS(cfg.set("trainer.epoch", "3"), ConfigError);
    CHECK_THROWS_AS(cfg.set("trainer.epochs", "\"many\""), ConfigError);
    CHECK_THROWS_AS(cfg.set("trainer", "3"), ConfigError);
    atomic_write_text(dir / "bad.json", R"({"trainer": {"optimizer": "adam"}})");
    CHECK_THROWS_AS(cfg.merge_file(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(RunConfig::defaults("laptop"), ConfigError);

    // Every leaf has a provenance entry.
    std::function<void(const nlohmann::json&, const nlohmann::json&)> walk = [&](const auto& t, const auto& p) {
        for (auto it = t.begin(); it != t.end(); ++it) {
            REQUIRE(p.contains(it.key()));
            if (it.value().is_object())
                walk(it.value(), p[it.key()]);
            else
                CHECK(p[it.key()].is_string());
        }
    };
    walk(cfg.tree(), cfg.provenance());

    cfg.dump(dir / "resolved.json");
    auto again = RunConfig::defaults();
    again.merge_file(dir / "resolved.json");
    CHECK(again.digest() == cfg.digest());
    CHECK(fs::exists(dir / "resolved.provenance.json"));
}

TEST_CASE("full-scale profile") {
    auto cfg = RunConfig::defaults("full");
    CHECK(cfg.train().batch_size == 256);
    CHECK(cfg.encoder_spec().image_size == 224);
    CHECK(cfg.encoder_spec().depth == 12);
    CHECK(cfg.lora_rank() == 4);
}

TEST_CASE("synth is deterministic") {
    testing::TempDir dir("synth");
    auto a = run({"--run-dir", (dir / "a").string(), "synth", "--n", "10", "--seed", "7"});
    auto b = run({"--run-dir", (dir / "b").string(), "synth", "--n", "10", "--seed", "7"});
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(!line_after(a.out, "config digest: ").empty());
    const auto digest = line_after(a.out, "dataset digest: ");
    CHECK(digest.size() == 64);
    CHECK(digest == line_after(b.out, "dataset digest: "));
    CHECK(fs::exists(dir / "a/dataset/manifest.json"));
    CHECK(fs::exists(dir / "a/resolved_config.json"));
}

TEST_CASE("disabling both branches is a validation error") {
    testing::TempDir dir("nobranch");
    auto r = run({"--run-dir", dir.path().string(), "train", "--data", "nowhere", "--no-lfe", "--no-gfe"});
    CHECK(r.code == 1);
    CHECK(r.err.find("at least one branch required") != std::string::npos);
    CHECK(r.out.find("config digest: ") != std::string::npos);
}

TEST_CASE("validation and runtime failures map to distinct exit codes") {
    testing::TempDir dir("codes");
    CHECK(run({"--run-dir", dir.path().string(), "--set", "trainer.nope=1", "synth"}).code == 1);
    CHECK(run({"--run-dir", dir.path().string(), "synth", "--n", "1", "--size", "32"}).code == 1);
    CHECK(run({"frobnicate"}).code == 1);
    CHECK(run({}).code == 1);
    atomic_write_text(dir / "junk.ckpt", "not a checkpoint");
    auto synth = run({"--run-dir", (dir / "s").string(), "synth", "--n", "2", "--size", "64"});
    REQUIRE(synth.code == 0);
    auto r = run({"--run-dir", (dir / "e").string(), "eval", "--data", (dir / "s/dataset").string(), "--checkpoint",
                  (dir / "junk.ckpt").string()});
    CHECK(r.code == 2);
}

TEST_CASE("a raw image tree with metadata is ingested and split") {
    testing::TempDir dir("ingest");
    write_dataset(generate_synthetic(4, 64, 5), dir / "raw");
    fs::remove(dir / "raw/manifest.json");
    auto r = run(with_small({"--run-dir", (dir / "seg").string(), "finetune-seg", "--data", (dir / "raw").string(),
                             "--steps", "2"}));
    CHECK(r.code == 0);
    CHECK(r.out.find("ingested 12 samples") != std::string::npos);
    CHECK(fs::exists(dir / "seg/segmenter.ckpt"));
    CHECK(!fs::exists(dir / "raw/manifest.json"));

    fs::create_directories(dir / "empty");
    CHECK(run({"--run-dir", (dir / "x").string(), "finetune-seg", "--data", (dir / "empty").string()}).code == 1);
}

TEST_CASE("full chain beats chance and stays inside its run directories") {
    testing::TempDir dir("chain");
    const auto data = (dir / "synth/dataset").string();
    REQUIRE(run(with_small({"--run-dir", (dir / "synth").string(), "synth", "--n", "20", "--seed", "3"})).code == 0);
    const auto data_before = snapshot(data);

    auto seg = run(with_small({"--run-dir", (dir / "seg").string(), "finetune-seg", "--data", data}));
    REQUIRE(seg.code == 0);
    const auto seg_ckpt = (dir / "seg/segmenter.ckpt").string();
    CHECK(fs::exists(seg_ckpt));
    CHECK(fs::exists(dir / "seg/stage1_loss.jsonl"));

    auto train = run(with_small({"--run-dir", (dir / "train").string(), "--set", "trainer.epochs=30", "train", "--data",
                                 data, "--segmenter", seg_ckpt}));
    REQUIRE(train.code == 0);
    CHECK(train.out.find("variant V4") != std::string::npos);

    auto eval = run(with_small({"--run-dir", (dir / "eval").string(), "eval", "--data", data, "--checkpoint",
                                (dir / "train/best.ckpt").string(), "--segmenter", seg_ckpt}));
    REQUIRE(eval.code == 0);
    auto report = load_report(dir / "eval/report.json");
    CHECK(report.accuracy > 1.0 / 3.0);
    CHECK(report.dice_summary.has_value());
    for (auto cls : {"normal", "benign", "malignant"}) CHECK(fs::exists(dir / ("eval/roc_" + std::string(cls) + ".png")));

    auto cam = run(with_small({"--run-dir", (dir / "cam").string(), "gradcam", "--data", data, "--checkpoint",
                               (dir / "train/best.ckpt").string(), "--segmenter", seg_ckpt, "--count", "3"}));
    REQUIRE(cam.code == 0);
    int heatmaps = 0;
    for (const auto& e : fs::directory_iterator(dir / "cam/gallery")) heatmaps += e.is_regular_file();
    CHECK(heatmaps == 3);

    auto named = run(with_small({"--run-dir", (dir / "cam2").string(), "gradcam", "--data", data, "--checkpoint",
                                 (dir / "train/best.ckpt").string(), "--segmenter", seg_ckpt, "--images",
                                 "malignant/img_0000.png"}));
    CHECK(named.code == 0);

    auto preview = run(with_small({"--run-dir", (dir / "preview").string(), "segment", "--data", data,
                                   "--checkpoint", seg_ckpt}));
    REQUIRE(preview.code == 0);
    CHECK(fs::exists(dir / "preview/segmentation.json"));
    CHECK(!fs::is_empty(dir / "preview/masks"));
    CHECK(!fs::is_empty(dir / "preview/crops"));

    // Single-branch training through the flags.
    auto v1 = run(with_small({"--run-dir", (dir / "v1").string(), "--set", "trainer.epochs=1", "train", "--data", data,
                              "--segmenter", seg_ckpt, "--no-lfe"}));
    CHECK(v1.code == 0);
    CHECK(v1.out.find("variant V1") != std::string::npos);

    // Feeding the resolved configuration back reproduces the run.
    auto replay = run({"--config", (dir / "train/resolved_config.json").string(), "--run-dir",
                       (dir / "replay").string(), "train", "--data", data, "--segmenter", seg_ckpt});
    REQUIRE(replay.code == 0);
    CHECK(line_after(replay.out, "config digest: ") == line_after(train.out, "config digest: "));
    CHECK(read_text(dir / "replay/metrics.jsonl") == read_text(dir / "train/metrics.jsonl"));

    CHECK(snapshot(data) == data_before);
}
