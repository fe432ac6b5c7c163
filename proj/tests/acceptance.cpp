// Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any fails.
// Usage: acceptance [work_dir]   (default ./acceptance_runs, wiped on start)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lfuse/cli.hpp"
#include "lfuse/datahub.hpp"
#include "lfuse/evalkit.hpp"
#include "lfuse/fusion_gfo.hpp"
#include "lfuse/gradcam.hpp"
#include "lfuse/lesion_locator.hpp"
#include "lfuse/run_config.hpp"
#include "lfuse/trainer.hpp"
#include "lfuse/util.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace lfuse;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Pinned tolerances and budgets.
constexpr double kLossTol = 1e-6;
constexpr int kLossCases = 60;
constexpr double kGradRelTol = 1e-3;
constexpr double kGradFloor = 1e-6;  // relative error denominator floor
constexpr double kFdStep = 1e-6;
constexpr int kGradSeeds = 20;
constexpr int kLoraInputs = 10;
constexpr int kLoraSteps = 100;
constexpr int kCropMasks = 100;
constexpr double kMinDice = 0.70;
constexpr double kMinAccuracy = 0.85;
constexpr double kAblationBand = 0.02;
constexpr int kAblationSeeds = 3;
constexpr double kMetricTol = 1e-4;
constexpr int kCamImages = 20;
constexpr int kCamMinWins = 15;
constexpr int kRandomBoxes = 32;

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Check {
    bool ok = true;
    std::string first_failure;
    void expect(bool cond, const std::string& what) {
        if (!cond && ok) first_failure = what;
        ok = ok && cond;
    }
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s << std::setprecision(digits) << v;
    return s.str();
}

const auto kF64 = torch::TensorOptions().dtype(torch::kDouble);

oracle::Mat rows(const torch::Tensor& t) {
    oracle::Mat out;
    for (int64_t i = 0; i < t.size(0); ++i) out.push_back(testing::to_vector(t[i]));
    return out;
}

std::vector<int> ints(const torch::Tensor& labels) {
    std::vector<int> out;
    for (int64_t i = 0; i < labels.size(0); ++i) out.push_back(static_cast<int>(labels[i].item<int64_t>()));
    return out;
}

oracle::Linear linear_of(const torch::nn::Linear& fc) { return {rows(fc->weight), testing::to_vector(fc->bias)}; }

// ---------------------------------------------------------------- criterion 1

Outcome loss_oracles() {
    std::mt19937_64 rng(101);
    double worst_s = 0, worst_d = 0, worst_t = 0;
    for (int trial = 0; trial < kLossCases; ++trial) {
        torch::manual_seed(1000 + trial);
        const int64_t batch = 1 + static_cast<int64_t>(rng() % 7);
        const int64_t dim = 2 + static_cast<int64_t>(rng() % 11);
        auto fg = torch::randn({batch, dim}, kF64), fl = torch::randn({batch, dim}, kF64);
        auto y = torch::randint(0, 3, {batch}, torch::kLong);

        worst_s = std::max(worst_s, std::abs(similarity_loss(fg, fl, y).item<double>() -
                                             oracle::similarity(rows(fg), rows(fl), ints(y))));

        Discriminator d(dim);
        d->to(torch::kDouble);
        {
            torch::NoGradGuard g;
            d->fc->bias.fill_(std::normal_distribution<double>(0.0, 1.0)(rng));
        }
        worst_d = std::max(worst_d, std::abs(discrimination_loss(d, fg, fl).item<double>() -
                                             oracle::discrimination(rows(fg), rows(fl), testing::to_vector(d->fc->weight),
                                                                    d->fc->bias.item<double>())));

        ClassifierHeads heads(dim, true, true);
        heads->to(torch::kDouble);
        LossWeights w{std::uniform_real_distribution<double>(0.1, 2.0)(rng),
                      std::uniform_real_distribution<double>(0.0, 1.0)(rng),
                      std::uniform_real_distribution<double>(0.0, 0.1)(rng)};
        auto b = total_loss(heads(fg, fl), y, fg, fl, &d, w);
        auto ref = oracle::objective(rows(fg), rows(fl), ints(y), linear_of(heads->fc_g), linear_of(heads->fc_l),
                                     linear_of(heads->fc_f), testing::to_vector(d->fc->weight),
                                     d->fc->bias.item<double>(), w.alpha, w.beta, w.gamma);
        worst_t = std::max(worst_t, std::abs(b.l_total.item<double>() - ref.total));
    }

    // No tumour samples: the similarity term is defined as zero.
    auto normal_only = similarity_loss(torch::randn({5, 8}, kF64), torch::randn({5, 8}, kF64),
                                       torch::zeros({5}, torch::kLong))
                           .item<double>();

    // All five components equal to one give 2.32 under the default weights.
    const LossWeights w;
    const double p_true = std::exp(-1.0);
    auto probs = torch::tensor({{p_true, (1 - p_true) / 2, (1 - p_true) / 2}, {(1 - p_true) / 2, p_true, (1 - p_true) / 2}},
                               kF64);
    auto preds = make_prediction_triple(probs, probs, probs);
    auto fg = torch::tensor({{1.0, 0.0}, {1.0, 0.0}}, kF64);
    auto fl = torch::tensor({{0.0, 1.0}, {0.0, 1.0}}, kF64);
    double lo = 0, hi = 10;  // bias with (softplus(b) + softplus(-b)) / 2 = 1
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (0.5 * (std::log1p(std::exp(mid)) + std::log1p(std::exp(-mid))) < 1.0 ? lo : hi) = mid;
    }
    Discriminator d(2);
    d->to(torch::kDouble);
    {
        torch::NoGradGuard g;
        d->fc->weight.zero_();
        d->fc->bias.fill_(lo);
    }
    const double fixture = total_loss(preds, torch::tensor({0, 1}, torch::kLong), fg, fl, &d, w).l_total.item<double>();

    Check c;
    c.expect(worst_s <= kLossTol, "similarity |d| " + fmt(worst_s));
    c.expect(worst_d <= kLossTol, "discrimination |d| " + fmt(worst_d));
    c.expect(worst_t <= kLossTol, "total |d| " + fmt(worst_t));
    c.expect(normal_only == 0.0, "N_t=0 similarity " + fmt(normal_only));
    c.expect(std::abs(weighted_total(1, 1, 1, 1, 1, w) - 2.32) <= kLossTol, "weighted_total fixture");
    c.expect(std::abs(fixture - 2.32) <= kLossTol, "2.32 fixture gave " + fmt(fixture, 10));
    return {c.ok, c.ok ? std::to_string(kLossCases) + " cases each, max |d| " +
                             fmt(std::max({worst_s, worst_d, worst_t})) + ", N_t=0 -> 0, fixture " + fmt(fixture, 8)
                       : c.first_failure};
}

// ---------------------------------------------------------------- criterion 2

Outcome gradient_checks() {
    double worst = 0;
    int coords = 0;
    for (int seed = 0; seed < kGradSeeds; ++seed) {
        torch::manual_seed(seed);
        const int64_t batch = 5;
        auto fg = torch::randn({batch, 8}, kF64).requires_grad_(true);
        auto fl = torch::randn({batch, 8}, kF64).requires_grad_(true);
        auto y = torch::tensor({0, 1, 2, 1, 2}, torch::kLong);
        ClassifierHeads heads(8, true, true);
        Discriminator d(8);
        heads->to(torch::kDouble);
        d->to(torch::kDouble);
        const LossWeights w;
        total_loss(heads(fg, fl), y, fg, fl, &d, w).l_total.backward();

        auto objective = [&](const torch::Tensor& target, int64_t flat, double delta) {
            torch::NoGradGuard g;
            auto view = target.view(-1);
            const double saved = view[flat].item<double>();
            view[flat] = saved + delta;
            auto t = oracle::objective(rows(fg.detach()), rows(fl.detach()), ints(y), linear_of(heads->fc_g),
                                       linear_of(heads->fc_l), linear_of(heads->fc_f),
                                       testing::to_vector(d->fc->weight), d->fc->bias.item<double>(), w.alpha, w.beta,
                                       w.gamma);
            view[flat] = saved;
            return t.total;
        };
        std::vector<torch::Tensor> targets{fg, fl};
        for (const auto& p : heads->parameters()) targets.push_back(p);
        for (const auto& p : d->parameters()) targets.push_back(p);
        for (auto& t : targets) {
            auto grad = t.grad().view(-1);
            for (int64_t k = 0; k < t.numel(); ++k) {
                const double fd = (objective(t, k, kFdStep) - objective(t, k, -kFdStep)) / (2 * kFdStep);
                worst = std::max(worst, testing::relative_error(grad[k].item<double>(), fd, kGradFloor));
                ++coords;
            }
        }
    }
    return {worst <= kGradRelTol,
            std::to_string(kGradSeeds) + " seeds, " + std::to_string(coords) + " coordinates, max rel err " + fmt(worst)};
}

// ---------------------------------------------------------------- criterion 3

Outcome lora_identity() {
    const auto cfg = RunConfig::defaults();
    const auto spec = cfg.encoder_spec();
    Segmenter plain(spec);
    auto adapted = inject_adapters(spec, cfg.lora_rank());
    plain->eval();
    adapted->eval();
    int identical = 0;
    {
        torch::NoGradGuard g;
        for (int i = 0; i < kLoraInputs; ++i) {
            torch::manual_seed(50 + i);
            auto x = torch::rand({2, 3, spec.image_size, spec.image_size});
            identical += plain->forward(x).equal(adapted->forward(x)) ? 1 : 0;
        }
    }
    const auto frozen = adapted->frozen_digest();
    auto data = generate_synthetic(10, 64, 11);
    auto s1 = cfg.stage1();
    s1.steps = kLoraSteps;
    int drifted = 0, steps = 0;
    finetune_segmenter(adapted, data, s1, [&](int, double) {
        ++steps;
        drifted += adapted->frozen_digest() != frozen ? 1 : 0;
    });
    const bool ok = identical == kLoraInputs && drifted == 0 && steps == kLoraSteps;
    return {ok, std::to_string(identical) + "/" + std::to_string(kLoraInputs) + " outputs bit-identical, checksum " +
                    (drifted == 0 ? "constant" : "changed") + " over " + std::to_string(steps) + " steps"};
}

// ---------------------------------------------------------------- criterion 4

std::vector<std::vector<int>> to_grid(const torch::Tensor& mask) {
    auto m = mask.to(torch::kInt32).contiguous();
    std::vector<std::vector<int>> g(static_cast<std::size_t>(m.size(0)));
    for (int64_t r = 0; r < m.size(0); ++r) g[r].assign(m[r].data_ptr<int>(), m[r].data_ptr<int>() + m.size(1));
    return g;
}

Outcome crop_semantics() {
    std::mt19937_64 rng(404);
    int exact = 0;
    for (int trial = 0; trial < kCropMasks; ++trial) {
        const int64_t h = 20 + static_cast<int64_t>(rng() % 70), w = 20 + static_cast<int64_t>(rng() % 70);
        torch::manual_seed(4000 + trial);
        auto mask = (torch::rand({h, w}) > 0.95).to(torch::kFloat);
        const int blobs = 1 + static_cast<int>(rng() % 3);
        for (int b = 0; b < blobs; ++b) {
            const int64_t y = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(h - 8));
            const int64_t x = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(w - 8));
            mask.slice(0, y, y + 2 + static_cast<int64_t>(rng() % 7))
                .slice(1, x, x + 2 + static_cast<int64_t>(rng() % 7))
                .fill_(1.0);
        }
        const int margin = static_cast<int>(rng() % 8);
        auto image = torch::rand({3, h, w});
        auto ref = oracle::largest_component(to_grid(mask));
        const int64_t top = std::max<int64_t>(0, ref.top - margin), left = std::max<int64_t>(0, ref.left - margin);
        const int64_t bottom = std::min<int64_t>(h - 1, ref.bottom + margin);
        const int64_t right = std::min<int64_t>(w - 1, ref.right + margin);
        auto expected = (image * mask.unsqueeze(0)).slice(1, top, bottom + 1).slice(2, left, right + 1);
        exact += crop_lesion(image, mask, CropOptions{margin, 256}).equal(expected) ? 1 : 0;
    }
    int centre_ok = 0;
    const std::vector<std::pair<int64_t, int64_t>> sizes{{512, 512}, {768, 600}};
    for (auto [h, w] : sizes) {
        auto image = torch::rand({3, h, w});
        auto crop = crop_lesion(image, torch::zeros({h, w}), CropOptions{8, 256});
        const int64_t top = (h - 256) / 2, left = (w - 256) / 2;
        centre_ok += crop.equal(image.slice(1, top, top + 256).slice(2, left, left + 256)) ? 1 : 0;
    }
    const bool ok = exact == kCropMasks && centre_ok == static_cast<int>(sizes.size());
    return {ok, std::to_string(exact) + "/" + std::to_string(kCropMasks) + " crops exact, empty-mask centre crop " +
                    std::to_string(centre_ok) + "/" + std::to_string(sizes.size())};
}

// ---------------------------------------------------------------- criterion 7

Outcome metric_fixtures() {
    Check c;
    auto near = [](double a, double b) { return std::abs(a - b) <= kMetricTol; };
    // confusion [[5,0,0],[0,0,5],[0,0,5]]
    std::vector<int> labels, predicted;
    for (int k = 0; k < 15; ++k) labels.push_back(k / 5);
    for (int k = 0; k < 15; ++k) predicted.push_back(k < 5 ? 0 : 2);
    auto r = classification_metrics(labels, predicted);
    c.expect(near(r.accuracy, 10.0 / 15.0), "accuracy");
    c.expect(near(r.macro_precision, (1.0 + 0.0 + 0.5) / 3), "macro precision");
    c.expect(near(r.macro_recall, 2.0 / 3.0), "macro recall");
    c.expect(near(r.macro_f1, (1.0 + 0.0 + 2.0 / 3.0) / 3), "macro F1");
    c.expect(r.confusion[1][2] == 5, "confusion cell");

    // argmax path through the probability overload
    auto probs = torch::tensor({{0.7, 0.2, 0.1}, {0.1, 0.3, 0.6}, {0.2, 0.5, 0.3}, {0.1, 0.1, 0.8}});
    auto rp = classification_metrics(probs, {0, 1, 1, 2});
    c.expect(near(rp.accuracy, 0.75), "probability accuracy");

    c.expect(near(roc_curve({0.9, 0.8, 0.3, 0.1}, {true, true, false, false}).auc, 1.0), "AUC 1");
    c.expect(near(roc_curve({0.5, 0.5, 0.5, 0.5}, {true, false, true, false}).auc, 0.5), "AUC ties");
    const double inverted = roc_curve({0.9, 0.6, 0.4, 0.1}, {true, false, true, false}).auc;
    c.expect(near(inverted, 0.75), "AUC inversion " + fmt(inverted));

    // one-vs-rest AUC against the pairwise oracle
    torch::manual_seed(77);
    auto scores = torch::softmax(torch::randn({40, 3}), 1);
    std::vector<int> y;
    for (int i = 0; i < 40; ++i) y.push_back(i % 3);
    auto curves = roc_auc(scores, y);
    for (int k = 0; k < 3; ++k) {
        std::vector<double> s;
        std::vector<bool> pos;
        for (int i = 0; i < 40; ++i) s.push_back(scores[i][k].item<double>()), pos.push_back(y[i] == k);
        c.expect(near(curves[k].auc, oracle::pairwise_auc(s, pos)), "one-vs-rest AUC class " + std::to_string(k));
    }
    return {c.ok, c.ok ? "confusion fixture, AUC 1/0.5/0.75 and pairwise AUC within " + fmt(kMetricTol) : c.first_failure};
}

// ---------------------------------------------------------------- criteria 5 and 8

struct ChainRun {
    fs::path root;
    fs::path dataset() const { return root / "synth/dataset"; }
    fs::path segmenter() const { return root / "seg/segmenter.ckpt"; }
    fs::path model() const { return root / "train/best.ckpt"; }
    std::string dataset_digest;
};

int cli(const fs::path& log, std::vector<std::string> args) {
    args.insert(args.begin(), "lfuse");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ofstream out(log);
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, out);
}

// synth -> finetune-seg -> train -> eval with the desk defaults.
ChainRun run_chain(const fs::path& root) {
    ChainRun run{root, {}};
    fs::create_directories(root);
    const auto rd = [&](const char* step) { return std::vector<std::string>{"--run-dir", (root / step).string()}; };
    auto step = [&](const char* name, std::vector<std::string> args) {
        auto full = rd(name);
        full.insert(full.end(), args.begin(), args.end());
        if (cli(root / (std::string(name) + ".log"), full) != 0)
            throw std::runtime_error(std::string(name) + " failed, see " + (root / name).string() + ".log");
    };
    step("synth", {"synth"});
    step("seg", {"finetune-seg", "--data", run.dataset().string()});
    step("train", {"train", "--data", run.dataset().string(), "--segmenter", run.segmenter().string()});
    step("eval", {"eval", "--data", run.dataset().string(), "--checkpoint", run.model().string(), "--segmenter",
                  run.segmenter().string()});
    const auto log = read_text(root / "synth.log");
    const auto at = log.find("dataset digest: ");
    if (at != std::string::npos) run.dataset_digest = log.substr(at + 16, 64);
    return run;
}

std::optional<ChainRun> g_chain;

Outcome end_to_end(const fs::path& work) {
    g_chain = run_chain(work / "chain_a");
    const auto seg = json::parse(read_text(g_chain->root / "seg/segmentation.json"));
    const double dice = seg.at("test").at("tumor_mean_dice").get<double>();
    const auto report = load_report(g_chain->root / "eval/report.json");
    const bool ok = dice >= kMinDice && report.accuracy >= kMinAccuracy;
    return {ok, "test tumour Dice " + fmt(dice) + " (>= " + fmt(kMinDice) + "), test accuracy " + fmt(report.accuracy) +
                    " (>= " + fmt(kMinAccuracy) + ")"};
}

Outcome determinism(const fs::path& work) {
    if (!g_chain) return {false, "criterion 5 artefacts missing"};
    auto again = run_chain(work / "chain_b");
    Check c;
    c.expect(!g_chain->dataset_digest.empty() && again.dataset_digest == g_chain->dataset_digest, "dataset digest");
    for (const char* file : {"seg/stage1_loss.jsonl", "seg/segmentation.json", "train/metrics.jsonl",
                             "eval/report.json", "eval/predictions.jsonl"})
        c.expect(read_text(g_chain->root / file) == read_text(again.root / file), std::string(file) + " differs");
    c.expect(sha256_hex(read_text(g_chain->segmenter())) == sha256_hex(read_text(again.segmenter())), "segmenter bytes");
    return {c.ok, c.ok ? "dataset digest, stage-1 loss log, epoch metrics, report and predictions identical"
                       : c.first_failure};
}

// ---------------------------------------------------------------- criterion 6

Outcome ablation_ordering(const fs::path& work) {
    if (!g_chain) return {false, "criterion 5 artefacts missing"};
    const auto cfg = RunConfig::defaults();
    auto dataset = load_dataset(g_chain->dataset());
    auto seg = load_segmenter(g_chain->segmenter());
    const auto test_ids = dataset.indices_of(Split::test);
    const auto masks = lesion_masks_for(dataset, &seg, MaskSource::predicted);

    const std::vector<AblationFlags> variants{{true, false, false}, {true, true, false}, {true, true, true}};
    std::vector<AblationRow> table;
    std::map<std::string, double> mean_acc;
    for (const auto& flags : variants) {
        AblationRow row{flags.variant(), flags.use_gfe, flags.use_lfe, flags.use_gfo};
        for (int seed = 0; seed < kAblationSeeds; ++seed) {
            auto tc = cfg.train();
            tc.ablation = flags;
            tc.seed = static_cast<std::uint64_t>(seed);
            auto result = train_stage2(dataset, &seg, tc, work / "ablation" / (row.variant + "_seed" + std::to_string(seed)));
            auto preds = predict_split(result.model, dataset, test_ids, masks, tc);
            auto r = classification_metrics(preds.ensemble, preds.labels);
            row.accuracy += r.accuracy / kAblationSeeds;
            row.precision += r.macro_precision / kAblationSeeds;
            row.recall += r.macro_recall / kAblationSeeds;
            row.f1 += r.macro_f1 / kAblationSeeds;
        }
        mean_acc[row.variant] = row.accuracy;
        table.push_back(row);
    }
    emit_ablation_table(table, work / "ablation");
    const double v1 = mean_acc["V1"], v3 = mean_acc["V3"], v4 = mean_acc["V4"];
    const bool ok = v4 >= v3 - kAblationBand && v3 >= v1 - kAblationBand;
    return {ok, "mean accuracy V4 " + fmt(v4) + ", V3 " + fmt(v3) + ", V1 " + fmt(v1) + " over " +
                    std::to_string(kAblationSeeds) + " seeds; table in " + (work / "ablation/ablation.md").string()};
}

// ---------------------------------------------------------------- criterion 9

double box_mass(const torch::Tensor& cam, int64_t top, int64_t left, int64_t h, int64_t w, double total) {
    return cam.slice(0, top, top + h).slice(1, left, left + w).sum().item<double>() / total;
}

Outcome gradcam_localisation() {
    if (!g_chain) return {false, "criterion 5 artefacts missing"};
    const auto cfg = RunConfig::defaults();
    auto dataset = load_dataset(g_chain->dataset());
    auto seg = load_segmenter(g_chain->segmenter());
    auto loaded = load_stage2(g_chain->model());

    // Held-out tumour images: the test split first, then validation to reach the count.
    std::vector<std::size_t> pool;
    for (auto split : {Split::test, Split::val})
        for (auto i : dataset.indices_of(split))
            if (is_tumor(dataset.samples[i].label) && dataset.samples[i].mask) pool.push_back(i);
    if (pool.size() < static_cast<std::size_t>(kCamImages))
        return {false, "only " + std::to_string(pool.size()) + " held-out tumour images"};
    pool.resize(kCamImages);
    const auto from_test = std::count_if(pool.begin(), pool.end(),
                                         [&](std::size_t i) { return dataset.samples[i].split == Split::test; });

    std::mt19937_64 rng(909);
    int wins = 0;
    double inside_sum = 0, baseline_sum = 0;
    for (auto i : pool) {
        const auto& s = dataset.samples[i];
        const int64_t H = s.image.size(1), W = s.image.size(2);
        auto mask = predict_mask(seg, s.image, cfg.mask_threshold()).mask;
        auto inputs = prepare_inputs(s.image, mask, loaded.config);
        auto cam = grad_cam(loaded.model, inputs, static_cast<int>(s.label), H, W, Branch::global);
        const double total = cam.sum().item<double>();
        auto box = lesion_box(*s.mask, CropOptions{0, 256});
        double inside = 0, baseline = 0;
        if (total > 0) {
            inside = box_mass(cam, box.top, box.left, box.height, box.width, total);
            std::uniform_int_distribution<int64_t> ty(0, H - box.height), tx(0, W - box.width);
            for (int k = 0; k < kRandomBoxes; ++k)
                baseline += box_mass(cam, ty(rng), tx(rng), box.height, box.width, total) / kRandomBoxes;
        }
        wins += inside > baseline ? 1 : 0;
        inside_sum += inside;
        baseline_sum += baseline;
    }
    return {wins >= kCamMinWins,
            std::to_string(wins) + "/" + std::to_string(kCamImages) + " wins (need " + std::to_string(kCamMinWins) +
                "), mean mass in box " + fmt(inside_sum / kCamImages) + " vs random box " +
                fmt(baseline_sum / kCamImages) + "; " + std::to_string(from_test) + " test + " +
                std::to_string(kCamImages - from_test) + " val images"};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = fs::absolute(argc > 1 ? argv[1] : "acceptance_runs");
    fs::remove_all(work);
    fs::create_directories(work);
    torch::set_num_threads(1);

    struct Criterion {
        int id;
        std::string title;
        double budget_s;  // 0: no runtime bound
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "loss formula oracles", 60, loss_oracles},
        {2, "gradient checks", 120, gradient_checks},
        {3, "LoRA identity and frozen encoder", 120, lora_identity},
        {4, "crop semantics", 60, crop_semantics},
        {5, "synthetic end-to-end", 3600, [&] { return end_to_end(work); }},
        {6, "ablation ordering", 3600, [&] { return ablation_ordering(work); }},
        {7, "metrics and ROC fixtures", 60, metric_fixtures},
        {8, "determinism", 0, [&] { return determinism(work); }},
        {9, "Grad-CAM localisation", 0, gradcam_localisation},
    };

    int failed = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            std::string what = e.what();
            o = {false, "exception: " + what.substr(0, what.find('\n'))};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.budget_s > 0 && secs > c.budget_s) {
            o.pass = false;
            o.detail += "; over the " + fmt(c.budget_s) + " s budget";
        }
        failed += o.pass ? 0 : 1;
        std::cout << "criterion " << c.id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << c.title << "  ("
                  << o.detail << "; " << fmt(secs, 3) << " s)" << std::endl;
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
