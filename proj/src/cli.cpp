#include "lfuse/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lfuse/datahub.hpp"
#include "lfuse/errors.hpp"
#include "lfuse/evalkit.hpp"
#include "lfuse/gradcam.hpp"
#include "lfuse/lesion_locator.hpp"
#include "lfuse/run_config.hpp"
#include "lfuse/trainer.hpp"
#include "lfuse/util.hpp"

namespace lfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string profile = "desk";
    std::string config_file;
    std::vector<std::string> sets;
    std::string run_dir;
};

struct Options {
    // synth
    std::optional<int> n, size;
    std::optional<std::uint64_t> seed;
    // shared
    std::string data, checkpoint, segmenter, split;
    std::optional<int> steps, epochs, count;
    bool no_gfe = false, no_lfe = false, no_gfo = false;
    std::vector<std::string> images;
};

fs::path default_run_root() {
    const char* env = std::getenv("LFUSE_RUN_ROOT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

RunConfig resolve(const Common& common, const std::map<std::string, json>& flag_values) {
    auto cfg = RunConfig::defaults(common.profile);
    if (!common.config_file.empty()) cfg.merge_file(common.config_file);
    for (const auto& s : common.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
        cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [key, value] : flag_values) cfg.set_value(key, value);
    return cfg;
}

// A directory written by synth (manifest.json), or a raw per-class image tree with
// metadata.csv, which is ingested and split by patient with the datahub settings.
Dataset load_data_dir(const RunConfig& cfg, const std::string& dir, std::ostream& out) {
    if (dir.empty()) throw ConfigError("--data is required");
    if (fs::exists(fs::path(dir) / "manifest.json")) return load_dataset(dir);
    if (!fs::exists(fs::path(dir) / "metadata.csv"))
        throw ConfigError("no manifest.json or metadata.csv under " + dir);
    auto ingested = ingest_directory(dir);
    for (const auto& issue : ingested.report) out << "skipped " << issue.file << ": " << issue.message << "\n";
    auto& dataset = ingested.dataset;
    dataset.manifest = split_by_patient(dataset.manifest, cfg.fractions(), cfg.data_seed());
    dataset.sync_splits();
    out << "ingested " << dataset.samples.size() << " samples from " << dir << "\n";
    return dataset;
}

std::vector<std::size_t> split_indices(const Dataset& dataset, const std::string& name) {
    auto ids = dataset.indices_of(parse_split(name));
    if (ids.empty()) throw ConfigError("split '" + name + "' is empty");
    return ids;
}

std::string sample_name(const Dataset& dataset, std::size_t i) {
    auto p = fs::path(dataset.manifest.records[i].image_file);
    return p.parent_path().filename().string() + "_" + p.stem().string();
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
    std::string text;
    for (const auto& r : rows) text += r.dump() + "\n";
    atomic_write_text(path, text);
}

int cmd_synth(const RunConfig& cfg, const fs::path& run, std::ostream& out) {
    auto dataset = generate_synthetic(cfg.n_per_class(), cfg.synth_size(), cfg.data_seed());
    dataset.manifest = split_by_patient(dataset.manifest, cfg.fractions(), cfg.data_seed());
    dataset.sync_splits();
    write_dataset(dataset, run / "dataset");
    out << "dataset: " << (run / "dataset").string() << " (" << dataset.samples.size() << " samples)\n";
    out << "dataset digest: " << dataset_digest(dataset) << "\n";
    return kExitOk;
}

int cmd_finetune(const RunConfig& cfg, const Options& o, const fs::path& run, std::ostream& out) {
    const auto s1 = cfg.stage1();
    auto dataset = load_data_dir(cfg, o.data, out);
    auto seg = inject_adapters(cfg.encoder_spec(), cfg.lora_rank());
    const auto frozen_before = seg->frozen_digest();
    std::vector<json> log;
    finetune_segmenter(seg, dataset, s1, [&](int step, double loss) {
        log.push_back({{"step", step}, {"loss", loss}});
        if ((step + 1) % 50 == 0) out << "step " << step + 1 << " loss " << loss << "\n" << std::flush;
    });
    write_jsonl(run / "stage1_loss.jsonl", log);
    if (seg->frozen_digest() != frozen_before) throw Error("frozen encoder weights changed during fine-tuning");
    save_segmenter(seg, run / "segmenter.ckpt");

    json summary;
    for (auto split : {Split::val, Split::test}) {
        auto ids = dataset.indices_of(split);
        if (ids.empty()) continue;
        auto d = dice_summary(seg, dataset, ids, cfg.mask_threshold());
        summary[std::string(to_string(split))] = {{"tumor_mean_dice", d.tumor_mean},
                                                  {"per_class", {d.per_class[0], d.per_class[1], d.per_class[2]}}};
        out << to_string(split) << " tumour mean Dice " << d.tumor_mean << "\n";
    }
    atomic_write_text(run / "segmentation.json", summary.dump(2) + "\n");
    out << "segmenter: " << (run / "segmenter.ckpt").string() << "\n";
    return kExitOk;
}

int cmd_segment(const RunConfig& cfg, const Options& o, const fs::path& run, std::ostream& out) {
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint (stage-1 segmenter) is required");
    if (o.data.empty()) throw ConfigError("--data is required");
    const auto crop = cfg.train().crop;
    auto seg = load_segmenter(o.checkpoint);

    std::vector<std::pair<std::string, torch::Tensor>> items;
    std::optional<Dataset> dataset;
    std::vector<std::size_t> ids;
    if (fs::exists(fs::path(o.data) / "manifest.json")) {
        dataset = load_dataset(o.data);
        ids = o.split.empty() ? dataset->indices_of(Split::test) : split_indices(*dataset, o.split);
        for (auto i : ids) items.emplace_back(sample_name(*dataset, i), dataset->samples[i].image);
    } else {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(o.data)) {
            auto ext = e.path().extension().string();
            if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) items.emplace_back(f.stem().string(), read_image(f));
    }
    if (items.empty()) throw ConfigError("no images found under " + o.data);

    fs::create_directories(run / "masks");
    fs::create_directories(run / "crops");
    std::vector<torch::Tensor> images;
    for (const auto& it : items) images.push_back(it.second);
    auto masks = predict_masks(seg, images, cfg.mask_threshold());
    for (std::size_t k = 0; k < items.size(); ++k) {
        write_mask(run / "masks" / (items[k].first + "_mask.png"), masks[k].mask);
        write_image(run / "crops" / (items[k].first + "_crop.png"), crop_lesion(items[k].second, masks[k], crop));
    }
    if (dataset) {
        auto d = dice_summary(seg, *dataset, ids, cfg.mask_threshold());
        json summary = {{"tumor_mean_dice", d.tumor_mean},
                        {"per_class", {d.per_class[0], d.per_class[1], d.per_class[2]}}};
        atomic_write_text(run / "segmentation.json", summary.dump(2) + "\n");
        out << "tumour mean Dice " << d.tumor_mean << "\n";
    }
    out << "wrote " << items.size() << " masks and crops under " << run.string() << "\n";
    return kExitOk;
}

std::optional<Segmenter> maybe_segmenter(const std::string& path) {
    if (path.empty()) return std::nullopt;
    return load_segmenter(path);
}

int cmd_train(const RunConfig& cfg, const Options& o, const fs::path& run, std::ostream& out) {
    const auto tc = cfg.train();
    auto dataset = load_data_dir(cfg, o.data, out);
    auto seg = maybe_segmenter(o.segmenter);
    if (tc.mask_source == MaskSource::predicted && !seg)
        throw ConfigError("--segmenter is required when trainer.mask_source is 'predicted'");
    out << "variant " << tc.ablation.variant() << " " << tc.ablation.to_json().dump() << "\n";
    auto result = train_stage2(dataset, seg ? &*seg : nullptr, tc, run, [&](const EpochMetrics& m) {
        out << "epoch " << m.epoch << " loss " << m.loss << " train_acc " << m.train_accuracy << " val_acc "
            << m.val_accuracy << " val_f1 " << m.val_macro_f1 << "\n"
            << std::flush;
    });
    if (seg && result.segmenter_digest_before != result.segmenter_digest_after)
        throw Error("segmenter parameters changed during stage 2");
    out << "best epoch " << result.best_epoch << " (val macro-F1 " << result.best_val_f1 << ")\n";
    out << "checkpoint: " << result.best_checkpoint.string() << "\n";
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const Options& o, const fs::path& run, std::ostream& out) {
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    auto dataset = load_data_dir(cfg, o.data, out);
    auto loaded = load_stage2(o.checkpoint);
    auto seg = maybe_segmenter(o.segmenter);
    if (loaded.config.mask_source == MaskSource::predicted && !seg)
        throw ConfigError("--segmenter is required: the checkpoint was trained on predicted masks");
    const auto split = o.split.empty() ? cfg.eval_split() : o.split;
    const auto ids = split_indices(dataset, split);
    const auto masks = lesion_masks_for(dataset, seg ? &*seg : nullptr, loaded.config.mask_source);
    auto preds = predict_split(loaded.model, dataset, ids, masks, loaded.config);
    auto report = classification_metrics(preds.ensemble, preds.labels);
    auto rocs = roc_auc(preds.ensemble, preds.labels);
    if (seg) report.dice_summary = dice_summary(*seg, dataset, ids, cfg.mask_threshold()).per_class;
    emit_report(report, run, &rocs);

    std::vector<json> rows;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        auto p = preds.ensemble[static_cast<int64_t>(k)];
        rows.push_back({{"sample", dataset.manifest.records[ids[k]].image_file},
                        {"label", preds.labels[k]},
                        {"predicted", p.argmax().item<int64_t>()},
                        {"probabilities", {p[0].item<double>(), p[1].item<double>(), p[2].item<double>()}}});
    }
    write_jsonl(run / "predictions.jsonl", rows);
    out << "split " << split << ": accuracy " << report.accuracy << " macro-F1 " << report.macro_f1 << "\n";
    for (const auto& w : report.warnings) out << "warning: " << w << "\n";
    out << "report: " << (run / "report.json").string() << "\n";
    return kExitOk;
}

int cmd_gradcam(const RunConfig& cfg, const Options& o, const fs::path& run, std::ostream& out) {
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    auto dataset = load_data_dir(cfg, o.data, out);
    auto loaded = load_stage2(o.checkpoint);
    auto seg = maybe_segmenter(o.segmenter);
    if (loaded.config.mask_source == MaskSource::predicted && !seg)
        throw ConfigError("--segmenter is required: the checkpoint was trained on predicted masks");

    std::vector<std::size_t> ids;
    if (!o.images.empty()) {
        for (const auto& name : o.images) {
            bool found = false;
            for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
                if (dataset.manifest.records[i].image_file == name || sample_name(dataset, i) == name) {
                    ids.push_back(i);
                    found = true;
                    break;
                }
            }
            if (!found) throw ConfigError("image '" + name + "' is not part of the dataset");
        }
    } else {
        const auto pool = split_indices(dataset, o.split.empty() ? cfg.eval_split() : o.split);
        const auto count = static_cast<std::size_t>(o.count.value_or(cfg.gradcam_count()));
        ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(count, pool.size())));
    }
    const auto tap = loaded.model->gfe ? Branch::global : Branch::local;
    std::vector<GalleryItem> gallery;
    for (auto i : ids) {
        const auto& s = dataset.samples[i];
        torch::Tensor mask;
        if (loaded.config.mask_source == MaskSource::predicted)
            mask = predict_mask(*seg, s.image, cfg.mask_threshold()).mask;
        else
            mask = s.mask ? *s.mask : torch::zeros({s.image.size(1), s.image.size(2)});
        auto inputs = prepare_inputs(s.image, mask, loaded.config);
        int target = 0;
        {
            torch::NoGradGuard guard;
            auto g = inputs.global.defined() ? inputs.global.unsqueeze(0) : torch::Tensor();
            auto l = inputs.local.defined() ? inputs.local.unsqueeze(0) : torch::Tensor();
            target = static_cast<int>(loaded.model->forward(g, l).preds.y_ensemble.argmax(1).item<int64_t>());
        }
        // The local branch sees the crop, so its map is drawn over the crop.
        torch::Tensor base = tap == Branch::global ? s.image : crop_lesion(s.image, mask, loaded.config.crop);
        auto cam = grad_cam(loaded.model, inputs, target, base.size(1), base.size(2), tap);
        gallery.push_back({sample_name(dataset, i) + "_" + std::string(to_string(static_cast<Label>(target))),
                           overlay_heatmap(base, cam)});
    }
    fs::create_directories(run / "gallery");
    for (const auto& item : gallery) write_image(run / "gallery" / (item.name + ".png"), item.image);
    out << "wrote " << gallery.size() << " heatmaps under " << (run / "gallery").string() << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Dual-branch lesion classification pipeline"};
    app.require_subcommand(1);
    Common common;
    Options o;
    app.add_option("--profile", common.profile, "Default configuration profile")
        ->check(CLI::IsMember({"desk", "full"}));
    app.add_option("--config", common.config_file, "JSON configuration file")->check(CLI::ExistingFile);
    app.add_option("--set", common.sets, "Override a configuration key, e.g. trainer.epochs=5");
    app.add_option("--run-dir", common.run_dir, "Output directory (default: $LFUSE_RUN_ROOT/<command>)");

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with patient-level splits");
    synth->add_option("--n", o.n, "Samples per class");
    synth->add_option("--size", o.size, "Image side in pixels");
    synth->add_option("--seed", o.seed, "Generator and split seed");

    auto* finetune = app.add_subcommand("finetune-seg", "Stage 1: fine-tune the segmenter adapters");
    finetune->add_option("--data", o.data, "Dataset directory")->required();
    finetune->add_option("--steps", o.steps, "Optimisation steps");

    auto* segment = app.add_subcommand("segment", "Write predicted masks and lesion crops");
    segment->add_option("--data", o.data, "Dataset or image directory")->required();
    segment->add_option("--checkpoint", o.checkpoint, "Segmenter checkpoint")->required();
    segment->add_option("--split", o.split, "Split to process when --data is a dataset (default: test)");

    auto* train = app.add_subcommand("train", "Stage 2: train the dual-branch classifier");
    train->add_option("--data", o.data, "Dataset directory")->required();
    train->add_option("--segmenter", o.segmenter, "Stage-1 segmenter checkpoint");
    train->add_option("--epochs", o.epochs, "Training epochs");
    train->add_flag("--no-gfe", o.no_gfe, "Disable the global branch");
    train->add_flag("--no-lfe", o.no_lfe, "Disable the local branch");
    train->add_flag("--no-gfo", o.no_gfo, "Disable the feature-alignment losses");

    auto* eval = app.add_subcommand("eval", "Evaluate a stage-2 checkpoint on a split");
    eval->add_option("--data", o.data, "Dataset directory")->required();
    eval->add_option("--checkpoint", o.checkpoint, "Stage-2 checkpoint")->required();
    eval->add_option("--segmenter", o.segmenter, "Stage-1 segmenter checkpoint");
    eval->add_option("--split", o.split, "Split to evaluate");

    auto* gradcam = app.add_subcommand("gradcam", "Grad-CAM heatmap gallery");
    gradcam->add_option("--data", o.data, "Dataset directory")->required();
    gradcam->add_option("--checkpoint", o.checkpoint, "Stage-2 checkpoint")->required();
    gradcam->add_option("--segmenter", o.segmenter, "Stage-1 segmenter checkpoint");
    gradcam->add_option("--split", o.split, "Split to sample from");
    gradcam->add_option("--count", o.count, "Number of images when --images is not given");
    gradcam->add_option("--images", o.images, "Image files (relative to the dataset) or sample names");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitValidation;
    }

    auto* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    try {
        std::map<std::string, json> flags;
        if (o.n) flags["datahub.n_per_class"] = *o.n;
        if (o.size) flags["datahub.size"] = *o.size;
        if (o.seed) flags["datahub.seed"] = *o.seed;
        if (o.steps) flags["lesion_locator.steps"] = *o.steps;
        if (o.epochs) flags["trainer.epochs"] = *o.epochs;
        if (o.no_gfe) flags["trainer.ablation.use_gfe"] = false;
        if (o.no_lfe) flags["trainer.ablation.use_lfe"] = false;
        // The alignment losses compare the two branches, so a single-branch run drops them too.
        if (o.no_gfo || o.no_gfe != o.no_lfe) flags["trainer.ablation.use_gfo"] = false;
        auto cfg = resolve(common, flags);
        out << "config digest: " << cfg.digest() << "\n" << std::flush;
        // Validate the sections a command consumes before touching any data.
        if (name == "train") cfg.train();
        if (name == "finetune-seg") {
            cfg.stage1();
            cfg.encoder_spec();
        }

        const fs::path run = common.run_dir.empty() ? default_run_root() / name : fs::path(common.run_dir);
        fs::create_directories(run);
        cfg.dump(run / "resolved_config.json");

        if (name == "synth") return cmd_synth(cfg, run, out);
        if (name == "finetune-seg") return cmd_finetune(cfg, o, run, out);
        if (name == "segment") return cmd_segment(cfg, o, run, out);
        if (name == "train") return cmd_train(cfg, o, run, out);
        if (name == "eval") return cmd_eval(cfg, o, run, out);
        return cmd_gradcam(cfg, o, run, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const InvalidArgument& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "failure: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace lfuse
