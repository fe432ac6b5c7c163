#include "lfuse/trainer.hpp"

#include <cmath>
#include <fstream>

#include "lfuse/checkpoint.hpp"
#include "lfuse/errors.hpp"
#include "lfuse/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lfuse {

// ---------------------------------------------------------------- configuration

void AblationFlags::validate() const {
    if (!use_gfe && !use_lfe) throw ConfigError("at least one branch required");
    if (use_gfo && !(use_gfe && use_lfe)) throw ConfigError("GFO requires both the global and the local branch");
}

std::string AblationFlags::variant() const {
    if (use_gfe && !use_lfe && !use_gfo) return "V1";
    if (!use_gfe && use_lfe && !use_gfo) return "V2";
    if (use_gfe && use_lfe && !use_gfo) return "V3";
    if (use_gfe && use_lfe && use_gfo) return "V4";
    return "custom";
}

json AblationFlags::to_json() const { return {{"use_gfe", use_gfe}, {"use_lfe", use_lfe}, {"use_gfo", use_gfo}}; }

AblationFlags AblationFlags::from_json(const json& j) {
    return {j.at("use_gfe").get<bool>(), j.at("use_lfe").get<bool>(), j.at("use_gfo").get<bool>()};
}

void TrainConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("trainer.lr must be positive");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("trainer.lr_decay must lie in (0,1]");
    if (momentum < 0 || weight_decay < 0) throw ConfigError("trainer.momentum and weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("trainer.batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("trainer.epochs must be >= 0");
    if (image_size < kMinExtractorInput) throw ConfigError("trainer.image_size must be >= 32");
    if (crop.fallback_size < 1 || crop.margin < 0) throw ConfigError("invalid crop options");
    encoder_preset(extractor.preset);
    ablation.validate();
}

json TrainConfig::to_json() const {
    return {{"lr", lr},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"lr_decay", lr_decay},
            {"loss_weights", loss_weights.to_json()},
            {"augment", augment.to_json()},
            {"ablation", ablation.to_json()},
            {"seed", seed},
            {"image_size", image_size},
            {"extractor", extractor.to_json()},
            {"crop", {{"margin", crop.margin}, {"fallback_size", crop.fallback_size}}},
            {"mask_source", mask_source == MaskSource::predicted ? "predicted" : "ground_truth"},
            {"adversarial_mode", to_string(adversarial_mode)}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.lr_decay = j.at("lr_decay").get<double>();
    c.loss_weights = LossWeights::from_json(j.at("loss_weights"));
    c.augment = AugmentPolicy::from_json(j.at("augment"));
    c.ablation = AblationFlags::from_json(j.at("ablation"));
    c.seed = j.at("seed").get<std::uint64_t>();
    c.image_size = j.at("image_size").get<int>();
    c.extractor = ExtractorConfig::from_json(j.at("extractor"));
    c.crop.margin = j.at("crop").at("margin").get<int>();
    c.crop.fallback_size = j.at("crop").at("fallback_size").get<int>();
    const auto source = j.at("mask_source").get<std::string>();
    if (source != "predicted" && source != "ground_truth") throw ConfigError("unknown mask_source '" + source + "'");
    c.mask_source = source == "predicted" ? MaskSource::predicted : MaskSource::ground_truth;
    c.adversarial_mode = parse_adversarial_mode(j.at("adversarial_mode").get<std::string>());
    return c;
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::full() {
    TrainConfig c;
    c.batch_size = 256;
    c.epochs = 60;
    c.image_size = 224;
    c.extractor.preset = "resnet50";
    c.extractor.width = 256;
    c.crop.fallback_size = 256;
    return c;
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(std::max(0, epoch)));
}

// ---------------------------------------------------------------- model

DualBranchNetImpl::DualBranchNetImpl(const ExtractorConfig& extractor, const AblationFlags& flags)
    : extractor_(extractor), flags_(flags) {
    flags.validate();
    if (flags.use_gfe) gfe = register_module("gfe", FeatureExtractor(extractor, Branch::global));
    if (flags.use_lfe) lfe = register_module("lfe", FeatureExtractor(extractor, Branch::local));
    heads = register_module("heads", ClassifierHeads(extractor.feature_dim(), flags.use_gfe, flags.use_lfe));
    if (flags.use_gfo) discriminator = register_module("discriminator", Discriminator(extractor.feature_dim()));
}

DualBranchOutput DualBranchNetImpl::forward(const torch::Tensor& global_batch, const torch::Tensor& local_batch) {
    DualBranchOutput out;
    if (gfe) out.f_g = gfe(global_batch);
    if (lfe) out.f_l = lfe(local_batch);
    out.preds = heads(out.f_g, out.f_l);
    return out;
}

torch::Tensor normalize_input(const torch::Tensor& image) {
    auto mean = torch::tensor({0.485f, 0.456f, 0.406f}, image.options()).view({3, 1, 1});
    auto std = torch::tensor({0.229f, 0.224f, 0.225f}, image.options()).view({3, 1, 1});
    return (image - mean) / std;
}

BranchInputs prepare_inputs(const torch::Tensor& image, const torch::Tensor& lesion_mask, const TrainConfig& cfg) {
    const int64_t s = cfg.image_size;
    BranchInputs in;
    if (cfg.ablation.use_gfe) in.global = normalize_input(resize_image(image, s, s));
    if (cfg.ablation.use_lfe) {
        auto crop = crop_lesion(image, lesion_mask, cfg.crop);
        in.local = normalize_input(resize_image(crop, s, s));
    }
    return in;
}

std::vector<torch::Tensor> lesion_masks_for(const Dataset& dataset, Segmenter* segmenter, MaskSource source) {
    std::vector<torch::Tensor> masks;
    masks.reserve(dataset.samples.size());
    if (source == MaskSource::predicted) {
        if (segmenter == nullptr) throw ConfigError("predicted lesion masks need a stage-1 segmenter checkpoint");
        std::vector<torch::Tensor> images;
        for (const auto& s : dataset.samples) images.push_back(s.image);
        for (auto& m : predict_masks(*segmenter, images)) masks.push_back(m.mask);
        return masks;
    }
    for (const auto& s : dataset.samples)
        masks.push_back(s.mask ? *s.mask : torch::zeros({s.image.size(1), s.image.size(2)}));
    return masks;
}

namespace {

torch::Tensor stack_or_empty(const std::vector<torch::Tensor>& v) { return v.empty() ? torch::Tensor() : torch::stack(v); }

struct Batch {
    torch::Tensor global, local, labels;
};

Batch build_batch(const Dataset& dataset, const std::vector<std::size_t>& ids, const std::vector<torch::Tensor>& masks,
                  const TrainConfig& cfg, bool train, std::uint64_t aug_salt) {
    std::vector<torch::Tensor> g, l;
    std::vector<int64_t> y;
    for (std::size_t b = 0; b < ids.size(); ++b) {
        const auto i = ids[b];
        torch::Tensor image = dataset.samples[i].image, mask = masks[i];
        if (train && cfg.augment.any()) {
            ImageSample s;
            s.image = image;
            s.mask = mask;
            auto aug = augment(s, cfg.augment, derive_seed(cfg.seed, aug_salt + b));
            image = aug.image;
            mask = *aug.mask;
        }
        auto in = prepare_inputs(image, mask, cfg);
        if (in.global.defined()) g.push_back(in.global);
        if (in.local.defined()) l.push_back(in.local);
        y.push_back(static_cast<int64_t>(dataset.samples[i].label));
    }
    return {stack_or_empty(g), stack_or_empty(l), torch::tensor(y, torch::kLong)};
}

std::vector<std::pair<torch::Tensor, torch::Tensor>> snapshot(torch::nn::Module& m) {
    std::vector<std::pair<torch::Tensor, torch::Tensor>> out;
    for (auto& p : m.parameters()) out.emplace_back(p, p.detach().clone());
    for (auto& b : m.buffers()) out.emplace_back(b, b.detach().clone());
    return out;
}

void restore(const std::vector<std::pair<torch::Tensor, torch::Tensor>>& snap) {
    torch::NoGradGuard guard;
    for (const auto& [dst, src] : snap) dst.copy_(src);
}

}  // namespace

SplitPredictions predict_split(DualBranchNet& model, const Dataset& dataset, const std::vector<std::size_t>& indices,
                               const std::vector<torch::Tensor>& masks, const TrainConfig& cfg) {
    torch::NoGradGuard guard;
    model->eval();
    SplitPredictions out;
    out.indices = indices;
    std::vector<torch::Tensor> ens, yg, yl, yf;
    constexpr std::size_t chunk = 32;
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
        std::vector<std::size_t> ids(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                     indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + chunk)));
        auto batch = build_batch(dataset, ids, masks, cfg, false, 0);
        auto res = model->forward(batch.global, batch.local);
        ens.push_back(res.preds.y_ensemble);
        if (res.preds.y_g.defined()) yg.push_back(res.preds.y_g);
        if (res.preds.y_l.defined()) yl.push_back(res.preds.y_l);
        if (res.preds.y_f.defined()) yf.push_back(res.preds.y_f);
    }
    for (auto i : indices) out.labels.push_back(static_cast<int>(dataset.samples[i].label));
    out.ensemble = ens.empty() ? torch::zeros({0, 3}) : torch::cat(ens);
    auto cat = [](const std::vector<torch::Tensor>& v) { return v.empty() ? torch::Tensor() : torch::cat(v); };
    out.heads = make_prediction_triple(cat(yg), cat(yl), cat(yf));
    if (!out.heads.y_ensemble.defined()) out.heads.y_ensemble = out.ensemble;
    return out;
}

json EpochMetrics::to_json() const {
    return {{"epoch", epoch},         {"lr", lr},   {"loss", loss},
            {"l_f", l_f},             {"l_g", l_g}, {"l_l", l_l},
            {"l_s", l_s},             {"l_d", l_d}, {"train_accuracy", train_accuracy},
            {"val_accuracy", val_accuracy}, {"val_macro_f1", val_macro_f1}};
}

EpochMetrics EpochMetrics::from_json(const json& j) {
    EpochMetrics m;
    m.epoch = j.at("epoch").get<int>();
    m.lr = j.at("lr").get<double>();
    m.loss = j.at("loss").get<double>();
    m.l_f = j.at("l_f").get<double>();
    m.l_g = j.at("l_g").get<double>();
    m.l_l = j.at("l_l").get<double>();
    m.l_s = j.at("l_s").get<double>();
    m.l_d = j.at("l_d").get<double>();
    m.train_accuracy = j.at("train_accuracy").get<double>();
    m.val_accuracy = j.at("val_accuracy").get<double>();
    m.val_macro_f1 = j.at("val_macro_f1").get<double>();
    return m;
}

std::unique_ptr<torch::optim::SGD> make_optimizer(torch::nn::Module& model, const TrainConfig& cfg) {
    std::vector<torch::Tensor> decay, no_decay;
    for (auto& p : model.parameters()) {
        if (!p.requires_grad()) continue;
        (p.dim() <= 1 ? no_decay : decay).push_back(p);
    }
    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(decay, std::make_unique<torch::optim::SGDOptions>(
                                   torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay)));
    groups.emplace_back(no_decay, std::make_unique<torch::optim::SGDOptions>(
                                      torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).weight_decay(0.0)));
    return std::make_unique<torch::optim::SGD>(groups, torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum));
}

TrainResult train_stage2(const Dataset& dataset, Segmenter* segmenter, const TrainConfig& cfg, const fs::path& run_dir,
                         const std::function<void(const EpochMetrics&)>& on_epoch) {
    cfg.validate();
    const auto train_ids = dataset.indices_of(Split::train);
    const auto val_ids = dataset.indices_of(Split::val);
    if (train_ids.empty()) throw ConfigError("train split is empty");

    TrainResult result;
    if (segmenter) result.segmenter_digest_before = tensor_digest((*segmenter)->parameters());
    const auto masks = lesion_masks_for(dataset, segmenter, cfg.mask_source);

    torch::manual_seed(cfg.seed);
    DualBranchNet model(cfg.extractor, cfg.ablation);
    auto optimizer = make_optimizer(*model, cfg);
    const GfoOptions gfo{cfg.ablation.use_gfo, cfg.adversarial_mode};

    std::ofstream metrics_log;
    if (!run_dir.empty()) {
        fs::create_directories(run_dir);
        atomic_write_text(run_dir / "config.json", cfg.to_json().dump(2) + "\n");
        metrics_log.open(run_dir / "metrics.jsonl", std::ios::trunc);
    }

    std::vector<std::pair<torch::Tensor, torch::Tensor>> best_state;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg, epoch);
        for (auto& group : optimizer->param_groups())
            static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);

        model->train();
        auto order = epoch_order(train_ids.size(), cfg.seed, epoch);
        EpochMetrics m;
        m.epoch = epoch;
        m.lr = lr;
        double seen = 0, correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> ids;
            for (auto k = start; k < end; ++k) ids.push_back(train_ids[order[k]]);
            auto batch = build_batch(dataset, ids, masks, cfg, true,
                                     (static_cast<std::uint64_t>(epoch) << 32) + start);
            auto out = model->forward(batch.global, batch.local);
            auto losses = total_loss(out.preds, batch.labels, out.f_g, out.f_l,
                                     cfg.ablation.use_gfo ? &model->discriminator : nullptr, cfg.loss_weights, gfo);
            optimizer->zero_grad();
            losses.l_total.backward();
            optimizer->step();

            const double n = static_cast<double>(ids.size());
            seen += n;
            m.loss += losses.l_total.item<double>() * n;
            m.l_f += losses.l_f.item<double>() * n;
            m.l_g += losses.l_g.item<double>() * n;
            m.l_l += losses.l_l.item<double>() * n;
            m.l_s += losses.l_s.item<double>() * n;
            m.l_d += losses.l_d.item<double>() * n;
            correct += out.preds.y_ensemble.argmax(1).eq(batch.labels).sum().item<double>();
        }
        for (double* v : {&m.loss, &m.l_f, &m.l_g, &m.l_l, &m.l_s, &m.l_d}) *v /= seen;
        m.train_accuracy = correct / seen;

        if (!val_ids.empty()) {
            auto preds = predict_split(model, dataset, val_ids, masks, cfg);
            auto report = classification_metrics(preds.ensemble, preds.labels);
            m.val_accuracy = report.accuracy;
            m.val_macro_f1 = report.macro_f1;
        }
        result.history.push_back(m);
        if (metrics_log.is_open()) metrics_log << m.to_json().dump() << '\n' << std::flush;
        if (on_epoch) on_epoch(m);

        const double score = val_ids.empty() ? -m.loss : m.val_macro_f1;
        if (result.best_epoch < 0 || score >= result.best_val_f1) {
            result.best_epoch = epoch;
            result.best_val_f1 = score;
            best_state = snapshot(*model);
            if (!run_dir.empty()) {
                result.best_checkpoint = run_dir / "best.ckpt";
                save_stage2(result.best_checkpoint, model, cfg, epoch, result.history);
            }
        }
    }
    if (!run_dir.empty()) save_stage2(run_dir / "last.ckpt", model, cfg, cfg.epochs - 1, result.history);
    if (!best_state.empty()) restore(best_state);
    model->eval();
    result.model = model;
    if (segmenter) result.segmenter_digest_after = tensor_digest((*segmenter)->parameters());
    return result;
}

// ---------------------------------------------------------------- checkpoints

void save_stage2(const fs::path& path, const DualBranchNet& model, const TrainConfig& cfg, int epoch,
                 const std::vector<EpochMetrics>& history) {
    json meta;
    meta["kind"] = "dual_branch";
    meta["config"] = cfg.to_json();
    meta["ablation"] = model->flags().to_json();
    meta["extractor"] = model->extractor_config().to_json();
    meta["loss_weights"] = cfg.loss_weights.to_json();
    meta["epoch"] = epoch;
    json hist = json::array();
    for (const auto& h : history) hist.push_back(h.to_json());
    meta["history"] = hist;
    write_checkpoint(path, meta, [&](torch::serialize::OutputArchive& archive) {
        if (model->gfe) write_module(archive, "gfe", *model->gfe);
        if (model->lfe) write_module(archive, "lfe", *model->lfe);
        write_module(archive, "heads", *model->heads);
        if (model->discriminator) write_module(archive, "discriminator", *model->discriminator);
    });
}

LoadedModel load_stage2(const fs::path& path, const std::optional<AblationFlags>& expected) {
    auto reader = open_checkpoint(path, "dual_branch");
    LoadedModel out;
    try {
        out.config = TrainConfig::from_json(reader.meta.at("config"));
        out.epoch = reader.meta.at("epoch").get<int>();
        for (const auto& h : reader.meta.at("history")) out.history.push_back(EpochMetrics::from_json(h));
    } catch (const json::exception& e) {
        throw CheckpointError("malformed checkpoint header in " + path.string() + ": " + e.what());
    }
    const auto stored = AblationFlags::from_json(reader.meta.at("ablation"));
    if (expected && !(*expected == stored))
        throw TopologyMismatch("checkpoint " + path.string() + " holds topology " + stored.variant() + " " +
                               stored.to_json().dump() + " but " + expected->variant() + " " +
                               expected->to_json().dump() + " was requested");
    out.model = DualBranchNet(ExtractorConfig::from_json(reader.meta.at("extractor")), stored);
    if (out.model->gfe) read_module(reader.archive, "gfe", *out.model->gfe);
    if (out.model->lfe) read_module(reader.archive, "lfe", *out.model->lfe);
    read_module(reader.archive, "heads", *out.model->heads);
    if (out.model->discriminator) read_module(reader.archive, "discriminator", *out.model->discriminator);
    out.model->eval();
    return out;
}

}  // namespace lfuse
