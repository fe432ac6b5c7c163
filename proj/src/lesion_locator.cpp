#include "lfuse/lesion_locator.hpp"

#include <algorithm>
#include <limits>

#include <opencv2/imgproc.hpp>

#include "lfuse/checkpoint.hpp"
#include "lfuse/errors.hpp"
#include "lfuse/util.hpp"

namespace lfuse {

namespace F = torch::nn::functional;

Segmenter inject_adapters(const EncoderSpec& spec, int rank) {
    if (rank <= 0) throw InvalidArgument("LoRA rank must be positive");
    Segmenter segmenter(spec);
    segmenter->inject(rank);
    return segmenter;
}

torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& target, double dice_weight,
                                double ce_weight) {
    constexpr double smooth = 1e-5;
    auto prob = torch::sigmoid(logits);
    auto soft_dice = [&](const torch::Tensor& p, const torch::Tensor& g) {
        auto intersect = (p * g).sum();
        return 1.0 - (2.0 * intersect + smooth) / ((p * p).sum() + (g * g).sum() + smooth);
    };
    auto dice = 0.5 * (soft_dice(prob, target) + soft_dice(1.0 - prob, 1.0 - target));
    auto ce = F::binary_cross_entropy_with_logits(logits, target);
    return dice_weight * dice + ce_weight * ce;
}

Stage1Report finetune_segmenter(Segmenter& segmenter, const Dataset& dataset, const Stage1Config& cfg,
                                const std::function<void(int, double)>& on_step) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i)
        if (dataset.manifest.records[i].split == Split::train && dataset.samples[i].mask) pool.push_back(i);
    if (pool.empty()) throw Error("no samples with ground-truth masks in the train split");

    Stage1Report report;
    if (cfg.steps <= 0) return report;

    const int64_t size = segmenter->spec().image_size;
    std::vector<ImageSample> prepared;
    prepared.reserve(pool.size());
    for (auto i : pool) {
        ImageSample s = dataset.samples[i];
        s.image = resize_image(s.image, size, size);
        s.mask = resize_mask(*s.mask, size, size);
        prepared.push_back(std::move(s));
    }

    segmenter->train();
    torch::optim::AdamW optimizer(segmenter->trainable_parameters(),
                                  torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
    const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));
    int epoch = 0;
    auto order = epoch_order(prepared.size(), cfg.seed, epoch);
    std::size_t cursor = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<torch::Tensor> images, masks;
        for (std::size_t b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                order = epoch_order(prepared.size(), cfg.seed, ++epoch);
                cursor = 0;
            }
            const auto idx = order[cursor++];
            auto aug = augment(prepared[idx], cfg.augment,
                               derive_seed(cfg.seed, (static_cast<std::uint64_t>(step) << 20) + b));
            images.push_back(aug.image);
            masks.push_back(*aug.mask);
        }
        auto x = torch::stack(images);
        auto logits = segmenter->forward(x);
        auto target = torch::stack(masks).unsqueeze(1);
        if (logits.size(-1) != target.size(-1))
            target = F::interpolate(target, F::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{logits.size(2), logits.size(3)})
                                                .mode(torch::kNearest));
        auto loss = segmentation_loss(logits, target, cfg.dice_weight, cfg.ce_weight);
        optimizer.zero_grad();
        loss.backward();
        optimizer.step();
        const double value = loss.item<double>();
        report.loss_history.push_back(value);
        if (on_step) on_step(step, value);
    }
    segmenter->eval();
    return report;
}

std::vector<LesionMask> predict_masks(Segmenter& segmenter, const std::vector<torch::Tensor>& images, double threshold,
                                      int batch_size) {
    torch::NoGradGuard guard;
    segmenter->eval();
    const int64_t size = segmenter->spec().image_size;
    std::vector<LesionMask> out;
    out.reserve(images.size());
    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<torch::Tensor> batch;
        for (auto i = start; i < end; ++i) batch.push_back(resize_image(images[i], size, size));
        auto logits = segmenter->forward(torch::stack(batch));
        for (auto i = start; i < end; ++i) {
            const auto h = images[i].size(1), w = images[i].size(2);
            auto up = F::interpolate(logits.slice(0, i - start, i - start + 1),
                                     F::InterpolateFuncOptions()
                                         .size(std::vector<int64_t>{h, w})
                                         .mode(torch::kBilinear)
                                         .align_corners(false));
            LesionMask m;
            m.mask = (torch::sigmoid(up.squeeze(0).squeeze(0)) > threshold).to(torch::kFloat32);
            m.source = MaskSource::predicted;
            m.threshold_used = threshold;
            out.push_back(std::move(m));
        }
    }
    return out;
}

LesionMask predict_mask(Segmenter& segmenter, const torch::Tensor& image, double threshold) {
    return predict_masks(segmenter, {image}, threshold, 1).front();
}

CropBox lesion_box(const torch::Tensor& mask, const CropOptions& options) {
    if (mask.dim() != 2) throw InvalidArgument("mask must be a [H,W] raster");
    const auto h = mask.size(0), w = mask.size(1);
    auto bin = (mask.detach() > 0.5).to(torch::kUInt8).contiguous();
    cv::Mat m(static_cast<int>(h), static_cast<int>(w), CV_8UC1, bin.data_ptr());
    cv::Mat labels, stats, centroids;
    const int n = cv::connectedComponentsWithStats(m, labels, stats, centroids, 8, CV_32S);

    CropBox box;
    if (n <= 1) {
        box.fallback = true;
        box.height = std::min<int64_t>(options.fallback_size, h);
        box.width = std::min<int64_t>(options.fallback_size, w);
        box.top = (h - box.height) / 2;
        box.left = (w - box.width) / 2;
        return box;
    }
    // Order of first appearance in raster scan, for deterministic tie-breaking.
    std::vector<int64_t> first_seen(static_cast<std::size_t>(n), std::numeric_limits<int64_t>::max());
    for (int y = 0; y < labels.rows; ++y) {
        const int* row = labels.ptr<int>(y);
        for (int x = 0; x < labels.cols; ++x) {
            const int l = row[x];
            if (l > 0 && first_seen[l] == std::numeric_limits<int64_t>::max())
                first_seen[l] = static_cast<int64_t>(y) * w + x;
        }
    }
    int best = 1;
    for (int l = 2; l < n; ++l) {
        const int area = stats.at<int>(l, cv::CC_STAT_AREA), best_area = stats.at<int>(best, cv::CC_STAT_AREA);
        if (area > best_area || (area == best_area && first_seen[l] < first_seen[best])) best = l;
    }
    const int64_t left = stats.at<int>(best, cv::CC_STAT_LEFT), top = stats.at<int>(best, cv::CC_STAT_TOP);
    const int64_t right = left + stats.at<int>(best, cv::CC_STAT_WIDTH);   // exclusive
    const int64_t bottom = top + stats.at<int>(best, cv::CC_STAT_HEIGHT);  // exclusive
    const int64_t margin = std::max(0, options.margin);
    box.left = std::max<int64_t>(0, left - margin);
    box.top = std::max<int64_t>(0, top - margin);
    box.width = std::min<int64_t>(w, right + margin) - box.left;
    box.height = std::min<int64_t>(h, bottom + margin) - box.top;
    return box;
}

torch::Tensor crop_lesion(const torch::Tensor& image, const torch::Tensor& mask, const CropOptions& options) {
    if (image.dim() != 3 || mask.dim() != 2 || image.size(1) != mask.size(0) || image.size(2) != mask.size(1))
        throw InvalidArgument("image and mask must share spatial size");
    const auto box = lesion_box(mask, options);
    auto source = box.fallback ? image : image * (mask > 0.5).to(image.scalar_type()).unsqueeze(0);
    return source.slice(1, box.top, box.top + box.height).slice(2, box.left, box.left + box.width).contiguous();
}

torch::Tensor crop_lesion(const torch::Tensor& image, const LesionMask& mask, const CropOptions& options) {
    return crop_lesion(image, mask.mask, options);
}

double dice_coefficient(const torch::Tensor& pred, const torch::Tensor& gt) {
    if (pred.sizes() != gt.sizes()) throw InvalidArgument("dice_coefficient: mask sizes differ");
    auto p = pred > 0.5, g = gt > 0.5;
    const double inter = torch::logical_and(p, g).sum().item<double>();
    const double total = p.sum().item<double>() + g.sum().item<double>();
    if (total == 0.0) return 1.0;
    return 2.0 * inter / total;
}

double dice_coefficient(const LesionMask& pred, const LesionMask& gt) { return dice_coefficient(pred.mask, gt.mask); }

DiceSummary dice_summary(Segmenter& segmenter, const Dataset& dataset, const std::vector<std::size_t>& indices,
                         double threshold) {
    std::vector<torch::Tensor> images;
    std::vector<std::size_t> annotated;
    for (auto i : indices) {
        if (!dataset.samples[i].mask) continue;
        annotated.push_back(i);
        images.push_back(dataset.samples[i].image);
    }
    const auto preds = predict_masks(segmenter, images, threshold);
    DiceSummary out;
    std::array<double, 3> sum{}, count{};
    double tumor_sum = 0, tumor_count = 0;
    for (std::size_t k = 0; k < annotated.size(); ++k) {
        const auto& s = dataset.samples[annotated[k]];
        const double d = dice_coefficient(preds[k].mask, *s.mask);
        out.per_sample.push_back(d);
        const auto c = static_cast<std::size_t>(s.label);
        sum[c] += d;
        count[c] += 1;
        if (is_tumor(s.label)) {
            tumor_sum += d;
            tumor_count += 1;
        }
    }
    for (std::size_t c = 0; c < 3; ++c)
        out.per_class[c] = count[c] > 0 ? sum[c] / count[c] : std::numeric_limits<double>::quiet_NaN();
    out.tumor_mean = tumor_count > 0 ? tumor_sum / tumor_count : std::numeric_limits<double>::quiet_NaN();
    return out;
}

void save_segmenter(const Segmenter& segmenter, const std::filesystem::path& path) {
    nlohmann::json meta;
    meta["kind"] = "segmenter";
    meta["encoder_spec"] = segmenter->spec().to_json();
    meta["rank"] = segmenter->rank();
    meta["placement"] = {"query", "value"};
    meta["adapter_scale"] = segmenter->adapters().empty() ? 1.0 : segmenter->adapters().front()->scale();
    meta["frozen_digest"] = segmenter->frozen_digest();
    write_checkpoint(path, meta, [&](torch::serialize::OutputArchive& archive) {
        torch::serialize::OutputArchive trainable;
        for (const auto& [name, p] : segmenter->named_trainable()) trainable.write(name, p);
        archive.write("trainable", trainable);
    });
}

Segmenter load_segmenter(const std::filesystem::path& path) {
    auto reader = open_checkpoint(path, "segmenter");
    const auto spec = EncoderSpec::from_json(reader.meta.at("encoder_spec"));
    auto segmenter = inject_adapters(spec, reader.meta.at("rank").get<int>());
    if (segmenter->frozen_digest() != reader.meta.at("frozen_digest").get<std::string>())
        throw IncompatibleCheckpoint("frozen encoder weights do not match the digest recorded in " + path.string());
    torch::serialize::InputArchive trainable;
    if (!reader.archive.try_read("trainable", trainable)) throw CheckpointError("segmenter checkpoint lacks parameters");
    torch::NoGradGuard guard;
    for (auto& [name, p] : segmenter->named_trainable()) {
        torch::Tensor value;
        if (!trainable.try_read(name, value)) throw CheckpointError("segmenter checkpoint lacks '" + name + "'");
        if (value.sizes() != p.sizes()) throw CheckpointError("shape mismatch for '" + name + "'");
        p.copy_(value);
    }
    segmenter->eval();
    return segmenter;
}

}  // namespace lfuse
