#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace lfuse {

inline constexpr int kReportSchemaVersion = 1;

struct EvalReport {
    int schema_version = kReportSchemaVersion;
    std::string averaging = "macro";
    int64_t total = 0;
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    // NaN for a class absent from the labels.
    std::array<double, 3> per_class_precision{};
    std::array<double, 3> per_class_recall{};
    std::array<double, 3> per_class_f1{};
    std::array<std::array<int64_t, 3>, 3> confusion{};  // rows: true class, columns: predicted class
    std::array<double, 3> auc{};                        // one-vs-rest; NaN when degenerate
    std::optional<std::array<double, 3>> dice_summary;  // per-class mean Dice
    std::vector<std::string> warnings;
};

// Macro averages are taken over classes present in the labels.
EvalReport classification_metrics(const std::vector<int>& labels, const std::vector<int>& predicted);
// Predictions are the argmax of the ensemble probabilities [N,3]; fills AUC as well.
EvalReport classification_metrics(const torch::Tensor& ensemble_probs, const std::vector<int>& labels);

struct RocCurve {
    std::vector<double> fpr;
    std::vector<double> tpr;
    std::vector<double> thresholds;  // first entry is +inf
    double auc = 0.0;                // NaN when the class has no positives or no negatives
};

// Threshold sweep over unique scores, AUC by the trapezoidal rule.
RocCurve roc_curve(const std::vector<double>& scores, const std::vector<bool>& positive);
std::array<RocCurve, 3> roc_auc(const torch::Tensor& scores, const std::vector<int>& labels,
                                std::vector<std::string>* warnings = nullptr);

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

struct GalleryItem {
    std::string name;
    torch::Tensor image;  // [3,H,W] in [0,1]
};

// Writes report.json, one ROC plot per class when curves are given, and gallery/<name>.png
// for each gallery item. Returns the written paths.
std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& dir,
                                               const std::array<RocCurve, 3>* rocs = nullptr,
                                               const std::vector<GalleryItem>& gallery = {});
EvalReport load_report(const std::filesystem::path& file);

void write_roc_plot(const RocCurve& curve, const std::string& title, const std::filesystem::path& file);

struct AblationRow {
    std::string variant;
    bool gfe = true, lfe = true, gfo = true;
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

// ablation.md (Markdown table) and ablation.csv with columns
// Variant, GFE, LFE, GFO, Accuracy, Precision, Recall, F1 score.
void emit_ablation_table(const std::vector<AblationRow>& rows, const std::filesystem::path& dir);

// Heatmap in [0,1] blended over an image with a blue-to-red colour ramp.
torch::Tensor overlay_heatmap(const torch::Tensor& image, const torch::Tensor& heatmap, double opacity = 0.5);

}  // namespace lfuse
