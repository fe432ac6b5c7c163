#include "lfuse/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lfuse/datahub.hpp"
#include "lfuse/errors.hpp"
#include "lfuse/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lfuse {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string class_name(int k) { return std::string(to_string(static_cast<Label>(k))); }

}  // namespace

EvalReport classification_metrics(const std::vector<int>& labels, const std::vector<int>& predicted) {
    if (labels.empty()) throw InvalidArgument("classification_metrics: empty batch");
    if (labels.size() != predicted.size()) throw InvalidArgument("classification_metrics: length mismatch");
    EvalReport r;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] > 2 || predicted[i] < 0 || predicted[i] > 2)
            throw InvalidArgument("classification_metrics: class index outside {0,1,2}");
        r.confusion[labels[i]][predicted[i]] += 1;
    }
    r.total = static_cast<int64_t>(labels.size());
    int64_t correct = 0;
    for (int k = 0; k < 3; ++k) correct += r.confusion[k][k];
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.total);

    int present = 0;
    double sum_p = 0, sum_r = 0, sum_f = 0;
    for (int k = 0; k < 3; ++k) {
        int64_t support = 0, predicted_k = 0;
        for (int j = 0; j < 3; ++j) {
            support += r.confusion[k][j];
            predicted_k += r.confusion[j][k];
        }
        if (support == 0) {
            r.per_class_precision[k] = r.per_class_recall[k] = r.per_class_f1[k] = kNaN;
            r.warnings.push_back("class " + class_name(k) + " absent from labels; recall undefined");
            continue;
        }
        const double tp = static_cast<double>(r.confusion[k][k]);
        const double recall = tp / static_cast<double>(support);
        double precision = 0.0;
        if (predicted_k == 0)
            r.warnings.push_back("class " + class_name(k) + " never predicted; precision set to 0");
        else
            precision = tp / static_cast<double>(predicted_k);
        const double f1 = (precision + recall) > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        r.per_class_precision[k] = precision;
        r.per_class_recall[k] = recall;
        r.per_class_f1[k] = f1;
        sum_p += precision;
        sum_r += recall;
        sum_f += f1;
        ++present;
    }
    r.macro_precision = sum_p / present;
    r.macro_recall = sum_r / present;
    r.macro_f1 = sum_f / present;
    r.auc = {kNaN, kNaN, kNaN};
    return r;
}

EvalReport classification_metrics(const torch::Tensor& ensemble_probs, const std::vector<int>& labels) {
    if (ensemble_probs.dim() != 2 || ensemble_probs.size(1) != 3 ||
        ensemble_probs.size(0) != static_cast<int64_t>(labels.size()))
        throw InvalidArgument("classification_metrics: expected [N,3] probabilities aligned with labels");
    auto arg = ensemble_probs.argmax(1).to(torch::kInt32).contiguous();
    std::vector<int> predicted(arg.data_ptr<int>(), arg.data_ptr<int>() + arg.numel());
    auto report = classification_metrics(labels, predicted);
    auto rocs = roc_auc(ensemble_probs, labels, &report.warnings);
    for (int k = 0; k < 3; ++k) report.auc[k] = rocs[k].auc;
    return report;
}

RocCurve roc_curve(const std::vector<double>& scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size()) throw InvalidArgument("roc_curve: length mismatch");
    const auto n_pos = static_cast<double>(std::count(positive.begin(), positive.end(), true));
    const auto n_neg = static_cast<double>(positive.size()) - n_pos;
    RocCurve c;
    if (n_pos == 0 || n_neg == 0) {
        c.auc = kNaN;
        return c;
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

    c.fpr.push_back(0.0);
    c.tpr.push_back(0.0);
    c.thresholds.push_back(std::numeric_limits<double>::infinity());
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double t = scores[order[i]];
        // consume every sample tied at this threshold
        for (; i < order.size() && scores[order[i]] == t; ++i) (positive[order[i]] ? tp : fp) += 1;
        c.fpr.push_back(fp / n_neg);
        c.tpr.push_back(tp / n_pos);
        c.thresholds.push_back(t);
    }
    double area = 0;
    for (std::size_t i = 1; i < c.fpr.size(); ++i)
        area += (c.fpr[i] - c.fpr[i - 1]) * (c.tpr[i] + c.tpr[i - 1]) * 0.5;
    c.auc = area;
    return c;
}

std::array<RocCurve, 3> roc_auc(const torch::Tensor& scores, const std::vector<int>& labels,
                                std::vector<std::string>* warnings) {
    auto s = scores.detach().to(torch::kDouble).contiguous();
    std::array<RocCurve, 3> out;
    for (int k = 0; k < 3; ++k) {
        std::vector<double> sc(labels.size());
        std::vector<bool> pos(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            sc[i] = s[static_cast<int64_t>(i)][k].item<double>();
            pos[i] = labels[i] == k;
        }
        out[k] = roc_curve(sc, pos);
        if (std::isnan(out[k].auc) && warnings)
            warnings->push_back("class " + class_name(k) + " has no positives or no negatives; AUC undefined");
    }
    return out;
}

// ---------------------------------------------------------------- serialisation

namespace {

json array_json(const std::array<double, 3>& a) {
    json j = json::object();
    for (int k = 0; k < 3; ++k) j[class_name(k)] = std::isnan(a[k]) ? json(nullptr) : json(a[k]);
    return j;
}

std::array<double, 3> array_from(const json& j) {
    std::array<double, 3> a{};
    for (int k = 0; k < 3; ++k) {
        const auto& v = j.at(class_name(k));
        a[k] = v.is_null() ? kNaN : v.get<double>();
    }
    return a;
}

}  // namespace

json report_to_json(const EvalReport& r) {
    json j;
    j["schema_version"] = r.schema_version;
    j["averaging"] = r.averaging;
    j["total"] = r.total;
    j["accuracy"] = r.accuracy;
    j["macro_precision"] = r.macro_precision;
    j["macro_recall"] = r.macro_recall;
    j["macro_f1"] = r.macro_f1;
    j["per_class_precision"] = array_json(r.per_class_precision);
    j["per_class_recall"] = array_json(r.per_class_recall);
    j["per_class_f1"] = array_json(r.per_class_f1);
    j["confusion"] = r.confusion;
    j["auc"] = array_json(r.auc);
    if (r.dice_summary) j["dice_summary"] = array_json(*r.dice_summary);
    j["warnings"] = r.warnings;
    return j;
}

EvalReport report_from_json(const json& j) {
    EvalReport r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion)
        throw Error("report schema version " + std::to_string(r.schema_version) + " is not supported");
    r.averaging = j.at("averaging").get<std::string>();
    r.total = j.at("total").get<int64_t>();
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_precision = j.at("macro_precision").get<double>();
    r.macro_recall = j.at("macro_recall").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.per_class_precision = array_from(j.at("per_class_precision"));
    r.per_class_recall = array_from(j.at("per_class_recall"));
    r.per_class_f1 = array_from(j.at("per_class_f1"));
    r.confusion = j.at("confusion").get<std::array<std::array<int64_t, 3>, 3>>();
    r.auc = array_from(j.at("auc"));
    if (j.contains("dice_summary")) r.dice_summary = array_from(j.at("dice_summary"));
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    return r;
}

void write_roc_plot(const RocCurve& curve, const std::string& title, const fs::path& file) {
    constexpr int side = 360, pad = 40;
    cv::Mat canvas(side + 2 * pad, side + 2 * pad, CV_8UC3, cv::Scalar(255, 255, 255));
    auto to_px = [&](double fpr, double tpr) {
        return cv::Point(pad + static_cast<int>(std::lround(fpr * side)), pad + side - static_cast<int>(std::lround(tpr * side)));
    };
    cv::rectangle(canvas, to_px(0, 1), to_px(1, 0), cv::Scalar(0, 0, 0), 1);
    cv::line(canvas, to_px(0, 0), to_px(1, 1), cv::Scalar(180, 180, 180), 1, cv::LINE_AA);
    for (std::size_t i = 1; i < curve.fpr.size(); ++i)
        cv::line(canvas, to_px(curve.fpr[i - 1], curve.tpr[i - 1]), to_px(curve.fpr[i], curve.tpr[i]),
                 cv::Scalar(200, 60, 20), 2, cv::LINE_AA);
    char label[96];
    if (std::isnan(curve.auc))
        std::snprintf(label, sizeof label, "%s  AUC n/a", title.c_str());
    else
        std::snprintf(label, sizeof label, "%s  AUC %.4f", title.c_str(), curve.auc);
    cv::putText(canvas, label, cv::Point(pad, pad - 12), cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::putText(canvas, "FPR", cv::Point(pad + side / 2 - 12, side + 2 * pad - 12), cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::putText(canvas, "TPR", cv::Point(4, pad + side / 2), cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0), 1,
                cv::LINE_AA);
    fs::create_directories(file.parent_path());
    if (!cv::imwrite(file.string(), canvas)) throw Error("cannot write plot " + file.string());
}

std::vector<fs::path> emit_report(const EvalReport& report, const fs::path& dir, const std::array<RocCurve, 3>* rocs,
                                  const std::vector<GalleryItem>& gallery) {
    std::vector<fs::path> written;
    fs::create_directories(dir);
    auto report_path = dir / "report.json";
    atomic_write_text(report_path, report_to_json(report).dump(2) + "\n");
    written.push_back(report_path);
    if (rocs) {
        for (int k = 0; k < 3; ++k) {
            auto path = dir / ("roc_" + class_name(k) + ".png");
            write_roc_plot((*rocs)[k], class_name(k), path);
            written.push_back(path);
        }
    }
    for (const auto& item : gallery) {
        auto path = dir / "gallery" / (item.name + ".png");
        write_image(path, item.image);
        written.push_back(path);
    }
    return written;
}

EvalReport load_report(const fs::path& file) { return report_from_json(json::parse(read_text(file))); }

void emit_ablation_table(const std::vector<AblationRow>& rows, const fs::path& dir) {
    std::ostringstream md, csv;
    md << "| Variant | GFE | LFE | GFO | Accuracy | Precision | Recall | F1 score |\n"
       << "|---|---|---|---|---|---|---|---|\n";
    csv << "Variant,GFE,LFE,GFO,Accuracy,Precision,Recall,F1 score\n";
    auto mark = [](bool on) { return on ? "x" : ""; };
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "| %s | %s | %s | %s | %.2f%% | %.2f%% | %.2f%% | %.2f%% |\n", r.variant.c_str(),
                      mark(r.gfe), mark(r.lfe), mark(r.gfo), 100 * r.accuracy, 100 * r.precision, 100 * r.recall,
                      100 * r.f1);
        md << buf;
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.6f,%.6f,%.6f,%.6f\n", r.variant.c_str(), r.gfe, r.lfe, r.gfo,
                      r.accuracy, r.precision, r.recall, r.f1);
        csv << buf;
    }
    atomic_write_text(dir / "ablation.md", md.str());
    atomic_write_text(dir / "ablation.csv", csv.str());
}

torch::Tensor overlay_heatmap(const torch::Tensor& image, const torch::Tensor& heatmap, double opacity) {
    auto h = heatmap.clamp(0.0, 1.0);
    auto ramp = torch::stack({h, (1.0 - (2.0 * h - 1.0).abs()), 1.0 - h});
    return (image * (1.0 - opacity) + ramp * opacity).clamp(0.0, 1.0);
}

}  // namespace lfuse
