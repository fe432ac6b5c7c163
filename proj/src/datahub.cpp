#include "lfuse/datahub.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "lfuse/errors.hpp"
#include "lfuse/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lfuse {

std::string_view to_string(Label label) {
    switch (label) {
        case Label::normal: return "normal";
        case Label::benign: return "benign";
        case Label::malignant: return "malignant";
    }
    return "?";
}

std::string_view to_string(Modality modality) { return modality == Modality::NBI ? "NBI" : "WLI"; }

std::string_view to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::external: return "external";
    }
    return "?";
}

Label parse_label(std::string_view text) {
    if (text == "normal" || text == "0") return Label::normal;
    if (text == "benign" || text == "1") return Label::benign;
    if (text == "malignant" || text == "2") return Label::malignant;
    throw InvalidArgument("unknown label '" + std::string(text) + "'");
}

Modality parse_modality(std::string_view text) {
    if (text == "NBI" || text == "nbi") return Modality::NBI;
    if (text == "WLI" || text == "wli") return Modality::WLI;
    throw InvalidArgument("unknown modality '" + std::string(text) + "'");
}

Split parse_split(std::string_view text) {
    if (text == "train") return Split::train;
    if (text == "val") return Split::val;
    if (text == "test") return Split::test;
    if (text == "external") return Split::external;
    throw InvalidArgument("unknown split '" + std::string(text) + "'");
}

void ImageSample::validate() const {
    if (!image.defined() || image.dim() != 3 || image.size(0) != 3)
        throw Error("image must be a [3,S,S] raster");
    if (image.size(1) != image.size(2)) throw Error("image must be square");
    if (image.min().item<float>() < 0.0f || image.max().item<float>() > 1.0f)
        throw Error("image values outside [0,1]");
    if (!mask) return;
    if (mask->dim() != 2 || mask->size(0) != image.size(1) || mask->size(1) != image.size(2))
        throw Error("mask size " + std::to_string(mask->size(0)) + "x" + std::to_string(mask->size(1)) +
                    " does not match image size " + std::to_string(image.size(1)) + "x" +
                    std::to_string(image.size(2)));
    if (!torch::logical_or(mask->eq(0), mask->eq(1)).all().item<bool>())
        throw Error("mask values must be exactly 0 or 1");
    if (label == Label::normal && mask->sum().item<float>() > 0)
        throw Error("normal sample carries a non-empty mask");
}

// ---------------------------------------------------------------- manifest

void DatasetManifest::recount() {
    class_counts.clear();
    for (const auto& r : records) class_counts[r.split][static_cast<int>(r.label)] += 1;
}

void DatasetManifest::validate() const {
    std::unordered_map<std::string, Split> owner;
    for (const auto& r : records) {
        if (r.split == Split::external) continue;
        auto [it, inserted] = owner.emplace(r.patient_id, r.split);
        if (!inserted && it->second != r.split)
            throw Error("patient '" + r.patient_id + "' appears in both " + std::string(to_string(it->second)) +
                        " and " + std::string(to_string(r.split)));
    }
    DatasetManifest copy = *this;
    copy.recount();
    auto nonzero = [](const ClassCounts& c) {
        ClassCounts out;
        for (const auto& [k, v] : c)
            if (v[0] + v[1] + v[2] > 0) out[k] = v;
        return out;
    };
    if (nonzero(copy.class_counts) != nonzero(class_counts)) throw Error("class_counts disagree with samples");
}

json DatasetManifest::to_json() const {
    json j;
    j["schema_version"] = 1;
    j["seed"] = seed;
    json counts = json::object();
    for (const auto& [split, c] : class_counts) {
        json per = json::object();
        for (int k = 0; k < kNumClasses; ++k) per[std::string(to_string(static_cast<Label>(k)))] = c[k];
        counts[std::string(to_string(split))] = per;
    }
    j["class_counts"] = counts;
    json samples = json::array();
    for (const auto& r : records) {
        json s;
        s["image"] = r.image_file;
        if (!r.mask_file.empty()) s["mask"] = r.mask_file;
        s["label"] = to_string(r.label);
        s["modality"] = to_string(r.modality);
        s["patient_id"] = r.patient_id;
        s["split"] = to_string(r.split);
        samples.push_back(std::move(s));
    }
    j["samples"] = std::move(samples);
    return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
    if (j.value("schema_version", 0) != 1) throw Error("unsupported manifest schema version");
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("samples")) {
        SampleRecord r;
        r.image_file = s.at("image").get<std::string>();
        r.mask_file = s.value("mask", std::string{});
        r.label = parse_label(s.at("label").get<std::string>());
        r.modality = parse_modality(s.at("modality").get<std::string>());
        r.patient_id = s.at("patient_id").get<std::string>();
        r.split = parse_split(s.at("split").get<std::string>());
        m.records.push_back(std::move(r));
    }
    for (const auto& [split_name, per] : j.at("class_counts").items()) {
        auto& row = m.class_counts[parse_split(split_name)];
        for (int k = 0; k < kNumClasses; ++k) row[k] = per.at(std::string(to_string(static_cast<Label>(k)))).get<int>();
    }
    m.validate();
    return m;
}

std::vector<std::size_t> Dataset::indices_of(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
        if (manifest.records[i].split == split) out.push_back(i);
    return out;
}

void Dataset::sync_splits() {
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i].split = manifest.records[i].split;
}

// ---------------------------------------------------------------- ingestion

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        auto b = cell.find_first_not_of(" \t\r");
        auto e = cell.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
    }
    return out;
}

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

}  // namespace

IngestResult ingest_directory(const fs::path& root, const IngestLayout& layout) {
    if (!fs::is_directory(root)) throw ConfigError("dataset root is not a directory: " + root.string());

    // Images found in the per-class folders, excluding mask siblings.
    std::set<std::string> discovered;
    for (int k = 0; k < kNumClasses; ++k) {
        auto dir = root / std::string(to_string(static_cast<Label>(k)));
        if (!fs::is_directory(dir)) continue;
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
            auto stem = entry.path().stem().string();
            if (stem.size() >= layout.mask_suffix.size() &&
                stem.compare(stem.size() - layout.mask_suffix.size(), layout.mask_suffix.size(), layout.mask_suffix) == 0)
                continue;
            discovered.insert(fs::relative(entry.path(), root).generic_string());
        }
    }
    if (discovered.empty()) throw Error("no samples found under " + root.string());

    auto meta_path = root / layout.metadata_file;
    if (!fs::is_regular_file(meta_path)) throw ConfigError("missing metadata file: " + meta_path.string());

    IngestResult result;
    std::ifstream in(meta_path);
    std::string line;
    std::getline(in, line);
    auto header = split_csv_line(line);
    auto col = [&](const std::string& name) -> std::size_t {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ConfigError("metadata file lacks column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto c_file = col("filename"), c_patient = col("patient_id"), c_modality = col("modality"),
               c_label = col("label");

    std::set<std::string> listed;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto cells = split_csv_line(line);
        if (cells.size() < header.size()) {
            result.report.push_back({meta_path.filename().string(), "line " + std::to_string(line_no) + ": too few columns"});
            continue;
        }
        SampleRecord rec;
        try {
            rec.label = parse_label(cells[c_label]);
            rec.modality = parse_modality(cells[c_modality]);
        } catch (const InvalidArgument& e) {
            result.report.push_back({cells[c_file], e.what()});
            continue;
        }
        rec.patient_id = cells[c_patient];
        fs::path rel = cells[c_file];
        if (!rel.has_parent_path()) rel = fs::path(std::string(to_string(rec.label))) / rel;
        rec.image_file = rel.generic_string();
        listed.insert(rec.image_file);

        if (rel.parent_path().generic_string() != to_string(rec.label)) {
            result.report.push_back({rec.image_file, "label column disagrees with class folder"});
            continue;
        }
        ImageSample sample;
        try {
            sample.image = read_image(root / rel);
        } catch (const Error& e) {
            result.report.push_back({rec.image_file, e.what()});
            continue;
        }
        auto mask_rel = rel.parent_path() / (rel.stem().string() + layout.mask_suffix + ".png");
        if (fs::is_regular_file(root / mask_rel)) {
            try {
                sample.mask = read_mask(root / mask_rel);
                rec.mask_file = mask_rel.generic_string();
            } catch (const Error& e) {
                result.report.push_back({mask_rel.generic_string(), e.what()});
                continue;
            }
        }
        sample.label = rec.label;
        sample.modality = rec.modality;
        sample.patient_id = rec.patient_id;
        try {
            sample.validate();
        } catch (const Error& e) {
            result.report.push_back({rec.image_file, e.what()});
            continue;
        }
        result.dataset.manifest.records.push_back(std::move(rec));
        result.dataset.samples.push_back(std::move(sample));
    }
    for (const auto& f : discovered)
        if (!listed.count(f)) result.report.push_back({f, "no metadata entry"});

    if (result.dataset.samples.empty()) throw Error("no samples found under " + root.string());
    result.dataset.manifest.recount();
    return result;
}

// ---------------------------------------------------------------- synthetic generator

namespace {

struct Palette {
    std::array<float, 3> tissue;
    std::array<float, 3> vessel;
    std::array<float, 3> benign;
    std::array<float, 3> malignant;
};

Palette palette_for(Modality m) {
    if (m == Modality::WLI)
        return {{0.80f, 0.47f, 0.44f}, {0.62f, 0.20f, 0.22f}, {0.93f, 0.80f, 0.74f}, {0.50f, 0.16f, 0.14f}};
    return {{0.42f, 0.50f, 0.40f}, {0.20f, 0.30f, 0.36f}, {0.66f, 0.70f, 0.60f}, {0.30f, 0.18f, 0.14f}};
}

torch::Tensor color(const std::array<float, 3>& c) { return torch::tensor({c[0], c[1], c[2]}).view({3, 1, 1}); }

// Smooth random field in roughly [-1,1]: a coarse Gaussian grid upsampled to size.
torch::Tensor smooth_noise(int channels, int grid, int size, torch::Generator& gen) {
    namespace F = torch::nn::functional;
    auto coarse = torch::randn({1, channels, grid, grid}, gen);
    return F::interpolate(coarse, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{size, size})
                                      .mode(torch::kBicubic)
                                      .align_corners(true))
        .squeeze(0);
}

double uniform(torch::Generator& gen, double lo, double hi) {
    return lo + (hi - lo) * torch::rand({1}, gen).item<double>();
}

ImageSample synth_one(Label label, Modality modality, int size, std::uint64_t seed) {
    auto gen = make_generator(seed);
    const auto pal = palette_for(modality);
    const float s = static_cast<float>(size);

    auto coords = torch::arange(size, torch::kFloat32).add(0.5f).div(s);
    auto yy = coords.view({size, 1}).expand({size, size});
    auto xx = coords.view({1, size}).expand({size, size});

    // Tissue: base colour, low-frequency shading, vessel-like ridges, vignette.
    auto shade = smooth_noise(1, 5, size, gen) * 0.06f;
    auto ridge = smooth_noise(1, 9, size, gen);
    auto vessels = torch::exp(-(ridge * ridge) / 0.01f) * 0.35f;
    auto r2 = (xx - 0.5f).pow(2) + (yy - 0.5f).pow(2);
    auto vignette = 1.0f - 0.9f * r2;
    auto image = color(pal.tissue) * (1.0f + shade) * (1.0f - vessels) + color(pal.vessel) * vessels;
    image = image * vignette + torch::randn({3, size, size}, gen) * 0.015f;

    auto mask = torch::zeros({size, size});
    if (label != Label::normal) {
        const bool malignant = label == Label::malignant;
        const double cx = uniform(gen, 0.28, 0.72), cy = uniform(gen, 0.28, 0.72);
        const double a = malignant ? uniform(gen, 0.13, 0.19) : uniform(gen, 0.055, 0.085);
        const double b = a / (malignant ? uniform(gen, 1.0, 1.5) : uniform(gen, 1.0, 1.8));
        const double theta = uniform(gen, 0.0, std::numbers::pi);
        auto dx = xx - static_cast<float>(cx), dy = yy - static_cast<float>(cy);
        const float c = static_cast<float>(std::cos(theta)), sn = static_cast<float>(std::sin(theta));
        auto u = (dx * c + dy * sn) / static_cast<float>(a);
        auto v = (-dx * sn + dy * c) / static_cast<float>(b);
        auto rho = torch::sqrt(u * u + v * v);
        if (malignant) {
            // Low-frequency radial perturbation of the boundary.
            auto phi = torch::atan2(v, u);
            auto radius = torch::ones_like(phi);
            for (int k = 2; k <= 5; ++k) {
                const float amp = static_cast<float>(uniform(gen, 0.03, 0.12));
                const float phase = static_cast<float>(uniform(gen, 0.0, 2.0 * std::numbers::pi));
                radius = radius + amp * torch::cos(phi * static_cast<float>(k) + phase);
            }
            rho = rho / radius;
        }
        mask = (rho <= 1.0f).to(torch::kFloat32);
        const float softness = malignant ? 0.06f : 0.22f;
        auto alpha = torch::sigmoid((1.0f - rho) / softness);
        torch::Tensor lesion;
        if (malignant) {
            auto grain = torch::randn({1, size, size}, gen) * 0.10f + smooth_noise(1, 24, size, gen) * 0.08f;
            lesion = color(pal.malignant) * (1.0f + grain);
        } else {
            lesion = color(pal.benign) * (1.0f + smooth_noise(1, 4, size, gen) * 0.03f);
        }
        image = image * (1.0f - alpha) + lesion * alpha;
    }

    ImageSample sample;
    sample.image = image.clamp(0.0f, 1.0f).contiguous();
    sample.mask = mask;
    sample.label = label;
    sample.modality = modality;
    return sample;
}

}  // namespace

Dataset generate_synthetic(int n_per_class, int size, std::uint64_t seed) {
    if (n_per_class < 1) throw InvalidArgument("n_per_class must be >= 1");
    if (size < 64) throw InvalidArgument("size must be >= 64");

    Dataset ds;
    ds.manifest.seed = seed;
    std::uint64_t ordinal = 0;
    for (int i = 0; i < n_per_class; ++i) {
        for (int k = 0; k < kNumClasses; ++k, ++ordinal) {
            const auto label = static_cast<Label>(k);
            const auto modality = i % 2 == 0 ? Modality::NBI : Modality::WLI;
            auto sample = synth_one(label, modality, size, derive_seed(seed, ordinal));
            char pid[32];
            std::snprintf(pid, sizeof pid, "syn-%d-%04d", k, i / 2);
            sample.patient_id = pid;
            char name[32];
            std::snprintf(name, sizeof name, "img_%04d", i);
            SampleRecord rec;
            rec.image_file = std::string(to_string(label)) + "/" + name + ".png";
            rec.mask_file = std::string(to_string(label)) + "/" + name + "_mask.png";
            rec.label = label;
            rec.modality = modality;
            rec.patient_id = sample.patient_id;
            ds.manifest.records.push_back(std::move(rec));
            ds.samples.push_back(std::move(sample));
        }
    }
    ds.manifest.recount();
    return ds;
}

// ---------------------------------------------------------------- splitting

DatasetManifest split_by_patient(const DatasetManifest& manifest, const SplitFractions& fractions,
                                 std::uint64_t seed) {
    const std::array<double, 3> frac{fractions.train, fractions.val, fractions.test};
    for (double f : frac)
        if (!(f > 0.0)) throw InvalidArgument("split fractions must be positive");
    if (std::abs(frac[0] + frac[1] + frac[2] - 1.0) > 1e-9) throw InvalidArgument("split fractions must sum to 1");

    std::map<std::string, double> position;  // patient -> hash position in [0,1)
    for (const auto& r : manifest.records)
        if (r.split != Split::external && !position.count(r.patient_id))
            position[r.patient_id] = stable_unit_hash(r.patient_id + "#" + std::to_string(seed));
    if (position.size() < 3)
        throw InvalidArgument("need at least 3 distinct patients to form train/val/test, found " +
                              std::to_string(position.size()));

    const std::array<Split, 3> splits{Split::train, Split::val, Split::test};
    const std::array<double, 4> edges{0.0, frac[0], frac[0] + frac[1], 1.0};
    std::map<std::string, int> bucket;
    std::array<std::vector<std::string>, 3> members;
    for (const auto& [pid, u] : position) {
        int b = u < edges[1] ? 0 : (u < edges[2] ? 1 : 2);
        bucket[pid] = b;
        members[b].push_back(pid);
    }
    // Small patient pools can leave a bucket empty; pull in the patient whose hash
    // position lies closest to that bucket's interval, from a bucket that can spare one.
    for (int b = 0; b < 3; ++b) {
        if (!members[b].empty()) continue;
        const double mid = 0.5 * (edges[b] + edges[b + 1]);
        std::string best;
        double best_dist = 2.0;
        for (const auto& [pid, u] : position) {
            if (members[bucket[pid]].size() < 2) continue;
            const double d = std::abs(u - mid);
            if (d < best_dist) best_dist = d, best = pid;
        }
        auto& from = members[bucket[best]];
        from.erase(std::find(from.begin(), from.end(), best));
        bucket[best] = b;
        members[b].push_back(best);
    }

    DatasetManifest out = manifest;
    for (auto& r : out.records)
        if (r.split != Split::external) r.split = splits[bucket.at(r.patient_id)];
    out.seed = seed;
    out.recount();
    out.validate();
    return out;
}

// ---------------------------------------------------------------- persistence

void write_dataset(const Dataset& dataset, const fs::path& root) {
    fs::create_directories(root);
    std::ostringstream csv;
    csv << "filename,patient_id,modality,label\n";
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const auto& rec = dataset.manifest.records[i];
        const auto& s = dataset.samples[i];
        write_image(root / rec.image_file, s.image);
        if (!rec.mask_file.empty() && s.mask) write_mask(root / rec.mask_file, *s.mask);
        csv << rec.image_file << ',' << rec.patient_id << ',' << to_string(rec.modality) << ','
            << to_string(rec.label) << '\n';
    }
    atomic_write_text(root / "metadata.csv", csv.str());
    atomic_write_text(root / "manifest.json", dataset.manifest.to_json().dump(2) + "\n");
}

Dataset load_dataset(const fs::path& root) {
    Dataset ds;
    ds.manifest = DatasetManifest::from_json(json::parse(read_text(root / "manifest.json")));
    for (const auto& rec : ds.manifest.records) {
        ImageSample s;
        s.image = read_image(root / rec.image_file);
        if (!rec.mask_file.empty()) s.mask = read_mask(root / rec.mask_file);
        s.label = rec.label;
        s.modality = rec.modality;
        s.patient_id = rec.patient_id;
        s.split = rec.split;
        s.validate();
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

std::string dataset_digest(const Dataset& dataset) {
    std::vector<torch::Tensor> rasters;
    for (const auto& s : dataset.samples) {
        rasters.push_back(s.image);
        if (s.mask) rasters.push_back(*s.mask);
    }
    return sha256_hex(dataset.manifest.to_json().dump() + tensor_digest(rasters));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(epoch) + 0x5EED));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

}  // namespace lfuse
