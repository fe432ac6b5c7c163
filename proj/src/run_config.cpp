#include "lfuse/run_config.hpp"

#include <fstream>
#include <sstream>

#include "lfuse/errors.hpp"
#include "lfuse/util.hpp"

namespace lfuse {

using nlohmann::json;

namespace {

json default_tree(std::string_view profile) {
    TrainConfig train;
    EncoderSpec encoder;
    int size = 128;
    if (profile == "desk") {
        train = TrainConfig::desk();
        encoder = EncoderSpec::desk();
    } else if (profile == "full") {
        train = TrainConfig::full();
        encoder = EncoderSpec{};
        size = 256;
    } else {
        throw ConfigError("unknown profile '" + std::string(profile) + "' (expected desk or full)");
    }
    Stage1Config s1;
    json t;
    t["datahub"] = {{"n_per_class", 60},
                    {"size", size},
                    {"seed", 7},
                    {"fractions", {{"train", 0.7}, {"val", 0.1}, {"test", 0.2}}}};
    t["lesion_locator"] = {{"encoder", encoder.to_json()},
                           {"rank", 4},
                           {"threshold", 0.5},
                           {"steps", s1.steps},
                           {"batch_size", s1.batch_size},
                           {"lr", s1.lr},
                           {"weight_decay", s1.weight_decay},
                           {"dice_weight", s1.dice_weight},
                           {"ce_weight", s1.ce_weight},
                           {"augment", s1.augment.to_json()},
                           {"seed", s1.seed}};
    t["extractors"] = train.extractor.to_json();
    t["fusion_gfo"] = {{"alpha", train.loss_weights.alpha},
                       {"beta", train.loss_weights.beta},
                       {"gamma", train.loss_weights.gamma},
                       {"adversarial_mode", std::string(to_string(train.adversarial_mode))}};
    json tj = train.to_json();
    // These live in their own sections.
    tj.erase("extractor");
    tj.erase("loss_weights");
    tj.erase("adversarial_mode");
    t["trainer"] = tj;
    t["evalkit"] = {{"split", "test"}, {"gradcam_count", 8}};
    return t;
}

void fill_provenance(const json& node, json& prov, const std::string& source) {
    for (auto it = node.begin(); it != node.end(); ++it) {
        if (it.value().is_object())
            fill_provenance(it.value(), prov[it.key()], source);
        else
            prov[it.key()] = source;
    }
}

std::vector<std::string> split_path(std::string_view dotted) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : dotted) {
        if (c == '.') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    parts.push_back(cur);
    for (const auto& p : parts)
        if (p.empty()) throw ConfigError("malformed config key '" + std::string(dotted) + "'");
    return parts;
}

bool compatible(const json& current, const json& value) {
    if (current.is_number()) return value.is_number();
    if (current.is_boolean()) return value.is_boolean();
    if (current.is_string()) return value.is_string();
    return current.type() == value.type();
}

void merge_into(json& tree, json& prov, const json& overrides, const std::string& prefix, const std::string& source) {
    if (!overrides.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
    for (auto it = overrides.begin(); it != overrides.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!tree.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        json& slot = tree[it.key()];
        if (slot.is_object()) {
            merge_into(slot, prov[it.key()], it.value(), key, source);
            continue;
        }
        if (!compatible(slot, it.value())) throw ConfigError("config key '" + key + "' has the wrong type");
        slot = it.value();
        prov[it.key()] = source;
    }
}

}  // namespace

RunConfig RunConfig::defaults(std::string_view profile) {
    RunConfig cfg;
    cfg.tree_ = default_tree(profile);
    fill_provenance(cfg.tree_, cfg.provenance_, "default");
    return cfg;
}

void RunConfig::merge_json(const json& overrides, std::string_view source) {
    json tree = tree_, prov = provenance_;
    merge_into(tree, prov, overrides, "", std::string(source));
    tree_ = std::move(tree);
    provenance_ = std::move(prov);
}

void RunConfig::merge_file(const std::filesystem::path& path) {
    json parsed;
    try {
        parsed = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
    }
    merge_json(parsed, "file");
}

void RunConfig::set_value(std::string_view dotted_path, const json& value, std::string_view source) {
    auto parts = split_path(dotted_path);
    json overrides = value;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) overrides = json{{*it, overrides}};
    merge_json(overrides, source);
}

void RunConfig::set(std::string_view dotted_path, std::string_view value, std::string_view source) {
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::parse_error&) {
        parsed = std::string(value);
    }
    set_value(dotted_path, parsed, source);
}

json RunConfig::get(std::string_view dotted_path) const {
    const json* node = &tree_;
    for (const auto& part : split_path(dotted_path)) {
        if (!node->is_object() || !node->contains(part))
            throw ConfigError("unknown config key '" + std::string(dotted_path) + "'");
        node = &(*node)[part];
    }
    return *node;
}

std::string RunConfig::digest() const { return sha256_hex(tree_.dump()); }

void RunConfig::dump(const std::filesystem::path& path) const {
    atomic_write_text(path, tree_.dump(2) + "\n");
    auto prov_path = path;
    prov_path.replace_extension(".provenance.json");
    atomic_write_text(prov_path, provenance_.dump(2) + "\n");
}

int RunConfig::n_per_class() const { return tree_["datahub"]["n_per_class"].get<int>(); }
int RunConfig::synth_size() const { return tree_["datahub"]["size"].get<int>(); }
std::uint64_t RunConfig::data_seed() const { return tree_["datahub"]["seed"].get<std::uint64_t>(); }

SplitFractions RunConfig::fractions() const {
    const auto& f = tree_["datahub"]["fractions"];
    return {f["train"].get<double>(), f["val"].get<double>(), f["test"].get<double>()};
}

EncoderSpec RunConfig::encoder_spec() const {
    auto spec = EncoderSpec::from_json(tree_["lesion_locator"]["encoder"]);
    spec.validate();
    return spec;
}

int RunConfig::lora_rank() const { return tree_["lesion_locator"]["rank"].get<int>(); }
double RunConfig::mask_threshold() const { return tree_["lesion_locator"]["threshold"].get<double>(); }

Stage1Config RunConfig::stage1() const {
    const auto& s = tree_["lesion_locator"];
    Stage1Config c;
    c.steps = s["steps"].get<int>();
    c.batch_size = s["batch_size"].get<int>();
    c.lr = s["lr"].get<double>();
    c.weight_decay = s["weight_decay"].get<double>();
    c.dice_weight = s["dice_weight"].get<double>();
    c.ce_weight = s["ce_weight"].get<double>();
    c.augment = AugmentPolicy::from_json(s["augment"]);
    c.seed = s["seed"].get<std::uint64_t>();
    if (c.steps < 0 || c.batch_size < 1 || c.lr <= 0) throw ConfigError("lesion_locator: invalid optimisation settings");
    return c;
}

TrainConfig RunConfig::train() const {
    json tj = tree_["trainer"];
    tj["extractor"] = tree_["extractors"];
    const auto& g = tree_["fusion_gfo"];
    tj["loss_weights"] = {{"alpha", g["alpha"]}, {"beta", g["beta"]}, {"gamma", g["gamma"]}};
    tj["adversarial_mode"] = g["adversarial_mode"];
    auto cfg = TrainConfig::from_json(tj);
    cfg.validate();
    return cfg;
}

std::string RunConfig::eval_split() const { return tree_["evalkit"]["split"].get<std::string>(); }
int RunConfig::gradcam_count() const { return tree_["evalkit"]["gradcam_count"].get<int>(); }

}  // namespace lfuse
