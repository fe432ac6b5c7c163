#include "lfuse/segmenter_model.hpp"

#include <cmath>

#include "lfuse/errors.hpp"
#include "lfuse/util.hpp"

namespace lfuse {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

// ---------------------------------------------------------------- spec

void EncoderSpec::validate() const {
    if (depth < 1) throw StructuralError("encoder has no attention blocks");
    if (dim < 1 || heads < 1 || dim % heads != 0) throw StructuralError("encoder dim must be divisible by heads");
    if (patch_size < 1 || image_size < patch_size || image_size % patch_size != 0)
        throw StructuralError("encoder image_size must be a multiple of patch_size");
    if (dim % 8 != 0) throw StructuralError("encoder dim must be a multiple of 8");
    if (mlp_ratio < 1) throw StructuralError("mlp_ratio must be >= 1");
}

nlohmann::json EncoderSpec::to_json() const {
    return {{"image_size", image_size}, {"patch_size", patch_size}, {"dim", dim},       {"depth", depth},
            {"heads", heads},           {"mlp_ratio", mlp_ratio},   {"seed", seed}};
}

EncoderSpec EncoderSpec::from_json(const nlohmann::json& j) {
    EncoderSpec s;
    s.image_size = j.at("image_size").get<int>();
    s.patch_size = j.at("patch_size").get<int>();
    s.dim = j.at("dim").get<int>();
    s.depth = j.at("depth").get<int>();
    s.heads = j.at("heads").get<int>();
    s.mlp_ratio = j.at("mlp_ratio").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

EncoderSpec EncoderSpec::desk() {
    EncoderSpec s;
    s.image_size = 64;
    s.patch_size = 4;
    s.dim = 64;
    s.depth = 4;
    s.heads = 4;
    s.mlp_ratio = 2;
    return s;
}

namespace {

// Seeded initialisation so that a spec (including its seed) fully determines the weights.
void init_module(nn::Module& root, std::uint64_t seed, double linear_std) {
    auto gen = make_generator(seed);
    torch::NoGradGuard guard;
    for (auto& m : root.modules(/*include_self=*/false)) {
        if (auto* lin = m->as<nn::Linear>()) {
            if (linear_std > 0)
                lin->weight.normal_(0.0, linear_std, gen);
            else {
                const double bound = 1.0 / std::sqrt(static_cast<double>(lin->weight.size(1)));
                lin->weight.uniform_(-bound, bound, gen);
            }
            if (lin->bias.defined()) lin->bias.zero_();
        } else if (auto* conv = m->as<nn::Conv2d>()) {
            const double fan_in = static_cast<double>(conv->weight[0].numel());
            conv->weight.uniform_(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in), gen);
            if (conv->bias.defined()) conv->bias.zero_();
        } else if (auto* convt = m->as<nn::ConvTranspose2d>()) {
            const double fan_in = static_cast<double>(convt->weight[0].numel());
            convt->weight.uniform_(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in), gen);
            if (convt->bias.defined()) convt->bias.zero_();
        } else if (auto* ln = m->as<nn::LayerNorm>()) {
            ln->weight.fill_(1.0);
            ln->bias.zero_();
        } else if (auto* gn = m->as<nn::GroupNorm>()) {
            gn->weight.fill_(1.0);
            gn->bias.zero_();
        }
    }
}

}  // namespace

// ---------------------------------------------------------------- LoRA

LoRAAdapterImpl::LoRAAdapterImpl(int64_t dim, int rank, double scale, AdapterTarget target, int layer_index)
    : rank_(rank), scale_(scale), target_(target), layer_index_(layer_index) {
    down = register_module("down", nn::Linear(nn::LinearOptions(dim, rank).bias(false)));
    up = register_module("up", nn::Linear(nn::LinearOptions(rank, dim).bias(false)));
    torch::NoGradGuard guard;
    up->weight.zero_();
}

torch::Tensor LoRAAdapterImpl::forward(const torch::Tensor& x) { return up(down(x)) * scale_; }

// ---------------------------------------------------------------- attention

AttentionImpl::AttentionImpl(int64_t dim, int64_t heads) : heads_(heads) {
    q = register_module("q", nn::Linear(dim, dim));
    k = register_module("k", nn::Linear(dim, dim));
    v = register_module("v", nn::Linear(dim, dim));
    out = register_module("out", nn::Linear(dim, dim));
}

void AttentionImpl::attach_adapters(LoRAAdapter query_adapter, LoRAAdapter value_adapter) {
    lora_q = register_module("lora_q", std::move(query_adapter));
    lora_v = register_module("lora_v", std::move(value_adapter));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key, const torch::Tensor& value) {
    auto qp = q(query);
    auto vp = v(value);
    if (lora_q) qp = qp + lora_q(query);
    if (lora_v) vp = vp + lora_v(value);
    auto kp = k(key);

    const auto b = query.size(0), nq = query.size(1), nk = key.size(1), c = query.size(2);
    const auto hd = c / heads_;
    auto split = [&](const torch::Tensor& t, int64_t n) { return t.view({b, n, heads_, hd}).transpose(1, 2); };
    auto scores = torch::matmul(split(qp, nq), split(kp, nk).transpose(-2, -1)) / std::sqrt(static_cast<double>(hd));
    auto mixed = torch::matmul(torch::softmax(scores, -1), split(vp, nk));
    return out(mixed.transpose(1, 2).reshape({b, nq, c}));
}

// ---------------------------------------------------------------- encoder

EncoderBlockImpl::EncoderBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio) {
    norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
    attn = register_module("attn", Attention(dim, heads));
    norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", nn::Linear(dim, dim * mlp_ratio));
    fc2 = register_module("fc2", nn::Linear(dim * mlp_ratio, dim));
}

torch::Tensor EncoderBlockImpl::forward(torch::Tensor x) {
    auto h = norm1(x);
    x = x + attn(h, h, h);
    return x + fc2(torch::gelu(fc1(norm2(x))));
}

ImageEncoderImpl::ImageEncoderImpl(const EncoderSpec& spec) {
    spec.validate();
    patch_embed = register_module(
        "patch_embed", nn::Conv2d(nn::Conv2dOptions(3, spec.dim, spec.patch_size).stride(spec.patch_size)));
    pos_embed = register_parameter("pos_embed", torch::zeros({1, spec.grid() * spec.grid(), spec.dim}));
    blocks = register_module("blocks", nn::ModuleList());
    for (int i = 0; i < spec.depth; ++i) blocks->push_back(EncoderBlock(spec.dim, spec.heads, spec.mlp_ratio));
    neck = register_module("neck", nn::LayerNorm(nn::LayerNormOptions({spec.dim})));

    init_module(*this, derive_seed(spec.seed, 1), 0.02);
    auto gen = make_generator(derive_seed(spec.seed, 2));
    torch::NoGradGuard guard;
    pos_embed.normal_(0.0, 0.02, gen);
}

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& pixels) {
    auto x = patch_embed(pixels).flatten(2).transpose(1, 2) + pos_embed;
    for (auto& block : *blocks) x = block->as<EncoderBlock>()->forward(x);
    return neck(x);
}

// ---------------------------------------------------------------- prompt encoder / decoder

PromptEncoderImpl::PromptEncoderImpl(int64_t dim) {
    empty_tokens = register_parameter("empty_tokens", torch::zeros({1, 2, dim}));
    no_mask_embed = register_parameter("no_mask_embed", torch::zeros({1, 1, dim}));
}

torch::Tensor PromptEncoderImpl::sparse(int64_t batch) const { return empty_tokens.expand({batch, -1, -1}); }
torch::Tensor PromptEncoderImpl::dense() const { return no_mask_embed; }

MaskDecoderImpl::MaskDecoderImpl(int64_t dim, int64_t heads) {
    output_token = register_parameter("output_token", torch::zeros({1, 1, dim}));
    token_self = register_module("token_self", Attention(dim, heads));
    token_to_image = register_module("token_to_image", Attention(dim, heads));
    image_to_token = register_module("image_to_token", Attention(dim, heads));
    norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
    norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
    norm3 = register_module("norm3", nn::LayerNorm(nn::LayerNormOptions({dim})));
    norm4 = register_module("norm4", nn::LayerNorm(nn::LayerNormOptions({dim})));
    mlp1 = register_module("mlp1", nn::Linear(dim, dim * 2));
    mlp2 = register_module("mlp2", nn::Linear(dim * 2, dim));
    up1 = register_module("up1", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(dim, dim / 4, 2).stride(2)));
    up_norm = register_module("up_norm", nn::GroupNorm(1, dim / 4));
    up2 = register_module("up2", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(dim / 4, dim / 8, 2).stride(2)));
    hyper1 = register_module("hyper1", nn::Linear(dim, dim));
    hyper2 = register_module("hyper2", nn::Linear(dim, dim));
    hyper3 = register_module("hyper3", nn::Linear(dim, dim / 8));
}

torch::Tensor MaskDecoderImpl::forward(const torch::Tensor& image_tokens, const torch::Tensor& sparse,
                                       const torch::Tensor& dense, int64_t grid) {
    const auto b = image_tokens.size(0), c = image_tokens.size(2);
    auto tokens = torch::cat({output_token.expand({b, -1, -1}), sparse}, 1);
    auto src = image_tokens + dense;

    tokens = norm1(tokens + token_self(tokens, tokens, tokens));
    tokens = norm2(tokens + token_to_image(tokens, src, src));
    tokens = norm3(tokens + mlp2(torch::relu(mlp1(tokens))));
    src = norm4(src + image_to_token(src, tokens, tokens));

    auto feat = src.transpose(1, 2).reshape({b, c, grid, grid});
    auto up = torch::gelu(up_norm(up1(feat)));
    up = torch::gelu(up2(up));  // [B, C/8, 4g, 4g]
    auto out_tok = tokens.select(1, 0);
    auto hyper = hyper3(torch::relu(hyper2(torch::relu(hyper1(out_tok)))));  // [B, C/8]
    const auto side = up.size(2);
    return torch::bmm(hyper.unsqueeze(1), up.flatten(2)).view({b, 1, side, side});
}

// ---------------------------------------------------------------- segmenter

SegmenterImpl::SegmenterImpl(const EncoderSpec& spec) : spec_(spec) {
    spec.validate();
    encoder = register_module("encoder", ImageEncoder(spec));
    prompt = register_module("prompt", PromptEncoder(spec.dim));
    decoder = register_module("decoder", MaskDecoder(spec.dim, spec.heads));

    init_module(*decoder, derive_seed(spec.seed, 3), 0.0);
    auto gen = make_generator(derive_seed(spec.seed, 4));
    {
        torch::NoGradGuard guard;
        prompt->empty_tokens.normal_(0.0, 0.02, gen);
        prompt->no_mask_embed.normal_(0.0, 0.02, gen);
        decoder->output_token.normal_(0.0, 0.02, gen);
    }
    for (auto& p : encoder->parameters()) p.set_requires_grad(false);
}

void SegmenterImpl::inject(int rank) {
    if (rank <= 0) throw InvalidArgument("LoRA rank must be positive");
    if (rank >= spec_.dim) throw InvalidArgument("LoRA rank must be smaller than the projection width");
    if (!adapters_.empty()) throw StructuralError("adapters already injected");
    if (encoder->blocks->size() == 0) throw StructuralError("encoder has no attention blocks");

    const double scale = 1.0;  // alpha == rank
    int layer = 0;
    for (auto& block : *encoder->blocks) {
        auto attn = block->as<EncoderBlock>()->attn;
        LoRAAdapter lq(spec_.dim, rank, scale, AdapterTarget::query, layer);
        LoRAAdapter lv(spec_.dim, rank, scale, AdapterTarget::value, layer);
        // down projections get their own seeded init; up projections stay zero
        torch::NoGradGuard guard;
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec_.dim));
        auto gen = make_generator(derive_seed(spec_.seed, 100 + static_cast<std::uint64_t>(layer)));
        lq->down->weight.uniform_(-bound, bound, gen);
        lv->down->weight.uniform_(-bound, bound, gen);
        attn->attach_adapters(lq, lv);
        adapters_.push_back(lq);
        adapters_.push_back(lv);
        ++layer;
    }
    for (auto& item : encoder->named_parameters())
        item.value().set_requires_grad(item.key().find("lora_") != std::string::npos);
}

torch::Tensor SegmenterImpl::forward(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(2) != spec_.image_size || images.size(3) != spec_.image_size)
        throw InvalidArgument("segmenter expects [B,3," + std::to_string(spec_.image_size) + "," +
                              std::to_string(spec_.image_size) + "] input");
    auto opts = images.options();
    auto mean = torch::tensor({0.485, 0.456, 0.406}, opts).view({1, 3, 1, 1});
    auto std = torch::tensor({0.229, 0.224, 0.225}, opts).view({1, 3, 1, 1});
    auto tokens = encoder((images - mean) / std);
    return decoder(tokens, prompt->sparse(images.size(0)), prompt->dense(), spec_.grid());
}

std::vector<torch::Tensor> SegmenterImpl::frozen_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& item : encoder->named_parameters())
        if (item.key().find("lora_") == std::string::npos) out.push_back(item.value());
    return out;
}

std::vector<std::pair<std::string, torch::Tensor>> SegmenterImpl::named_trainable() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& item : named_parameters())
        if (item.value().requires_grad()) out.emplace_back(item.key(), item.value());
    return out;
}

std::vector<torch::Tensor> SegmenterImpl::trainable_parameters() const {
    std::vector<torch::Tensor> out;
    for (auto& [name, p] : named_trainable()) out.push_back(p);
    return out;
}

std::string SegmenterImpl::frozen_digest() const { return tensor_digest(frozen_parameters()); }

}  // namespace lfuse
