#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace lfuse {

// Structure of the promptable segmenter's transformer image encoder.
struct EncoderSpec {
    int image_size = 224;
    int patch_size = 16;
    int dim = 256;
    int depth = 12;
    int heads = 8;
    int mlp_ratio = 4;
    std::uint64_t seed = 0;  // initialisation seed of the frozen stand-in weights

    int grid() const { return image_size / patch_size; }
    void validate() const;

    nlohmann::json to_json() const;
    static EncoderSpec from_json(const nlohmann::json& j);
    // Small stand-in used at desk scale: 64 px input, 4 px patches, 4 blocks.
    static EncoderSpec desk();
};

enum class AdapterTarget { query, value };

// Low-rank update added to a frozen projection: scale * up(down(x)).
class LoRAAdapterImpl : public torch::nn::Module {
public:
    LoRAAdapterImpl(int64_t dim, int rank, double scale, AdapterTarget target, int layer_index);

    torch::Tensor forward(const torch::Tensor& x);

    int rank() const { return rank_; }
    double scale() const { return scale_; }
    AdapterTarget target() const { return target_; }
    int layer_index() const { return layer_index_; }

    torch::nn::Linear down{nullptr};  // d -> r
    torch::nn::Linear up{nullptr};    // r -> d, zero at construction

private:
    int rank_;
    double scale_;
    AdapterTarget target_;
    int layer_index_;
};
TORCH_MODULE(LoRAAdapter);

// Multi-head attention with separate query/key/value projections.
class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int64_t dim, int64_t heads);

    torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key, const torch::Tensor& value);
    void attach_adapters(LoRAAdapter query_adapter, LoRAAdapter value_adapter);

    torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, out{nullptr};
    LoRAAdapter lora_q{nullptr}, lora_v{nullptr};

private:
    int64_t heads_;
};
TORCH_MODULE(Attention);

class EncoderBlockImpl : public torch::nn::Module {
public:
    EncoderBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio);
    torch::Tensor forward(torch::Tensor x);

    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    Attention attn{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(EncoderBlock);

class ImageEncoderImpl : public torch::nn::Module {
public:
    explicit ImageEncoderImpl(const EncoderSpec& spec);
    // [B,3,S,S] normalised pixels -> [B,N,C] tokens
    torch::Tensor forward(const torch::Tensor& pixels);

    torch::nn::Conv2d patch_embed{nullptr};
    torch::Tensor pos_embed;
    torch::nn::ModuleList blocks;
    torch::nn::LayerNorm neck{nullptr};
};
TORCH_MODULE(ImageEncoder);

// Automatic-mode prompt encoder: learned empty-prompt tokens and no-mask embedding.
class PromptEncoderImpl : public torch::nn::Module {
public:
    explicit PromptEncoderImpl(int64_t dim);
    torch::Tensor sparse(int64_t batch) const;  // [B,2,C]
    torch::Tensor dense() const;                // [1,1,C]

    torch::Tensor empty_tokens;
    torch::Tensor no_mask_embed;
};
TORCH_MODULE(PromptEncoder);

class MaskDecoderImpl : public torch::nn::Module {
public:
    MaskDecoderImpl(int64_t dim, int64_t heads);
    // image tokens [B,N,C] on a grid x grid lattice -> mask logits [B,1,4*grid,4*grid]
    torch::Tensor forward(const torch::Tensor& image_tokens, const torch::Tensor& sparse, const torch::Tensor& dense,
                          int64_t grid);

    torch::Tensor output_token;
    Attention token_self{nullptr}, token_to_image{nullptr}, image_to_token{nullptr};
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr}, norm4{nullptr};
    torch::nn::Linear mlp1{nullptr}, mlp2{nullptr};
    torch::nn::ConvTranspose2d up1{nullptr}, up2{nullptr};
    torch::nn::GroupNorm up_norm{nullptr};
    torch::nn::Linear hyper1{nullptr}, hyper2{nullptr}, hyper3{nullptr};
};
TORCH_MODULE(MaskDecoder);

class SegmenterImpl : public torch::nn::Module {
public:
    explicit SegmenterImpl(const EncoderSpec& spec);

    // [B,3,S,S] pixels in [0,1] at spec.image_size -> foreground logits [B,1,S',S'].
    torch::Tensor forward(const torch::Tensor& images);

    const EncoderSpec& spec() const { return spec_; }
    const std::vector<LoRAAdapter>& adapters() const { return adapters_; }
    int rank() const { return adapters_.empty() ? 0 : adapters_.front()->rank(); }

    // Adds query/value adapters to every encoder block and freezes everything else in the encoder.
    void inject(int rank);

    std::vector<torch::Tensor> frozen_parameters() const;
    std::vector<torch::Tensor> trainable_parameters() const;
    std::vector<std::pair<std::string, torch::Tensor>> named_trainable() const;
    std::string frozen_digest() const;

    ImageEncoder encoder{nullptr};
    PromptEncoder prompt{nullptr};
    MaskDecoder decoder{nullptr};

private:
    EncoderSpec spec_;
    std::vector<LoRAAdapter> adapters_;
};
TORCH_MODULE(Segmenter);

}  // namespace lfuse
