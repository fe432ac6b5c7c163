#pragma once

#include <string_view>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace lfuse {

struct LossWeights {
    double alpha = 1.0;  // global-head cross-entropy
    double beta = 0.3;   // local-head cross-entropy
    double gamma = 0.01; // similarity + discrimination

    nlohmann::json to_json() const { return {{"alpha", alpha}, {"beta", beta}, {"gamma", gamma}}; }
    static LossWeights from_json(const nlohmann::json& j);
};

// Scalar tensors; a term that does not apply to the active topology is an exact zero.
struct LossBundle {
    torch::Tensor l_f, l_g, l_l, l_s, l_d;
    torch::Tensor l_total;
    LossWeights weights;
};

// l_f + alpha*l_g + beta*l_l + gamma*(l_s + l_d)
double weighted_total(double l_f, double l_g, double l_l, double l_s, double l_d, const LossWeights& w);

// Mean of (1 - cos(F_g, F_l)) over tumour samples (label 1 or 2); zero when the batch has none.
// Throws NumericalDomainError for a zero-norm vector among tumour samples.
torch::Tensor similarity_loss(const torch::Tensor& f_g, const torch::Tensor& f_l, const torch::Tensor& labels);

enum class AdversarialMode { joint, grad_reverse };
std::string_view to_string(AdversarialMode mode);
AdversarialMode parse_adversarial_mode(std::string_view text);

// Identity forward, negated gradient backward.
torch::Tensor gradient_reverse(const torch::Tensor& x);

// Single fully connected layer D -> 1 with a sigmoid; shared by global and local inputs.
class DiscriminatorImpl : public torch::nn::Module {
public:
    explicit DiscriminatorImpl(int64_t dim);
    torch::Tensor logits(const torch::Tensor& f);   // [B]
    torch::Tensor forward(const torch::Tensor& f);  // [B] probabilities

    torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(Discriminator);

// Binary cross-entropy with target 0 for global vectors and 1 for local ones,
// averaged over all 2B evaluations.
torch::Tensor discrimination_loss(Discriminator& discriminator, const torch::Tensor& f_g, const torch::Tensor& f_l,
                                  AdversarialMode mode = AdversarialMode::joint);
// Same loss evaluated on already-computed discriminator outputs.
torch::Tensor discrimination_loss_from_probs(const torch::Tensor& p_global, const torch::Tensor& p_local);

struct PredictionTriple {
    // [B,3] probabilities; a head that is not part of the topology is undefined.
    torch::Tensor y_g, y_l, y_f;
    torch::Tensor y_ensemble;
    // Log-probabilities from the same heads, used by the cross-entropy terms.
    torch::Tensor log_g, log_l, log_f;
};

// Builds a triple from probabilities (ensemble = mean of the defined heads).
PredictionTriple make_prediction_triple(const torch::Tensor& y_g, const torch::Tensor& y_l, const torch::Tensor& y_f);
// Builds a triple from head logits via (log-)softmax.
PredictionTriple predictions_from_logits(const torch::Tensor& z_g, const torch::Tensor& z_l, const torch::Tensor& z_f);

struct HeadLogits {
    torch::Tensor g, l, f;
};

// FC heads over the global (D->3), local (D->3) and concatenated (2D->3) features.
class ClassifierHeadsImpl : public torch::nn::Module {
public:
    ClassifierHeadsImpl(int64_t dim, bool use_global, bool use_local);
    HeadLogits logits(const torch::Tensor& f_g, const torch::Tensor& f_l);
    PredictionTriple forward(const torch::Tensor& f_g, const torch::Tensor& f_l);

    bool use_global() const { return use_global_; }
    bool use_local() const { return use_local_; }

    torch::nn::Linear fc_g{nullptr}, fc_l{nullptr}, fc_f{nullptr};

private:
    bool use_global_, use_local_;
};
TORCH_MODULE(ClassifierHeads);

PredictionTriple classify_heads(ClassifierHeads& heads, const torch::Tensor& f_g, const torch::Tensor& f_l);

// Mean negative log-likelihood of the true class under probability vectors.
torch::Tensor cross_entropy_from_probs(const torch::Tensor& probs, const torch::Tensor& labels);

struct GfoOptions {
    bool enabled = true;
    AdversarialMode mode = AdversarialMode::joint;
};

// Throws InvalidArgument for labels outside {0,1,2}. Terms of absent heads are zero;
// the GFO terms require both feature batches.
LossBundle total_loss(const PredictionTriple& preds, const torch::Tensor& labels, const torch::Tensor& f_g,
                      const torch::Tensor& f_l, Discriminator* discriminator, const LossWeights& weights,
                      const GfoOptions& gfo = {});

}  // namespace lfuse
