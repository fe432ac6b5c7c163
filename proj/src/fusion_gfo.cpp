#include "lfuse/fusion_gfo.hpp"

#include "lfuse/errors.hpp"

namespace lfuse {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

LossWeights LossWeights::from_json(const nlohmann::json& j) {
    return {j.at("alpha").get<double>(), j.at("beta").get<double>(), j.at("gamma").get<double>()};
}

double weighted_total(double l_f, double l_g, double l_l, double l_s, double l_d, const LossWeights& w) {
    return l_f + w.alpha * l_g + w.beta * l_l + w.gamma * (l_s + l_d);
}

torch::Tensor similarity_loss(const torch::Tensor& f_g, const torch::Tensor& f_l, const torch::Tensor& labels) {
    if (f_g.sizes() != f_l.sizes() || f_g.dim() != 2 || labels.size(0) != f_g.size(0))
        throw InvalidArgument("similarity_loss: feature batches must be aligned [B,D] with B labels");
    auto tumor = labels.gt(0);
    if (!tumor.any().item<bool>()) return torch::zeros({}, f_g.options());

    auto norm_g = f_g.norm(2, 1), norm_l = f_l.norm(2, 1);
    auto labels_cpu = labels.cpu();
    auto ng = norm_g.detach().cpu(), nl = norm_l.detach().cpu();
    for (int64_t i = 0; i < labels_cpu.size(0); ++i) {
        if (labels_cpu[i].item<int64_t>() == 0) continue;
        if (ng[i].item<double>() == 0.0 || nl[i].item<double>() == 0.0)
            throw NumericalDomainError("similarity_loss: zero-norm feature vector", static_cast<std::size_t>(i));
    }
    auto idx = tumor.nonzero().squeeze(1);
    auto g = f_g.index_select(0, idx), l = f_l.index_select(0, idx);
    auto cosine = (g * l).sum(1) / (norm_g.index_select(0, idx) * norm_l.index_select(0, idx));
    return (1.0 - cosine).mean();
}

std::string_view to_string(AdversarialMode mode) { return mode == AdversarialMode::joint ? "joint" : "grad_reverse"; }

AdversarialMode parse_adversarial_mode(std::string_view text) {
    if (text == "joint") return AdversarialMode::joint;
    if (text == "grad_reverse") return AdversarialMode::grad_reverse;
    throw InvalidArgument("unknown adversarial mode '" + std::string(text) + "'");
}

namespace {

struct GradReverse : public torch::autograd::Function<GradReverse> {
    static torch::Tensor forward(torch::autograd::AutogradContext*, const torch::Tensor& x) { return x.view_as(x); }
    static torch::autograd::variable_list backward(torch::autograd::AutogradContext*,
                                                   torch::autograd::variable_list grad) {
        return {-grad[0]};
    }
};

}  // namespace

torch::Tensor gradient_reverse(const torch::Tensor& x) { return GradReverse::apply(x); }

DiscriminatorImpl::DiscriminatorImpl(int64_t dim) { fc = register_module("fc", nn::Linear(dim, 1)); }

torch::Tensor DiscriminatorImpl::logits(const torch::Tensor& f) { return fc(f).squeeze(-1); }

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& f) { return torch::sigmoid(logits(f)); }

torch::Tensor discrimination_loss(Discriminator& discriminator, const torch::Tensor& f_g, const torch::Tensor& f_l,
                                  AdversarialMode mode) {
    if (f_g.size(0) == 0 || f_l.size(0) == 0) throw InvalidArgument("discrimination_loss: empty batch");
    auto route = [&](const torch::Tensor& f) { return mode == AdversarialMode::grad_reverse ? gradient_reverse(f) : f; };
    auto z_g = discriminator->logits(route(f_g));
    auto z_l = discriminator->logits(route(f_l));
    // -log(1 - sigmoid(z)) = softplus(z); -log(sigmoid(z)) = softplus(-z)
    const double n = static_cast<double>(z_g.size(0) + z_l.size(0));
    return (F::softplus(z_g).sum() + F::softplus(-z_l).sum()) / n;
}

torch::Tensor discrimination_loss_from_probs(const torch::Tensor& p_global, const torch::Tensor& p_local) {
    const double n = static_cast<double>(p_global.numel() + p_local.numel());
    return -(torch::log1p(-p_global).sum() + torch::log(p_local).sum()) / n;
}

namespace {

torch::Tensor mean_of_defined(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& c) {
    torch::Tensor sum;
    int count = 0;
    for (const auto* t : {&a, &b, &c}) {
        if (!t->defined()) continue;
        sum = sum.defined() ? sum + *t : *t;
        ++count;
    }
    if (count == 0) throw InvalidArgument("prediction triple has no defined head");
    return sum / static_cast<double>(count);
}

}  // namespace

PredictionTriple make_prediction_triple(const torch::Tensor& y_g, const torch::Tensor& y_l, const torch::Tensor& y_f) {
    PredictionTriple p;
    p.y_g = y_g;
    p.y_l = y_l;
    p.y_f = y_f;
    p.y_ensemble = mean_of_defined(y_g, y_l, y_f);
    return p;
}

PredictionTriple predictions_from_logits(const torch::Tensor& z_g, const torch::Tensor& z_l, const torch::Tensor& z_f) {
    PredictionTriple p;
    auto fill = [](const torch::Tensor& z, torch::Tensor& y, torch::Tensor& logp) {
        if (!z.defined()) return;
        logp = torch::log_softmax(z, -1);
        y = logp.exp();
    };
    fill(z_g, p.y_g, p.log_g);
    fill(z_l, p.y_l, p.log_l);
    fill(z_f, p.y_f, p.log_f);
    p.y_ensemble = mean_of_defined(p.y_g, p.y_l, p.y_f);
    return p;
}

ClassifierHeadsImpl::ClassifierHeadsImpl(int64_t dim, bool use_global, bool use_local)
    : use_global_(use_global), use_local_(use_local) {
    if (!use_global && !use_local) throw InvalidArgument("at least one branch required");
    if (use_global) fc_g = register_module("fc_g", nn::Linear(dim, 3));
    if (use_local) fc_l = register_module("fc_l", nn::Linear(dim, 3));
    if (use_global && use_local) fc_f = register_module("fc_f", nn::Linear(2 * dim, 3));
}

HeadLogits ClassifierHeadsImpl::logits(const torch::Tensor& f_g, const torch::Tensor& f_l) {
    HeadLogits out;
    if (use_global_) out.g = fc_g(f_g);
    if (use_local_) out.l = fc_l(f_l);
    if (use_global_ && use_local_) out.f = fc_f(torch::cat({f_g, f_l}, 1));
    return out;
}

PredictionTriple ClassifierHeadsImpl::forward(const torch::Tensor& f_g, const torch::Tensor& f_l) {
    auto z = logits(f_g, f_l);
    return predictions_from_logits(z.g, z.l, z.f);
}

PredictionTriple classify_heads(ClassifierHeads& heads, const torch::Tensor& f_g, const torch::Tensor& f_l) {
    return heads->forward(f_g, f_l);
}

torch::Tensor cross_entropy_from_probs(const torch::Tensor& probs, const torch::Tensor& labels) {
    return -torch::log(probs.gather(1, labels.view({-1, 1}))).mean();
}

LossBundle total_loss(const PredictionTriple& preds, const torch::Tensor& labels, const torch::Tensor& f_g,
                      const torch::Tensor& f_l, Discriminator* discriminator, const LossWeights& weights,
                      const GfoOptions& gfo) {
    if (!labels.defined() || labels.dim() != 1) throw InvalidArgument("labels must be a 1-D batch");
    if (labels.numel() > 0 && (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() > 2))
        throw InvalidArgument("labels must lie in {0,1,2}");
    const auto y = labels.to(torch::kLong);
    const auto opts = preds.y_ensemble.options();

    auto ce = [&](const torch::Tensor& logp, const torch::Tensor& prob) -> torch::Tensor {
        if (logp.defined()) return -logp.gather(1, y.view({-1, 1})).mean();
        if (prob.defined()) return cross_entropy_from_probs(prob, y);
        return torch::zeros({}, opts);
    };
    LossBundle b;
    b.weights = weights;
    b.l_f = ce(preds.log_f, preds.y_f);
    b.l_g = ce(preds.log_g, preds.y_g);
    b.l_l = ce(preds.log_l, preds.y_l);
    if (gfo.enabled) {
        if (!f_g.defined() || !f_l.defined() || discriminator == nullptr)
            throw InvalidArgument("GFO terms need both feature batches and a discriminator");
        b.l_s = similarity_loss(f_g, f_l, y);
        b.l_d = discrimination_loss(*discriminator, f_g, f_l, gfo.mode);
    } else {
        b.l_s = torch::zeros({}, opts);
        b.l_d = torch::zeros({}, opts);
    }
    b.l_total = b.l_f + weights.alpha * b.l_g + weights.beta * b.l_l + weights.gamma * (b.l_s + b.l_d);
    return b;
}

}  // namespace lfuse
