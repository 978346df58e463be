#pragma once

#include <filesystem>
#include <fstream>
#include <limits>

#include "dfssm/data.hpp"
#include "dfssm/network.hpp"

namespace dfssm {

// ---------------------------------------------------------------------------
// Losses. Both are means (not sums) so magnitudes are invariant to batch and
// image size.

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    check(pred.shape() == target.shape(),
          "l1_loss: shape mismatch " + pred.shape().str() + " vs " + target.shape().str());
    return mean_all(dfssm::abs(sub(pred, target)));
}

// Mean complex modulus of the spectrum difference over all half-plane bins.
template <typename T>
Tensor<T> freq_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    check(pred.shape() == target.shape(),
          "freq_loss: shape mismatch " + pred.shape().str() + " vs " + target.shape().str());
    ComplexSpectrum<T> sp = rfft2(pred);
    ComplexSpectrum<T> st = rfft2(target);
    return mean_all(complex_modulus(sub(sp.planes, st.planes)));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, double lambda_f) {
    check(lambda_f >= 0, "total_loss: lambda_f must be >= 0");
    Tensor<T> l1 = l1_loss(pred, target);
    if (lambda_f == 0.0) return l1;
    return add(l1, scale(freq_loss(pred, target), static_cast<T>(lambda_f)));
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay (applied before the adaptive update).
// Decay skips entries flagged decay=false (biases, norm affines, skip scales).

template <typename T>
struct OptimizerState {
    std::vector<std::vector<T>> m, v;
    std::int64_t step = 0;

    template <typename U>
    void init(const ParamRegistry<U>& reg) {
        m.clear();
        v.clear();
        for (const auto& e : reg.entries()) {
            m.emplace_back(e.tensor.data().size(), T(0));
            v.emplace_back(e.tensor.data().size(), T(0));
        }
        step = 0;
    }
};

template <typename T>
void adamw_step(ParamRegistry<T>& reg, OptimizerState<T>& state, double lr,
                const TrainConfig& cfg) {
    if (state.m.size() != reg.entries().size()) state.init(reg);
    ++state.step;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < reg.entries().size(); ++k) {
        auto& e = reg.entries()[k];
        auto& data = e.tensor.data();
        auto& grad = e.tensor.grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        const bool decay = e.decay && cfg.weight_decay > 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (decay) data[i] -= static_cast<T>(lr * cfg.weight_decay) * data[i];
            const double g = static_cast<double>(grad[i]);
            m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
            v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
    }
}

// lr_final + 0.5 (lr_init - lr_final)(1 + cos(pi t / T))
inline double cosine_lr(std::int64_t t, std::int64_t total, double lr_init, double lr_final) {
    if (total <= 0) return lr_init;
    check(t >= 0 && t <= total, "cosine_lr: t out of range");
    const double x = 3.14159265358979323846 * static_cast<double>(t) / static_cast<double>(total);
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + std::cos(x));
}

// ---------------------------------------------------------------------------
// Paired augmentation: one crop window and one flip decision pair applied to
// both images.

struct AugmentDecision {
    int ox = 0, oy = 0;
    bool flip_h = false, flip_v = false;
};

inline AugmentDecision draw_augment(int img_w, int img_h, int patch, Rng& rng) {
    if (patch > img_w || patch > img_h)
        throw UsageError("augment: patch " + std::to_string(patch) + " larger than image " +
                         std::to_string(img_w) + "x" + std::to_string(img_h));
    AugmentDecision d;
    d.ox = static_cast<int>(rng.range(0, img_w - patch));
    d.oy = static_cast<int>(rng.range(0, img_h - patch));
    d.flip_h = rng.bernoulli(0.5);
    d.flip_v = rng.bernoulli(0.5);
    return d;
}

inline Image apply_augment(const Image& img, const AugmentDecision& d, int patch) {
    Image out = Image::make(patch, patch);
    for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) {
            const int sx = d.flip_h ? d.ox + patch - 1 - x : d.ox + x;
            const int sy = d.flip_v ? d.oy + patch - 1 - y : d.oy + y;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    return out;
}

inline ImagePair augment(const ImagePair& pair, int patch, Rng& rng) {
    AugmentDecision d = draw_augment(pair.clean.width, pair.clean.height, patch, rng);
    ImagePair out;
    out.rainy = apply_augment(pair.rainy, d, patch);
    out.clean = apply_augment(pair.clean, d, patch);
    out.meta = pair.meta;
    return out;
}

// ---------------------------------------------------------------------------
// Training loop: sample batch -> augment -> forward -> loss -> backward ->
// AdamW with cosine-annealed lr. Writes checkpoints and a CSV metrics log
// (iter,loss_total,loss_l1,loss_freq,lr,psnr_val).

struct TrainLogRow {
    std::int64_t iter = 0;
    double loss_total = 0.0, loss_l1 = 0.0, loss_freq = 0.0, lr = 0.0, psnr_val = 0.0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    double final_loss = 0.0;
    std::string checkpoint_path;
};

template <typename T>
TrainResult train_loop(Model<T>& model, const std::vector<ImagePair>& dataset,
                       const TrainConfig& cfg, const std::string& out_dir) {
    if (dataset.empty()) throw UsageError("train_loop: empty dataset");
    if (cfg.iterations < 0) throw ConfigError("train config must set iterations");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    Rng batch_rng = named_stream(cfg.seed, "batch");
    Rng aug_rng = named_stream(cfg.seed, "augment");
    OptimizerState<T> opt;
    opt.init(model.params);

    std::ofstream csv(fs::path(out_dir) / "metrics.csv");
    if (!csv) throw IoError("cannot write metrics.csv under " + out_dir);
    csv << "iter,loss_total,loss_l1,loss_freq,lr,psnr_val\n";

    // held-out probe pair for psnr_val: the last pair of the dataset
    const ImagePair& probe = dataset.back();

    TrainResult result;
    const std::int64_t total = cfg.iterations;
    for (std::int64_t it = 1; it <= total; ++it) {
        const double lr = total > 1 ? cosine_lr(it - 1, total - 1, cfg.lr_init, cfg.lr_final)
                                    : cfg.lr_init;

        std::vector<Tensor<T>> rainy_list, clean_list;
        std::vector<std::size_t> indices;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::size_t idx =
                static_cast<std::size_t>(batch_rng.range(0, static_cast<std::int64_t>(dataset.size()) - 1));
            indices.push_back(idx);
            ImagePair patch = augment(dataset[idx], cfg.patch_size, aug_rng);
            rainy_list.push_back(image_to_tensor<T>(patch.rainy));
            clean_list.push_back(image_to_tensor<T>(patch.clean));
        }
        // stack along the batch axis
        Tensor<T> rainy = Tensor<T>::zeros({cfg.batch_size, 3, cfg.patch_size, cfg.patch_size});
        Tensor<T> clean = Tensor<T>::zeros({cfg.batch_size, 3, cfg.patch_size, cfg.patch_size});
        const std::size_t one = rainy_list[0].data().size();
        for (int b = 0; b < cfg.batch_size; ++b) {
            std::copy(rainy_list[b].data().begin(), rainy_list[b].data().end(),
                      rainy.data().begin() + b * one);
            std::copy(clean_list[b].data().begin(), clean_list[b].data().end(),
                      clean.data().begin() + b * one);
        }

        Tensor<T> pred = model.forward(rainy);
        Tensor<T> l1 = l1_loss(pred, clean);
        Tensor<T> loss = l1;
        Tensor<T> freq;
        const bool use_freq = model.cfg.use_freq_loss && model.cfg.lambda_f > 0.0;
        if (use_freq) {
            freq = freq_loss(pred, clean);
            loss = add(l1, scale(freq, static_cast<T>(model.cfg.lambda_f)));
        }

        const double loss_val = static_cast<double>(loss.item());
        if (!std::isfinite(loss_val)) {
            std::ostringstream diag;
            diag << "non-finite loss at iteration " << it << " (seed " << cfg.seed
                 << ", batch indices";
            for (auto i : indices) diag << " " << i;
            diag << ")";
            throw NumericError(diag.str());
        }

        model.params.zero_grads();
        backward(loss);

        if (cfg.grad_clip > 0.0) {
            double norm2 = 0.0;
            for (auto& e : model.params.entries())
                for (T g : e.tensor.grad()) norm2 += static_cast<double>(g) * g;
            const double norm = std::sqrt(norm2);
            if (norm > cfg.grad_clip) {
                const T s = static_cast<T>(cfg.grad_clip / norm);
                for (auto& e : model.params.entries())
                    for (T& g : e.tensor.grad()) g *= s;
            }
        }
        adamw_step(model.params, opt, lr, cfg);

        result.final_loss = loss_val;
        if (it % cfg.log_every == 0 || it == total) {
            TrainLogRow row;
            row.iter = it;
            row.loss_total = loss_val;
            row.loss_l1 = static_cast<double>(l1.item());
            row.lr = lr;
            {
                NoGradGuard ng;
                row.loss_freq = use_freq ? static_cast<double>(freq.item())
                                         : static_cast<double>(freq_loss(pred.detach(), clean.detach()).item());
                Tensor<T> out = model.forward(image_to_tensor<T>(probe.rainy));
                row.psnr_val = psnr_y(tensor_to_image(out), probe.clean);
            }
            csv << row.iter << "," << row.loss_total << "," << row.loss_l1 << "," << row.loss_freq
                << "," << row.lr << "," << row.psnr_val << "\n";
            csv.flush();
            result.log.push_back(row);
        }
        if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it != total) {
            save_checkpoint(model.params,
                            (fs::path(out_dir) / ("ckpt_" + std::to_string(it) + ".dfsm")).string());
        }
    }

    result.checkpoint_path = (fs::path(out_dir) / "ckpt_final.dfsm").string();
    save_checkpoint(model.params, result.checkpoint_path);
    return result;
}

// Mean Y-channel PSNR/SSIM of model outputs against clean references.
template <typename T>
std::pair<double, double> evaluate(const Model<T>& model, const std::vector<ImagePair>& pairs) {
    NoGradGuard ng;
    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (const auto& p : pairs) {
        Image out = tensor_to_image(model.forward(image_to_tensor<T>(p.rainy)));
        psnr_sum += psnr_y(out, p.clean);
        ssim_sum += ssim_y(out, p.clean);
    }
    return {psnr_sum / static_cast<double>(pairs.size()),
            ssim_sum / static_cast<double>(pairs.size())};
}

}  // namespace dfssm
