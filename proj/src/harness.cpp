#include "ctm/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "ctm/parallel.hpp"
#include "ctm/serialize.hpp"

namespace ctm {

namespace fs = std::filesystem;

namespace {
// Salts for independent seed streams.
constexpr std::uint64_t kSamplerSalt = 0x5A4D50;  // training sampler
constexpr std::uint64_t kValSalt = 0x56414C;      // periodic validation
constexpr std::uint64_t kEvalSalt = 0x455641;     // standalone evaluation

double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}
}  // namespace

Episode EpisodeSource::draw(const EpisodeSpec& spec, Rng& rng) const {
    if (kind == Kind::toy) return gen_toy_episode(toy, spec, rng).episode;
    return sample_episode(*index, split, spec, rng);
}

EvalReport aggregate_eval(const std::vector<double>& per_episode_pct,
                          const std::vector<double>& per_episode_loss) {
    EvalReport r;
    r.per_episode = per_episode_pct;
    r.episodes = static_cast<std::int64_t>(per_episode_pct.size());
    if (r.episodes == 0) return r;
    double sum = 0;
    for (double a : per_episode_pct) sum += a;
    r.mean_acc = sum / static_cast<double>(r.episodes);
    if (!per_episode_loss.empty()) {
        double ls = 0;
        for (double l : per_episode_loss) ls += l;
        r.mean_loss = ls / static_cast<double>(per_episode_loss.size());
    }
    if (r.episodes >= 2) {
        double sq = 0;
        for (double a : per_episode_pct) sq += (a - r.mean_acc) * (a - r.mean_acc);
        const double sd = std::sqrt(sq / static_cast<double>(r.episodes - 1));
        r.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(r.episodes));
    }
    return r;
}

double lr_at(std::int64_t episode, const Config& cfg) {
    const auto drops = static_cast<double>(episode / cfg.train_lr_drop_every);
    return cfg.train_lr * std::pow(cfg.train_lr_decay_factor, drops);
}

EvalReport evaluate(FewShotModel<float>& model, const EpisodeSource& src,
                    const EpisodeSpec& spec, std::int64_t episodes,
                    std::uint64_t seed_base, LossKind loss, bool serial) {
    std::vector<double> acc(static_cast<size_t>(episodes), 0.0);
    std::vector<double> losses(static_cast<size_t>(episodes), 0.0);
    auto run_one = [&](std::int64_t i) {
        Rng rng(mix_seed(seed_base, static_cast<std::uint64_t>(i)));
        Episode ep = src.draw(spec, rng);
        auto fwd = model.forward_episode(ep.support_images, ep.query_images, false);
        acc[static_cast<size_t>(i)] =
            100.0 * episode_accuracy(fwd.scores, ep.query_labels);
        losses[static_cast<size_t>(i)] =
            static_cast<double>(episode_loss(fwd.scores, ep.query_labels, loss).item());
    };
    if (serial) {
        for (std::int64_t i = 0; i < episodes; ++i) run_one(i);
    } else {
        parallel_for(episodes, 1, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t i = b; i < e; ++i) run_one(i);
        });
    }
    return aggregate_eval(acc, losses);
}

void export_embeddings(FewShotModel<float>& model, const EpisodeSource& src,
                       const EpisodeSpec& spec, std::int64_t episodes,
                       std::uint64_t seed_base, std::ostream& os) {
    bool wrote_header = false;
    char buf[32];
    auto write_rows = [&](std::int64_t episode_id, const Tensor<float>& feats,
                          const Episode& ep, bool support) {
        const std::int64_t rows = feats.dim(0);
        const std::int64_t len = feats.numel() / rows;
        if (!wrote_header) {
            os << "CTME1 " << len << "\n";
            wrote_header = true;
        }
        const auto& labels = support ? ep.support_labels : ep.query_labels;
        // per-class support rows carry one row per episode label
        const bool per_class = support && rows == ep.n &&
                               static_cast<std::int64_t>(labels.size()) != rows;
        for (std::int64_t r = 0; r < rows; ++r) {
            const int label = per_class ? static_cast<int>(r)
                                        : labels[static_cast<size_t>(r)];
            os << episode_id << "," << ep.class_map[static_cast<size_t>(label)] << ","
               << (support ? "support" : "query");
            const float* row = feats.data().data() + r * len;
            for (std::int64_t i = 0; i < len; ++i) {
                std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(row[i]));
                os << "," << buf;
            }
            os << "\n";
        }
    };
    for (std::int64_t e = 0; e < episodes; ++e) {
        Rng rng(mix_seed(seed_base, kEvalSalt, static_cast<std::uint64_t>(e)));
        Episode ep = src.draw(spec, rng);
        auto fwd = model.forward_episode(ep.support_images, ep.query_images, false);
        write_rows(e, fwd.improved_support, ep, true);
        write_rows(e, fwd.improved_query, ep, false);
    }
}

Trainer::Trainer(const Config& cfg, const fs::path& out_dir)
    : cfg_(cfg),
      out_dir_(out_dir),
      model_(to_model_config(cfg), cfg.train_seed),
      sampler_rng_(mix_seed(mix_seed(cfg.train_seed, cfg.episode_seed), kSamplerSalt)) {
    model_.collect_params(named_params_);
    for (auto& [k, t] : named_params_) params_.push_back(t);
    opt_.lr = static_cast<float>(cfg.train_lr);
    opt_.beta1 = static_cast<float>(cfg.train_adam_beta1);
    opt_.beta2 = static_cast<float>(cfg.train_adam_beta2);
    opt_.eps = static_cast<float>(cfg.train_adam_eps);
    opt_.weight_decay = static_cast<float>(cfg.train_weight_decay);
    opt_.init(params_);
    if (cfg.data_source == "dir") {
        index_ = load_dataset_index(cfg.data_root);
        index_->preload();
    }
}

EpisodeSource Trainer::train_source() const {
    if (cfg_.data_source == "toy") return EpisodeSource::toy_source(to_toy_spec(cfg_));
    return EpisodeSource::dir_source(*index_, "train");
}

EpisodeSource Trainer::val_source() const {
    if (cfg_.data_source == "toy") return EpisodeSource::toy_source(to_toy_spec(cfg_));
    return EpisodeSource::dir_source(*index_, "val");
}

void Trainer::log_row(std::int64_t episode, const char* split, double loss,
                      double acc_pct, double lr, double wall_ms) {
    std::ofstream os(out_dir_ / "metrics.csv", std::ios::app);
    char line[256];
    std::snprintf(line, sizeof(line), "%lld,%s,%.6f,%.4f,%.8g,%.1f\n",
                  static_cast<long long>(episode), split, loss, acc_pct, lr, wall_ms);
    os << line;
}

Checkpoint Trainer::make_checkpoint() {
    Checkpoint ckpt;
    ckpt.tensors = named_params_;
    NamedTensors<float> buffers;
    model_.collect_buffers(buffers);
    for (auto& [k, t] : buffers) ckpt.tensors.emplace_back(k, t);
    for (size_t i = 0; i < named_params_.size(); ++i) {
        ckpt.tensors.emplace_back(
            "opt." + named_params_[i].first + ".m",
            Tensor<float>::from_data(named_params_[i].second.shape(), opt_.m[i]));
        ckpt.tensors.emplace_back(
            "opt." + named_params_[i].first + ".v",
            Tensor<float>::from_data(named_params_[i].second.shape(), opt_.v[i]));
    }
    ckpt.episode = episode_;
    ckpt.adam_t = opt_.t;
    ckpt.rng_state = {sampler_rng_.s[0], sampler_rng_.s[1], sampler_rng_.s[2],
                      sampler_rng_.s[3]};
    ckpt.best_val_acc = best_val_acc_;
    ckpt.config_text = serialize_config(cfg_);
    return ckpt;
}

void Trainer::resume_from(const Checkpoint& ckpt) {
    NamedTensors<float> buffers;
    model_.collect_buffers(buffers);
    auto find = [&](const std::string& key) -> const Tensor<float>* {
        for (const auto& [k, t] : ckpt.tensors)
            if (k == key) return &t;
        return nullptr;
    };
    auto restore = [&](NamedTensors<float>& dst) {
        for (auto& [key, tensor] : dst) {
            const Tensor<float>* src = find(key);
            if (!src) throw SerializeError("checkpoint missing tensor '" + key + "'");
            if (src->shape() != tensor.shape())
                throw SerializeError("checkpoint tensor '" + key + "' has shape " +
                                     shape_str(src->shape()) + ", model expects " +
                                     shape_str(tensor.shape()));
            std::copy_n(src->data().data(), tensor.numel(), tensor.data().data());
        }
    };
    restore(named_params_);
    restore(buffers);
    for (size_t i = 0; i < named_params_.size(); ++i) {
        const Tensor<float>* m = find("opt." + named_params_[i].first + ".m");
        const Tensor<float>* v = find("opt." + named_params_[i].first + ".v");
        if (!m || !v)
            throw SerializeError("checkpoint missing optimizer state for '" +
                                 named_params_[i].first + "'");
        opt_.m[i].assign(m->data().begin(), m->data().end());
        opt_.v[i].assign(v->data().begin(), v->data().end());
    }
    opt_.t = ckpt.adam_t;
    episode_ = ckpt.episode;
    best_val_acc_ = ckpt.best_val_acc;
    sampler_rng_.s = {ckpt.rng_state[0], ckpt.rng_state[1], ckpt.rng_state[2],
                      ckpt.rng_state[3]};
}

int Trainer::run() {
    fs::create_directories(out_dir_);
    {
        // header only when starting a fresh metrics file
        const fs::path mpath = out_dir_ / "metrics.csv";
        if (!fs::exists(mpath) || episode_ == 0) {
            std::ofstream os(mpath, std::ios::trunc);
            os << "episode,split,loss,accuracy,lr,wall_ms\n";
        }
    }
    const EpisodeSource train_src = train_source();
    const EpisodeSource val_src = val_source();
    EpisodeSpec spec = to_episode_spec(cfg_);
    EpisodeSpec val_spec = spec;
    val_spec.q = static_cast<int>(cfg_.eval_q);
    const LossKind loss_kind = loss_kind_of(cfg_);
    const double t0 = now_ms();

    while (episode_ < cfg_.train_episodes) {
        const double lr = lr_at(episode_, cfg_);
        Episode ep = train_src.draw(spec, sampler_rng_);
        float loss_value = 0;
        double acc = 0;
        Tape<float> tape;
        {
            TapeScope<float> scope(tape);
            auto fwd = model_.forward_episode(ep.support_images, ep.query_images, true);
            auto loss = episode_loss(fwd.scores, ep.query_labels, loss_kind);
            loss_value = loss.item();
            acc = episode_accuracy(fwd.scores, ep.query_labels);
            if (!std::isfinite(loss_value)) {
                std::cerr << "non-finite loss " << loss_value << " at episode "
                          << episode_ << " (lr=" << lr << ")\n";
                return 3;
            }
            tape.backward(loss);
        }
        clip_grad_norm(params_, static_cast<float>(cfg_.train_clip_max_norm));
        opt_.lr = static_cast<float>(lr);
        adam_step(params_, opt_);
        zero_grads(params_);
        ++episode_;

        if (episode_ % cfg_.train_log_every == 0)
            log_row(episode_, "train", loss_value, 100.0 * acc, lr, now_ms() - t0);

        if (cfg_.eval_every > 0 && episode_ % cfg_.eval_every == 0) {
            EvalReport rep = evaluate(
                model_, val_src, val_spec, cfg_.eval_episodes,
                mix_seed(cfg_.train_seed, kValSalt, static_cast<std::uint64_t>(episode_)),
                loss_kind, cfg_.eval_workers == 1);
            log_row(episode_, "val", rep.mean_loss, rep.mean_acc, lr, now_ms() - t0);
            if (rep.mean_acc > best_val_acc_) {
                best_val_acc_ = rep.mean_acc;
                save_checkpoint(make_checkpoint(), out_dir_ / "checkpoint_best.ctmk");
            }
        }
    }
    save_checkpoint(make_checkpoint(), out_dir_ / "checkpoint_latest.ctmk");
    return 0;
}

}  // namespace ctm
