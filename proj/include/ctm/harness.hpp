#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ctm/config.hpp"
#include "ctm/episodes.hpp"
#include "ctm/model.hpp"
#include "ctm/optim.hpp"
#include "ctm/synth.hpp"

namespace ctm {

// Where episodes come from: the toy generator or a directory dataset split.
struct EpisodeSource {
    enum class Kind { toy, dir };
    Kind kind = Kind::toy;
    ToySpec toy;
    const DatasetIndex* index = nullptr;
    std::string split;

    Episode draw(const EpisodeSpec& spec, Rng& rng) const;

    static EpisodeSource toy_source(const ToySpec& spec) {
        EpisodeSource s;
        s.kind = Kind::toy;
        s.toy = spec;
        return s;
    }
    static EpisodeSource dir_source(const DatasetIndex& index, std::string split) {
        EpisodeSource s;
        s.kind = Kind::dir;
        s.index = &index;
        s.split = std::move(split);
        return s;
    }
};

struct EvalReport {
    double mean_acc = 0;   // percent
    double ci95 = 0;       // half-width, percent
    double mean_loss = 0;
    std::vector<double> per_episode;  // percent
    std::int64_t episodes = 0;
};

// mean and 1.96 * stddev / sqrt(E); a single episode has CI 0 by convention.
EvalReport aggregate_eval(const std::vector<double>& per_episode_pct,
                          const std::vector<double>& per_episode_loss);

// lr0 * factor^floor(episode / drop_every).
double lr_at(std::int64_t episode, const Config& cfg);

struct Checkpoint {
    NamedTensors<float> tensors;  // params, buffers, optimizer moments
    std::int64_t episode = 0;
    std::int64_t adam_t = 0;
    std::array<std::uint64_t, 4> rng_state{};
    double best_val_acc = -1.0;
    std::string config_text;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Evaluates E episodes drawn from an eval-dedicated seed stream; episodes run
// in parallel over an immutable parameter snapshot and never touch training
// state. Per-episode accuracy follows the averaged-score argmax rule.
EvalReport evaluate(FewShotModel<float>& model, const EpisodeSource& src,
                    const EpisodeSpec& spec, std::int64_t episodes,
                    std::uint64_t seed_base, LossKind loss, bool serial = false);

// Writes "CTME1 <vector_len>" then one row per improved support/query vector:
// episode_id,class_id,role,v0,... with 9 significant digits.
void export_embeddings(FewShotModel<float>& model, const EpisodeSource& src,
                       const EpisodeSpec& spec, std::int64_t episodes,
                       std::uint64_t seed_base, std::ostream& os);

class Trainer {
public:
    Trainer(const Config& cfg, const std::filesystem::path& out_dir);

    // Restores parameters, optimizer state, sampler rng and episode counter.
    void resume_from(const Checkpoint& ckpt);

    // Returns 0 on completion, 3 on non-finite loss (diagnostic on stderr).
    int run();

    Checkpoint make_checkpoint();
    FewShotModel<float>& model() { return model_; }
    std::int64_t episode() const { return episode_; }
    const Config& config() const { return cfg_; }

private:
    void log_row(std::int64_t episode, const char* split, double loss, double acc_pct,
                 double lr, double wall_ms);
    EpisodeSource train_source() const;
    EpisodeSource val_source() const;

    Config cfg_;
    std::filesystem::path out_dir_;
    FewShotModel<float> model_;
    NamedTensors<float> named_params_;
    std::vector<Tensor<float>> params_;
    AdamState<float> opt_;
    Rng sampler_rng_;
    std::int64_t episode_ = 0;
    double best_val_acc_ = -1.0;
    std::optional<DatasetIndex> index_;
};

}  // namespace ctm
