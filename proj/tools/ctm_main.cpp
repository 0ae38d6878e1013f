// Command-line entry point: episodic training, evaluation, gradient checks,
// toy dataset generation and embedding export.
//
// Exit codes: 0 success, 2 usage/config error, 3 numeric failure.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ctm/config.hpp"
#include "ctm/gradcheck.hpp"
#include "ctm/harness.hpp"
#include "ctm/serialize.hpp"
#include "ctm/synth.hpp"

namespace fs = std::filesystem;
using namespace ctm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

Config load_and_validate(const std::string& path) {
    Config cfg = load_config_file(path);
    validate_config(cfg);
    return cfg;
}

int cmd_train(const std::string& config_path, const std::string& resume_path,
              const std::string& out_dir) {
    Config cfg = load_and_validate(config_path);
    Trainer trainer(cfg, out_dir);
    if (!resume_path.empty()) {
        Checkpoint ckpt = load_checkpoint(resume_path);
        Config ckpt_cfg = parse_config_text(ckpt.config_text);
        if (config_hash(ckpt_cfg) != config_hash(cfg)) {
            std::cerr << "resume checkpoint was trained with a different config\n";
            return kExitConfig;
        }
        trainer.resume_from(ckpt);
    }
    return trainer.run();
}

// Builds the model+source described by a checkpoint (or an explicit config).
struct LoadedModel {
    Config cfg;
    std::unique_ptr<FewShotModel<float>> model;
    std::optional<DatasetIndex> index;
};

LoadedModel load_model(const std::string& ckpt_path, const std::string& config_path,
                       bool need_data) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    Config cfg = config_path.empty() ? parse_config_text(ckpt.config_text)
                                     : load_and_validate(config_path);
    if (!config_path.empty()) {
        Config embedded = parse_config_text(ckpt.config_text);
        if (config_hash(embedded) != config_hash(cfg))
            throw ConfigError("checkpoint was trained with a different config");
    }
    LoadedModel out;
    out.cfg = cfg;
    out.model = std::make_unique<FewShotModel<float>>(to_model_config(cfg),
                                                      cfg.train_seed);
    NamedTensors<float> params, buffers;
    out.model->collect_params(params);
    out.model->collect_buffers(buffers);
    auto restore = [&](NamedTensors<float>& dst) {
        for (auto& [key, tensor] : dst) {
            bool found = false;
            for (const auto& [k, t] : ckpt.tensors)
                if (k == key) {
                    std::copy_n(t.data().data(), tensor.numel(), tensor.data().data());
                    found = true;
                    break;
                }
            if (!found) throw SerializeError("checkpoint missing tensor '" + key + "'");
        }
    };
    restore(params);
    restore(buffers);
    if (need_data && cfg.data_source == "dir") {
        out.index = load_dataset_index(cfg.data_root);
        out.index->preload();
    }
    return out;
}

EpisodeSource source_for(const LoadedModel& lm, const std::string& split) {
    if (lm.cfg.data_source == "toy") return EpisodeSource::toy_source(to_toy_spec(lm.cfg));
    return EpisodeSource::dir_source(*lm.index, split);
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path,
             const std::string& split, std::int64_t episodes,
             const std::string& out_csv) {
    LoadedModel lm = load_model(ckpt_path, config_path, true);
    EpisodeSpec spec = to_episode_spec(lm.cfg);
    spec.q = static_cast<int>(lm.cfg.eval_q);
    const std::uint64_t seed =
        mix_seed(lm.cfg.train_seed, 0x455641, std::hash<std::string>{}(split));
    EvalReport rep = evaluate(*lm.model, source_for(lm, split), spec, episodes, seed,
                              loss_kind_of(lm.cfg), lm.cfg.eval_workers == 1);
    std::printf("mean=%.4f ci95=%.4f\n", rep.mean_acc, rep.ci95);
    if (!out_csv.empty()) {
        std::ofstream os(out_csv);
        os << "episode,accuracy\n";
        for (size_t i = 0; i < rep.per_episode.size(); ++i) {
            char line[64];
            std::snprintf(line, sizeof(line), "%zu,%.6f\n", i, rep.per_episode[i]);
            os << line;
        }
    }
    return kExitOk;
}

int cmd_gradcheck(double tol) {
    const auto t0 = std::chrono::steady_clock::now();
    auto results = run_gradcheck_suite();
    bool ok = true;
    for (const auto& r : results) {
        const bool pass = r.max_rel_err < tol;
        ok = ok && pass;
        std::printf("%-28s max_rel_err=%.3e %s\n", r.name.c_str(), r.max_rel_err,
                    pass ? "ok" : "FAIL");
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%zu checks in %.1fs\n", results.size(), secs);
    return ok ? kExitOk : kExitNumeric;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir) {
    Config cfg = load_and_validate(config_path);
    gen_toy_dataset(to_toy_spec(cfg), static_cast<int>(cfg.synth_train_classes),
                    static_cast<int>(cfg.synth_val_classes),
                    static_cast<int>(cfg.synth_test_classes),
                    static_cast<int>(cfg.synth_images_per_class), out_dir);
    std::printf("wrote toy dataset to %s\n", out_dir.c_str());
    return kExitOk;
}

int cmd_export(const std::string& ckpt_path, const std::string& config_path,
               const std::string& split, std::int64_t episodes,
               const std::string& out_path) {
    LoadedModel lm = load_model(ckpt_path, config_path, true);
    EpisodeSpec spec = to_episode_spec(lm.cfg);
    std::ofstream os(out_path);
    if (!os) {
        std::cerr << "cannot open " << out_path << " for writing\n";
        return kExitConfig;
    }
    export_embeddings(*lm.model, source_for(lm, split), spec, episodes,
                      mix_seed(lm.cfg.train_seed, 0x4558), os);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"episodic few-shot learner with a category traversal module"};
    app.require_subcommand(1);

    std::string config_path, resume_path, ckpt_path, split = "test", out;
    std::int64_t episodes = 600;
    double tol = 1e-4;

    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--resume", resume_path, "checkpoint to resume from");
    train->add_option("--out", out, "output directory")->default_val("ctm_run");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--config", config_path, "config file (defaults to embedded)");
    eval->add_option("--split", split, "dataset split")->default_val("test");
    eval->add_option("--episodes", episodes, "episode count")->default_val(600);
    eval->add_option("--out", out, "per-episode accuracy CSV");

    auto* gc = app.add_subcommand("gradcheck", "run the finite-difference suite");
    gc->add_option("--tol", tol, "max relative error")->default_val(1e-4);

    auto* synth = app.add_subcommand("synth", "write a toy shape/color dataset");
    synth->add_option("--config", config_path, "config file")->required();
    synth->add_option("--out", out, "output directory")->required();

    auto* exp = app.add_subcommand("export", "export improved feature embeddings");
    exp->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    exp->add_option("--config", config_path, "config file (defaults to embedded)");
    exp->add_option("--split", split, "dataset split")->default_val("test");
    exp->add_option("--episodes", episodes, "episode count")->default_val(50);
    exp->add_option("--out", out, "output file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (app.got_subcommand(train)) return cmd_train(config_path, resume_path, out);
        if (app.got_subcommand(eval))
            return cmd_eval(ckpt_path, config_path, split, episodes, out);
        if (app.got_subcommand(gc)) return cmd_gradcheck(tol);
        if (app.got_subcommand(synth)) return cmd_synth(config_path, out);
        if (app.got_subcommand(exp))
            return cmd_export(ckpt_path, config_path, split, episodes, out);
    } catch (const ConfigParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
