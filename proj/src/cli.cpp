#include "risclip/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "risclip/checkpoint.hpp"
#include "risclip/png_io.hpp"
#include "risclip/visualize.hpp"

namespace risclip {

namespace {

struct CliOptions {
    std::string config_path, out_path, ckpt_path, manifest_path, report_path;
    std::string image_path, text, stage = "both";
    bool patch_level = false;
};

void cmd_gen_data(const CliOptions& opt) {
    const RunConfig cfg = load_run_config(opt.config_path);
    const GenerateResult result = generate_synthetic(cfg.synthetic, opt.out_path);
    std::cout << "generated " << result.samples.size() << " samples ("
              << result.skipped << " skipped) in " << opt.out_path << "\n";
}

std::vector<LoadedSample> load_training_data(const RunConfig& cfg, const Vocabulary& vocab) {
    if (cfg.data_manifest.empty())
        throw ValidationError("config: data.manifest is required for this command");
    std::vector<LoadedSample> data =
        load_dataset(cfg.data_manifest, vocab, cfg.model.backbone);
    if (data.empty()) throw ValidationError("dataset is empty: " + cfg.data_manifest);
    return data;
}

void cmd_train(const CliOptions& opt) {
    if (opt.stage != "1" && opt.stage != "2" && opt.stage != "both")
        throw ValidationError("train: --stage must be 1, 2 or both");

    RunConfig cfg;
    ParamStore params;
    TrainState state;
    if (!opt.ckpt_path.empty()) {
        LoadedCheckpoint loaded = load_checkpoint(opt.ckpt_path);
        cfg = loaded.config;
        params = std::move(loaded.params);
        if (loaded.has_state) state = std::move(loaded.state);
        if (!opt.config_path.empty())
            std::cerr << "note: --ckpt given, ignoring --config and using the embedded config\n";
    } else {
        if (opt.stage == "2")
            throw ValidationError(
                "train --stage 2 needs a stage-1 checkpoint: pass --ckpt <stage1.ckpt>");
        if (opt.config_path.empty()) throw ValidationError("train: --config is required");
        cfg = load_run_config(opt.config_path);
        const Vocabulary vocab = load_vocabulary_for(cfg);
        cfg.vocab_words = vocab.words;  // embed for self-contained checkpoints
        params = init_run_params(cfg);
    }

    const Vocabulary vocab = Vocabulary::from_words(cfg.vocab_words);
    const std::vector<LoadedSample> data = load_training_data(cfg, vocab);

    std::ofstream history_file;
    HistorySink history = nullptr;
    if (!opt.report_path.empty()) {
        history_file.open(opt.report_path);
        if (!history_file)
            throw ValidationError("cannot write history: " + opt.report_path);
        history = [&](const HistoryRecord& r) {
            nlohmann::ordered_json j;
            j["step"] = r.step;
            j["stage"] = r.stage;
            j["loss"] = r.loss;
            j["lr"] = r.lr;
            history_file << j.dump() << '\n';
        };
    }

    if (opt.stage == "1" || opt.stage == "both")
        train_stage1(params, cfg.model, cfg.loss, data, cfg.train, state, history);
    if (opt.stage == "2" || opt.stage == "both") {
        if (opt.stage == "2" && state.stage < 1)
            throw ValidationError("train --stage 2: checkpoint carries no stage-1 training state");
        train_stage2(params, cfg.model, cfg.decoder, cfg.loss, data, cfg.train, state, history);
    }
    save_checkpoint(params, cfg, &state, opt.out_path);
    std::cout << "saved checkpoint " << opt.out_path << " (stage " << state.stage << ", step "
              << state.step << ")\n";
}

void cmd_eval(const CliOptions& opt) {
    LoadedCheckpoint loaded = load_checkpoint(opt.ckpt_path);
    const Vocabulary vocab = Vocabulary::from_words(loaded.config.vocab_words);
    const std::vector<LoadedSample> data =
        load_dataset(opt.manifest_path, vocab, loaded.config.model.backbone);
    if (data.empty()) throw ValidationError("dataset is empty: " + opt.manifest_path);
    const MetricsReport report =
        opt.patch_level
            ? evaluate_patch_level(loaded.params, loaded.config.model, data)
            : evaluate_pixel_level(loaded.params, loaded.config.model, loaded.config.decoder, data);
    std::ofstream out(opt.report_path);
    if (!out) throw ValidationError("cannot write report: " + opt.report_path);
    out << report.to_json();
    std::cout << report.to_json();
}

void cmd_predict(const CliOptions& opt) {
    LoadedCheckpoint loaded = load_checkpoint(opt.ckpt_path);
    const Vocabulary vocab = Vocabulary::from_words(loaded.config.vocab_words);
    const Tensor<float> image = read_png_rgb(opt.image_path);
    const TokenSequence tokens = tokenize(opt.text, vocab, loaded.config.model.backbone);
    const Tensor<std::uint8_t> mask = predict_mask(loaded.params, loaded.config.model,
                                                   loaded.config.decoder, tokens, image);
    write_png_mask(opt.out_path, mask);
    std::cout << "wrote " << opt.out_path << "\n";
}

void cmd_visualize(const CliOptions& opt) {
    LoadedCheckpoint loaded = load_checkpoint(opt.ckpt_path);
    const Vocabulary vocab = Vocabulary::from_words(loaded.config.vocab_words);
    const std::vector<LoadedSample> data =
        load_dataset(opt.manifest_path, vocab, loaded.config.model.backbone);
    std::filesystem::create_directories(opt.out_path);
    for (const auto& s : data) {
        const GroundingMap gm =
            predict_grounding(loaded.params, loaded.config.model, s.tokens, s.image);
        const Tensor<std::uint8_t> pred = predict_mask(loaded.params, loaded.config.model,
                                                       loaded.config.decoder, s.tokens, s.image);
        const Tensor<float> overlay = render_overlay(s.image, pred, s.mask, gm);
        write_png_rgb(std::filesystem::path(opt.out_path) / (s.sample_id + ".png"), overlay);
    }
    std::cout << "wrote " << data.size() << " overlays to " << opt.out_path << "\n";
}

void cmd_inspect(const CliOptions& opt) {
    std::cout << checkpoint_manifest_text(opt.ckpt_path);
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"referring image segmentation with a frozen dual encoder"};
    app.require_subcommand(1);
    CliOptions opt;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--spec", opt.config_path, "run config JSON")->required();
    gen->add_option("--out", opt.out_path, "output directory")->required();

    CLI::App* train = app.add_subcommand("train", "train stage 1 / 2");
    train->add_option("--config", opt.config_path, "run config JSON");
    train->add_option("--out", opt.out_path, "output checkpoint")->required();
    train->add_option("--stage", opt.stage, "1, 2 or both")->default_val("both");
    train->add_option("--ckpt", opt.ckpt_path, "input checkpoint (stage 2 / continue)");
    train->add_option("--history", opt.report_path, "training history JSONL");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
    eval->add_option("--ckpt", opt.ckpt_path, "checkpoint")->required();
    eval->add_option("--manifest", opt.manifest_path, "dataset manifest")->required();
    eval->add_option("--report", opt.report_path, "metrics report JSON")->required();
    eval->add_flag("--patch", opt.patch_level, "evaluate the patch-level grounding map");

    CLI::App* predict = app.add_subcommand("predict", "segment one image");
    predict->add_option("--ckpt", opt.ckpt_path, "checkpoint")->required();
    predict->add_option("--image", opt.image_path, "input PNG")->required();
    predict->add_option("--text", opt.text, "referring expression")->required();
    predict->add_option("--out", opt.out_path, "output mask PNG")->required();

    CLI::App* vis = app.add_subcommand("visualize", "render prediction overlays");
    vis->add_option("--ckpt", opt.ckpt_path, "checkpoint")->required();
    vis->add_option("--manifest", opt.manifest_path, "dataset manifest")->required();
    vis->add_option("--out", opt.out_path, "output directory")->required();

    CLI::App* inspect = app.add_subcommand("inspect", "dump a checkpoint manifest");
    inspect->add_option("--ckpt", opt.ckpt_path, "checkpoint")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::cout << app.help();
            return 0;
        }
        std::cerr << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (gen->parsed()) cmd_gen_data(opt);
        else if (train->parsed()) cmd_train(opt);
        else if (eval->parsed()) cmd_eval(opt);
        else if (predict->parsed()) cmd_predict(opt);
        else if (vis->parsed()) cmd_visualize(opt);
        else if (inspect->parsed()) cmd_inspect(opt);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

int run_cli(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

}  // namespace risclip
