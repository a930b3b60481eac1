#include "risclip/config.hpp"

#include <fstream>
#include <set>

namespace risclip {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw ValidationError(where + ": unknown key '" + key + "'");
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ValidationError(where + "." + key + ": " + e.what());
    }
}

}  // namespace

static void parse_backbone(const json& j, BackboneConfig& b) {
    check_keys(j, {"image_size", "patch_size", "image_layers", "text_layers", "image_width",
                   "text_width", "shared_dim", "image_heads", "text_heads", "context_length",
                   "vocab_size"},
               "backbone");
    read_field(j, "image_size", b.image_size, "backbone");
    read_field(j, "patch_size", b.patch_size, "backbone");
    read_field(j, "image_layers", b.image_layers, "backbone");
    read_field(j, "text_layers", b.text_layers, "backbone");
    read_field(j, "image_width", b.image_width, "backbone");
    read_field(j, "text_width", b.text_width, "backbone");
    read_field(j, "shared_dim", b.shared_dim, "backbone");
    read_field(j, "image_heads", b.image_heads, "backbone");
    read_field(j, "text_heads", b.text_heads, "backbone");
    read_field(j, "context_length", b.context_length, "backbone");
    read_field(j, "vocab_size", b.vocab_size, "backbone");
}

static void parse_model(const json& j, ModelConfig& m) {
    check_keys(j, {"backbone", "n_adapter_layers", "n_cfe", "n_ske", "logit_scale_init",
                   "adapters", "cfe", "ske"},
               "model");
    if (j.contains("backbone")) parse_backbone(j.at("backbone"), m.backbone);
    read_field(j, "n_adapter_layers", m.n_adapter_layers, "model");
    read_field(j, "n_cfe", m.n_cfe, "model");
    read_field(j, "n_ske", m.n_ske, "model");
    read_field(j, "logit_scale_init", m.logit_scale_init, "model");
    read_field(j, "adapters", m.adapters, "model");
    read_field(j, "cfe", m.cfe, "model");
    read_field(j, "ske", m.ske, "model");
}

static void parse_augment(const json& j, AugmentConfig& a) {
    check_keys(j, {"enabled", "rotate_deg", "translate_frac", "scale_min", "scale_max",
                   "intensity"},
               "train.augment");
    read_field(j, "enabled", a.enabled, "train.augment");
    read_field(j, "rotate_deg", a.rotate_deg, "train.augment");
    read_field(j, "translate_frac", a.translate_frac, "train.augment");
    read_field(j, "scale_min", a.scale_min, "train.augment");
    read_field(j, "scale_max", a.scale_max, "train.augment");
    read_field(j, "intensity", a.intensity, "train.augment");
}

static void parse_train(const json& j, TrainConfig& t) {
    check_keys(j, {"lr_init", "weight_decay", "beta1", "beta2", "poly_power", "batch_size",
                   "stage1_epochs", "stage2_epochs", "seed", "clip_grad_norm", "augment"},
               "train");
    read_field(j, "lr_init", t.lr_init, "train");
    read_field(j, "weight_decay", t.weight_decay, "train");
    read_field(j, "beta1", t.beta1, "train");
    read_field(j, "beta2", t.beta2, "train");
    read_field(j, "poly_power", t.poly_power, "train");
    read_field(j, "batch_size", t.batch_size, "train");
    read_field(j, "stage1_epochs", t.stage1_epochs, "train");
    read_field(j, "stage2_epochs", t.stage2_epochs, "train");
    read_field(j, "seed", t.seed, "train");
    read_field(j, "clip_grad_norm", t.clip_grad_norm, "train");
    if (j.contains("augment")) parse_augment(j.at("augment"), t.augment);
}

static void parse_loss(const json& j, LossConfig& l) {
    check_keys(j, {"lambda_dice", "lambda_focal", "alpha_focal", "gamma_focal", "dice_epsilon",
                   "focal_reduction"},
               "loss");
    read_field(j, "lambda_dice", l.lambda_dice, "loss");
    read_field(j, "lambda_focal", l.lambda_focal, "loss");
    read_field(j, "alpha_focal", l.alpha_focal, "loss");
    read_field(j, "gamma_focal", l.gamma_focal, "loss");
    read_field(j, "dice_epsilon", l.dice_epsilon, "loss");
    read_field(j, "focal_reduction", l.focal_reduction, "loss");
}

static void parse_decoder(const json& j, DecoderConfig& d) {
    check_keys(j, {"channels", "upsample"}, "decoder");
    read_field(j, "channels", d.channels, "decoder");
    read_field(j, "upsample", d.upsample, "decoder");
}

static void parse_synthetic(const json& j, SyntheticSpec& s) {
    check_keys(j, {"seed", "n_samples", "image_size", "shapes", "colors", "relations",
                   "distractors", "relational_fraction", "size_range"},
               "synthetic");
    read_field(j, "seed", s.seed, "synthetic");
    read_field(j, "n_samples", s.n_samples, "synthetic");
    read_field(j, "image_size", s.image_size, "synthetic");
    read_field(j, "shapes", s.shapes, "synthetic");
    read_field(j, "colors", s.colors, "synthetic");
    read_field(j, "relations", s.relations, "synthetic");
    if (j.contains("distractors")) {
        const auto& d = j.at("distractors");
        if (!d.is_array() || d.size() != 2)
            throw ValidationError("synthetic.distractors: expected [min,max]");
        s.distractors_min = d[0].get<int>();
        s.distractors_max = d[1].get<int>();
    }
    read_field(j, "relational_fraction", s.relational_fraction, "synthetic");
    if (j.contains("size_range")) {
        const auto& r = j.at("size_range");
        if (!r.is_array() || r.size() != 2)
            throw ValidationError("synthetic.size_range: expected [min,max]");
        s.min_size_frac = r[0].get<double>();
        s.max_size_frac = r[1].get<double>();
    }
}

RunConfig parse_run_config(const json& j) {
    check_keys(j, {"seed", "model", "decoder", "loss", "train", "synthetic", "data",
                   "vocab_words"},
               "config");
    RunConfig cfg;
    read_field(j, "seed", cfg.seed, "config");
    if (j.contains("model")) parse_model(j.at("model"), cfg.model);
    if (j.contains("decoder")) parse_decoder(j.at("decoder"), cfg.decoder);
    if (j.contains("loss")) parse_loss(j.at("loss"), cfg.loss);
    if (j.contains("train")) parse_train(j.at("train"), cfg.train);
    if (j.contains("synthetic")) parse_synthetic(j.at("synthetic"), cfg.synthetic);
    if (j.contains("data")) {
        check_keys(j.at("data"), {"manifest", "vocab"}, "data");
        read_field(j.at("data"), "manifest", cfg.data_manifest, "data");
        read_field(j.at("data"), "vocab", cfg.vocab_path, "data");
    }
    read_field(j, "vocab_words", cfg.vocab_words, "config");
    cfg.validate();
    return cfg;
}

void RunConfig::validate() const {
    model.validate();
    decoder.validate();
    loss.validate();
    train.validate();
    synthetic.validate();
}

ordered_json run_config_to_json(const RunConfig& cfg) {
    const BackboneConfig& b = cfg.model.backbone;
    ordered_json j;
    j["seed"] = cfg.seed;
    j["model"] = {
        {"backbone",
         {{"image_size", b.image_size},
          {"patch_size", b.patch_size},
          {"image_layers", b.image_layers},
          {"text_layers", b.text_layers},
          {"image_width", b.image_width},
          {"text_width", b.text_width},
          {"shared_dim", b.shared_dim},
          {"image_heads", b.image_heads},
          {"text_heads", b.text_heads},
          {"context_length", b.context_length},
          {"vocab_size", b.vocab_size}}},
        {"n_adapter_layers", cfg.model.n_adapter_layers},
        {"n_cfe", cfg.model.n_cfe},
        {"n_ske", cfg.model.n_ske},
        {"logit_scale_init", cfg.model.logit_scale_init},
        {"adapters", cfg.model.adapters},
        {"cfe", cfg.model.cfe},
        {"ske", cfg.model.ske}};
    j["decoder"] = {{"channels", cfg.decoder.channels}, {"upsample", cfg.decoder.upsample}};
    j["loss"] = {{"lambda_dice", cfg.loss.lambda_dice},
                 {"lambda_focal", cfg.loss.lambda_focal},
                 {"alpha_focal", cfg.loss.alpha_focal},
                 {"gamma_focal", cfg.loss.gamma_focal},
                 {"dice_epsilon", cfg.loss.dice_epsilon},
                 {"focal_reduction", cfg.loss.focal_reduction}};
    j["train"] = {{"lr_init", cfg.train.lr_init},
                  {"weight_decay", cfg.train.weight_decay},
                  {"beta1", cfg.train.beta1},
                  {"beta2", cfg.train.beta2},
                  {"poly_power", cfg.train.poly_power},
                  {"batch_size", cfg.train.batch_size},
                  {"stage1_epochs", cfg.train.stage1_epochs},
                  {"stage2_epochs", cfg.train.stage2_epochs},
                  {"seed", cfg.train.seed},
                  {"clip_grad_norm", cfg.train.clip_grad_norm},
                  {"augment",
                   {{"enabled", cfg.train.augment.enabled},
                    {"rotate_deg", cfg.train.augment.rotate_deg},
                    {"translate_frac", cfg.train.augment.translate_frac},
                    {"scale_min", cfg.train.augment.scale_min},
                    {"scale_max", cfg.train.augment.scale_max},
                    {"intensity", cfg.train.augment.intensity}}}};
    j["synthetic"] = {{"seed", cfg.synthetic.seed},
                      {"n_samples", cfg.synthetic.n_samples},
                      {"image_size", cfg.synthetic.image_size},
                      {"shapes", cfg.synthetic.shapes},
                      {"colors", cfg.synthetic.colors},
                      {"relations", cfg.synthetic.relations},
                      {"distractors", {cfg.synthetic.distractors_min, cfg.synthetic.distractors_max}},
                      {"relational_fraction", cfg.synthetic.relational_fraction},
                      {"size_range", {cfg.synthetic.min_size_frac, cfg.synthetic.max_size_frac}}};
    j["data"] = {{"manifest", cfg.data_manifest}, {"vocab", cfg.vocab_path}};
    j["vocab_words"] = cfg.vocab_words;
    return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

ParamStore init_run_params(const RunConfig& cfg) {
    ParamStore store;
    add_model_params(store, cfg.model, cfg.seed);
    add_decoder_params(store, cfg.model, cfg.decoder, cfg.seed);
    return store;
}

Vocabulary load_vocabulary_for(const RunConfig& cfg) {
    if (!cfg.vocab_words.empty()) return Vocabulary::from_words(cfg.vocab_words);
    std::filesystem::path vocab = cfg.vocab_path;
    if (vocab.empty()) {
        if (cfg.data_manifest.empty())
            throw ValidationError("no vocabulary: set data.vocab or data.manifest");
        vocab = std::filesystem::path(cfg.data_manifest).parent_path() / "vocab.json";
    }
    return Vocabulary::from_words(read_vocab_file(vocab));
}

}  // namespace risclip
