// concordia: synthetic-slide concordance regression pipeline CLI.
// Subcommands mirror the pipeline stages; `run` executes them end to end
// from a config file with resumable, digest-checked stage outputs.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "concordia/pipeline.hpp"

using concordia::pipeline::ConfigError;
using concordia::pipeline::KvConfig;
using concordia::pipeline::StageError;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "config file providing flag defaults");
    cmd->add_option("--seed", args.seed, "random seed");
}

KvConfig load_cfg(const CommonArgs& args) {
    if (args.config_path.empty()) return KvConfig{};
    return KvConfig::parse_file(args.config_path);
}

uint64_t resolve_seed(const CommonArgs& args, const KvConfig& cfg) {
    if (args.seed.has_value()) return *args.seed;
    return cfg.get_u64("seed", 42);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"concordia: weakly-supervised concordance regression on synthetic slides"};
    app.require_subcommand(1);

    // gen ---------------------------------------------------------------
    auto* gen = app.add_subcommand("gen", "generate a synthetic specimen corpus");
    CommonArgs gen_common;
    add_common(gen, gen_common);
    std::optional<int> gen_n, gen_panel, gen_w, gen_h;
    std::optional<double> gen_noise, gen_ink, gen_blur;
    std::string gen_out = "run_out";
    gen->add_option("--n-specimens", gen_n, "number of specimens");
    gen->add_option("--panel-size", gen_panel, "reviewers per specimen (3-5 typical)");
    gen->add_option("--noise", gen_noise, "lesion saturation noise sigma");
    gen->add_option("--width", gen_w, "slide width (multiple of 128)");
    gen->add_option("--height", gen_h, "slide height (multiple of 128)");
    gen->add_option("--ink-prob", gen_ink, "per-specimen ink stroke probability");
    gen->add_option("--blur-prob", gen_blur, "per-specimen blur region probability");
    gen->add_option("--out-dir", gen_out, "output directory")->required();

    // qc ----------------------------------------------------------------
    auto* qc_cmd = app.add_subcommand("qc", "segment, tile and quality-filter slides");
    CommonArgs qc_common;
    add_common(qc_cmd, qc_common);
    std::string qc_manifest, qc_out;
    std::optional<double> qc_blur, qc_ink, qc_tissue;
    qc_cmd->add_option("--manifest", qc_manifest, "manifest.jsonl path")->required();
    qc_cmd->add_option("--blur-threshold", qc_blur, "min Laplacian variance to keep a tile");
    qc_cmd->add_option("--ink-threshold", qc_ink, "max ink fraction to keep a tile");
    qc_cmd->add_option("--min-tissue", qc_tissue, "min tissue coverage per tile");
    qc_cmd->add_option("--out-dir", qc_out, "tile output directory")->required();

    // pretrain ------------------------------------------------------------
    auto* pre = app.add_subcommand("pretrain", "contrastive encoder pretraining");
    CommonArgs pre_common;
    add_common(pre, pre_common);
    std::string pre_manifest, pre_tiles, pre_out;
    std::optional<double> pre_tau, pre_lr, pre_momentum, pre_jitter, pre_noise;
    std::optional<int> pre_batch, pre_epochs, pre_dim;
    pre->add_option("--manifest", pre_manifest, "manifest.jsonl path")->required();
    pre->add_option("--tiles", pre_tiles, "qc tile directory")->required();
    pre->add_option("--tau", pre_tau, "NT-Xent temperature");
    pre->add_option("--batch", pre_batch, "source tiles per batch");
    pre->add_option("--lr", pre_lr, "learning rate");
    pre->add_option("--momentum", pre_momentum, "SGD momentum");
    pre->add_option("--epochs", pre_epochs, "training epochs");
    pre->add_option("--embed-dim", pre_dim, "embedding dimension");
    pre->add_option("--color-jitter", pre_jitter, "max color jitter");
    pre->add_option("--noise-variance", pre_noise, "augmentation noise variance");
    pre->add_option("--out", pre_out, "encoder output path")->required();

    // embed ---------------------------------------------------------------
    auto* emb = app.add_subcommand("embed", "embed tiles with a trained encoder");
    CommonArgs emb_common;
    add_common(emb, emb_common);
    std::string emb_encoder, emb_tiles, emb_out;
    emb->add_option("--encoder", emb_encoder, "encoder file")->required();
    emb->add_option("--tiles", emb_tiles, "qc tile directory")->required();
    emb->add_option("--out", emb_out, "embedding store output path")->required();

    // train ---------------------------------------------------------------
    auto* train = app.add_subcommand("train", "train the attention-MIL regressor");
    CommonArgs train_common;
    add_common(train, train_common);
    std::string train_store, train_manifest, train_out, train_loss, train_augment;
    std::string train_tiles, train_encoder;
    std::optional<double> train_lr, train_dropout, train_momentum, train_jitter_sigma;
    std::optional<int> train_epochs, train_accum;
    train->add_option("--embeddings", train_store, "embedding store")->required();
    train->add_option("--manifest", train_manifest, "manifest.jsonl path")->required();
    train->add_option("--loss", train_loss, "rmse|ce")->check(CLI::IsMember({"rmse", "ce", ""}));
    train->add_option("--dropout", train_dropout, "dropout probability");
    train->add_option("--lr", train_lr, "learning rate");
    train->add_option("--momentum", train_momentum, "SGD momentum");
    train->add_option("--epochs", train_epochs, "training epochs");
    train->add_option("--accum", train_accum, "bags per gradient step");
    train->add_option("--augment", train_augment, "none|jitter|reembed")
        ->check(CLI::IsMember({"none", "jitter", "reembed", ""}));
    train->add_option("--jitter-sigma", train_jitter_sigma, "embedding jitter scale");
    train->add_option("--tiles", train_tiles, "qc tile dir (reembed augmentation)");
    train->add_option("--encoder", train_encoder, "encoder file (reembed augmentation)");
    train->add_option("--out", train_out, "model output path")->required();

    // predict -------------------------------------------------------------
    auto* pred = app.add_subcommand("predict", "write per-specimen predictions.csv");
    CommonArgs pred_common;
    add_common(pred, pred_common);
    std::string pred_model, pred_store, pred_manifest, pred_out;
    pred->add_option("--model", pred_model, "trained model")->required();
    pred->add_option("--embeddings", pred_store, "embedding store")->required();
    pred->add_option("--manifest", pred_manifest, "manifest.jsonl path")->required();
    pred->add_option("--out", pred_out, "predictions.csv output path")->required();

    // eval ----------------------------------------------------------------
    auto* eval = app.add_subcommand("eval", "evaluate predictions on the test split");
    CommonArgs eval_common;
    add_common(eval, eval_common);
    std::string eval_preds, eval_manifest, eval_out, eval_gt, eval_store;
    std::optional<int> eval_resamples;
    std::optional<double> eval_confidence;
    eval->add_option("--predictions", eval_preds, "predictions.csv")->required();
    eval->add_option("--manifest", eval_manifest, "manifest.jsonl path")->required();
    eval->add_option("--gt-threshold", eval_gt, "ground-truth threshold or 'auto'");
    eval->add_option("--resamples", eval_resamples, "bootstrap resamples");
    eval->add_option("--confidence", eval_confidence, "CI confidence level");
    eval->add_option("--embeddings", eval_store, "embedding store (enables grid.svg)");
    eval->add_option("--out-dir", eval_out, "report output directory")->required();

    // run -----------------------------------------------------------------
    auto* run = app.add_subcommand("run", "run the full pipeline from a config file");
    CommonArgs run_common;
    add_common(run, run_common);
    std::string run_out_dir;
    run->add_option("--out-dir", run_out_dir, "override out_dir from the config");

    // print-config ----------------------------------------------------------
    auto* show = app.add_subcommand("print-config", "print the default config document");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            const KvConfig cfg = load_cfg(gen_common);
            concordia::pipeline::GenOptions opt;
            opt.n_specimens = gen_n.value_or(cfg.get_int("gen.n_specimens", 120));
            opt.gen.width = gen_w.value_or(cfg.get_int("gen.width", 512));
            opt.gen.height = gen_h.value_or(cfg.get_int("gen.height", 512));
            opt.gen.panel_size = gen_panel.value_or(cfg.get_int("gen.panel_size", 5));
            opt.gen.sigma_c = gen_noise.value_or(cfg.get_double("gen.noise", 0.05));
            opt.gen.ink_prob = gen_ink.value_or(cfg.get_double("gen.ink_prob", 0.25));
            opt.gen.blur_prob = gen_blur.value_or(cfg.get_double("gen.blur_prob", 0.25));
            opt.fractions = {cfg.get_double("split.train", 0.70),
                             cfg.get_double("split.val", 0.15),
                             cfg.get_double("split.test", 0.15)};
            opt.seed = resolve_seed(gen_common, cfg);
            opt.out_dir = gen_out;
            concordia::pipeline::run_gen(opt);
        } else if (qc_cmd->parsed()) {
            const KvConfig cfg = load_cfg(qc_common);
            concordia::pipeline::QcOptions opt;
            opt.manifest = qc_manifest;
            opt.params.blur_threshold = qc_blur.value_or(
                cfg.get_double("qc.blur_threshold", concordia::qc::kDefaultBlurThreshold));
            opt.params.ink_threshold = qc_ink.value_or(
                cfg.get_double("qc.ink_threshold", concordia::qc::kDefaultInkThreshold));
            opt.params.min_tissue_fraction =
                qc_tissue.value_or(cfg.get_double("qc.min_tissue_fraction", 0.6));
            opt.out_dir = qc_out;
            concordia::pipeline::run_qc(opt);
        } else if (pre->parsed()) {
            const KvConfig cfg = load_cfg(pre_common);
            concordia::pipeline::PretrainOptions opt;
            opt.manifest = pre_manifest;
            opt.tiles_dir = pre_tiles;
            opt.cfg.tau = pre_tau.value_or(cfg.get_double("pretrain.tau", 0.1));
            opt.cfg.batch_size = pre_batch.value_or(cfg.get_int("pretrain.batch", 32));
            opt.cfg.lr = pre_lr.value_or(cfg.get_double("pretrain.lr", 0.002));
            opt.cfg.momentum = pre_momentum.value_or(cfg.get_double("pretrain.momentum", 0.9));
            opt.cfg.epochs = pre_epochs.value_or(cfg.get_int("pretrain.epochs", 10));
            opt.cfg.seed = resolve_seed(pre_common, cfg);
            opt.cfg.aug.max_color_jitter =
                pre_jitter.value_or(cfg.get_double("pretrain.color_jitter", 0.15));
            opt.cfg.aug.noise_variance =
                pre_noise.value_or(cfg.get_double("pretrain.noise_variance", 0.001));
            const int d = pre_dim.value_or(cfg.get_int("pretrain.embed_dim", 64));
            opt.cfg.encoder.blocks = {{std::max(1, d / 8), 2},
                                      {std::max(1, d / 4), 1},
                                      {std::max(1, d / 2), 1},
                                      {d, 1}};
            opt.cfg.encoder.proj_hidden = d;
            opt.cfg.encoder.proj_dim = std::max(1, d / 2);
            opt.out_encoder = pre_out;
            opt.out_curve = pre_out + ".curve.csv";
            concordia::pipeline::run_pretrain(opt);
        } else if (emb->parsed()) {
            concordia::pipeline::EmbedOptions opt;
            opt.encoder = emb_encoder;
            opt.tiles_dir = emb_tiles;
            opt.out_store = emb_out;
            concordia::pipeline::run_embed(opt);
        } else if (train->parsed()) {
            const KvConfig cfg = load_cfg(train_common);
            concordia::pipeline::TrainOptions opt;
            opt.embeddings = train_store;
            opt.manifest = train_manifest;
            opt.cfg.lr = train_lr.value_or(cfg.get_double("train.lr", 0.01));
            opt.cfg.momentum = train_momentum.value_or(cfg.get_double("train.momentum", 0.9));
            opt.cfg.epochs = train_epochs.value_or(cfg.get_int("train.epochs", 100));
            opt.cfg.dropout_prob = train_dropout.value_or(cfg.get_double("train.dropout", 0.2));
            opt.cfg.accumulation = train_accum.value_or(cfg.get_int("train.accum", 8));
            opt.cfg.seed = resolve_seed(train_common, cfg);
            const std::string loss =
                !train_loss.empty() ? train_loss : cfg.get("train.loss", "rmse");
            opt.cfg.loss = loss == "ce" ? concordia::milreg::LossKind::CrossEntropy
                                        : concordia::milreg::LossKind::Rmse;
            const std::string aug =
                !train_augment.empty() ? train_augment : cfg.get("train.augment", "none");
            opt.cfg.augment = aug == "jitter"    ? concordia::milreg::AugmentMode::Jitter
                              : aug == "reembed" ? concordia::milreg::AugmentMode::Reembed
                                                 : concordia::milreg::AugmentMode::None;
            opt.cfg.jitter_sigma =
                train_jitter_sigma.value_or(cfg.get_double("train.jitter_sigma", 0.1));
            if (!train_tiles.empty()) opt.tiles_dir = train_tiles;
            if (!train_encoder.empty()) opt.encoder = train_encoder;
            opt.out_model = train_out;
            opt.out_curve = train_out + ".curve.csv";
            concordia::pipeline::run_train(opt);
        } else if (pred->parsed()) {
            concordia::pipeline::PredictOptions opt;
            opt.model = pred_model;
            opt.embeddings = pred_store;
            opt.manifest = pred_manifest;
            opt.out_csv = pred_out;
            concordia::pipeline::run_predict(opt);
        } else if (eval->parsed()) {
            const KvConfig cfg = load_cfg(eval_common);
            concordia::pipeline::EvalOptions opt;
            opt.predictions = eval_preds;
            opt.manifest = eval_manifest;
            const std::string gt =
                !eval_gt.empty() ? eval_gt : cfg.get("eval.gt_threshold", "auto");
            if (gt != "auto") opt.gt_threshold = std::stod(gt);
            opt.resamples = eval_resamples.value_or(cfg.get_int("eval.resamples", 2000));
            opt.confidence = eval_confidence.value_or(cfg.get_double("eval.confidence", 0.90));
            opt.seed = resolve_seed(eval_common, cfg);
            if (!eval_store.empty()) opt.embeddings = eval_store;
            opt.out_dir = eval_out;
            concordia::pipeline::run_eval(opt);
        } else if (run->parsed()) {
            KvConfig cfg = run_common.config_path.empty()
                               ? concordia::pipeline::default_config()
                               : KvConfig::parse_file(run_common.config_path);
            if (!run_out_dir.empty()) cfg.set("out_dir", run_out_dir);
            if (run_common.seed.has_value()) cfg.set("seed", std::to_string(*run_common.seed));
            concordia::pipeline::run_pipeline(cfg);
        } else if (show->parsed()) {
            std::cout << concordia::pipeline::default_config().serialize();
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const StageError& e) {
        std::cerr << "pipeline failed at stage '" << e.stage << "': " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
