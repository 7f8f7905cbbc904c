// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use cmprobe::actstore::{load_manifest, load_scores, parse_manifest, save_scores, Manifest, ScoreSet, Split, UtteranceRecord};
use cmprobe::digest::{config_digest, short_digest};
use cmprobe::evalkit::{compute_eer, extract_layer_weights, layer_sweep, score_manifest, EvalConfig};
use cmprobe::fusekit::{fit_calibration, fit_fusion, fuse_lr, fuse_sum, CalibrationModel, FusionConfig, FusionModel};
use cmprobe::heads::{read_head, write_head, Head, HeadKind, LayerSelector};
use cmprobe::synthgen::{write_corpus, CorpusRequest, SynthProfile};
use cmprobe::trainer::{history_to_csv, train_head, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::output::{create_parent, read_config, read_json, require_out, write_meta, write_text};

pub struct Context {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Configuration file of `train`, `sweep`, `score` and `evaluate`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Profile file of `synth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub profile: SynthProfile,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub corpus: String,
    pub split: Split,
    pub n_bona: usize,
    pub n_spoof: usize,
}

/// Either fusion form; `fuse-fit --mode sum` writes the array form.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FusionFile {
    Lr(FusionModel),
    Sum(Vec<CalibrationModel>),
}

/// One line of an `evaluate` CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub backbone: String,
    pub corpus: String,
    pub eer: String,
    pub n_trials: usize,
}

impl Context {
    fn run_config(&self, path: Option<&Path>) -> anyhow::Result<RunConfig> {
        let mut config: RunConfig = read_config(path)?;
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        config.train.validate()?;
        config.eval.validate()?;
        Ok(config)
    }
}

fn manifest(path: &Path) -> anyhow::Result<Manifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// Manifest records without opening the activation files.
fn labels(path: &Path) -> anyhow::Result<Vec<UtteranceRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_manifest(&text, path)?)
}

fn scores(path: &Path) -> anyhow::Result<ScoreSet> {
    load_scores(path).with_context(|| format!("loading scores {}", path.display()))
}

fn checkpoint(path: &Path) -> anyhow::Result<Head> {
    Ok(read_head(path).with_context(|| format!("loading checkpoint {}", path.display()))?.0)
}

fn parse_layer(layer: &str) -> anyhow::Result<LayerSelector> {
    if layer == "all" {
        return Ok(LayerSelector::All);
    }
    let l = layer.parse().with_context(|| format!("--layer expects an index or `all`, got {layer:?}"))?;
    Ok(LayerSelector::Single(l))
}

pub fn synth(ctx: &Context, profile: &Path) -> anyhow::Result<()> {
    let out = require_out(&ctx.out)?;
    let mut run: SynthRun = read_json(profile)?;
    if let Some(seed) = ctx.seed {
        run.profile.seed = seed;
    }
    let digest = config_digest(&run);
    for block in &run.blocks {
        let request = CorpusRequest::new(&block.corpus, block.split, block.n_bona, block.n_spoof);
        let records = write_corpus(&run.profile, &request, out)
            .with_context(|| format!("generating {} {}", block.corpus, block.split))?;
        let path = out.join(format!("{}_{}.jsonl", block.corpus, block.split));
        write_meta(&path, "synth", &digest, Some(run.profile.seed))?;
        println!("{}\t{}", path.display(), records.len());
    }
    Ok(())
}

pub fn train(ctx: &Context, train: &Path, val: &Path, kind: HeadKind, layer: &str, config: Option<&Path>) -> anyhow::Result<()> {
    let out = require_out(&ctx.out)?;
    let config = ctx.run_config(config)?;
    let layers = parse_layer(layer)?;
    let digest = config_digest(&serde_json::json!({
        "command": "train",
        "head": kind,
        "layers": layers,
        "config": config,
    }));
    let outcome = train_head(&manifest(train)?, &manifest(val)?, kind, layers, &config.train)?;
    create_parent(out)?;
    write_head(&outcome.best.head, short_digest(&digest), out)?;
    let history = out.with_extension("history.csv");
    write_text(&history, &history_to_csv(&outcome.history))?;
    write_meta(&history, "train", &digest, Some(config.train.seed))?;
    println!(
        "best epoch {}: val_loss {:.6} val_eer {:.6} ({:.2}%)",
        outcome.best.epoch,
        outcome.best.val_loss,
        outcome.best.val_eer,
        100.0 * outcome.best.val_eer
    );
    Ok(())
}

pub fn sweep(ctx: &Context, train: &Path, val: &Path, eval: &[PathBuf], config: Option<&Path>) -> anyhow::Result<()> {
    let out = require_out(&ctx.out)?;
    let config = ctx.run_config(config)?;
    let evals = eval.iter().map(|p| manifest(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let report = layer_sweep(&manifest(train)?, &manifest(val)?, &evals, &config.train, &config.eval)?;
    let digest = config_digest(&serde_json::json!({ "command": "sweep", "config": config }));
    write_text(out, &report.to_csv())?;
    write_meta(out, "sweep", &digest, Some(config.train.seed))?;
    Ok(())
}

pub fn score(ctx: &Context, ckpt: &Path, manifest_path: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let out = require_out(&ctx.out)?;
    let config = ctx.run_config(config)?;
    let head = checkpoint(ckpt)?;
    let tag = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let scores = score_manifest(&manifest(manifest_path)?, &head, &config.eval, &tag)?;
    create_parent(out)?;
    save_scores(&scores, out)?;
    let digest = config_digest(&serde_json::json!({ "command": "score", "eval": config.eval }));
    write_meta(out, "score", &digest, None)?;
    Ok(())
}

pub fn evaluate(ctx: &Context, ckpt: &Path, manifests: &[PathBuf], config: Option<&Path>) -> anyhow::Result<()> {
    let out = require_out(&ctx.out)?;
    let config = ctx.run_config(config)?;
    let head = checkpoint(ckpt)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    for path in manifests {
        let m = manifest(path)?;
        let scores = score_manifest(&m, &head, &config.eval, "eval")?;
        let eer = compute_eer(&scores, &m.records)?;
        writer.serialize(EvalRow {
            backbone: m.backbone_tag.clone(),
            corpus: m.corpus_tag().to_string(),
            eer: format!("{eer:.6}"),
            n_trials: m.len(),
        })?;
        println!("{}\t{eer:.6} ({:.2}%)", m.corpus_tag(), 100.0 * eer);
    }
    let text = String::from_utf8(writer.into_inner()?)?;
    write_text(out, &text)?;
    let digest = config_digest(&serde_json::json!({ "command": "evaluate", "eval": config.eval }));
    write_meta(out, "evaluate", &digest, None)?;
    Ok(())
}

pub fn eer(scores_path: &Path, manifest_path: &Path) -> anyhow::Result<()> {
    let eer = compute_eer(&scores(scores_path)?, &labels(manifest_path)?)?;
    println!("{eer:.6} ({:.2}%)", 100.0 * eer);
    Ok(())
}

pub fn weights(ctx: &Context, ckpt: &Path) -> anyhow::Result<()> {
    let out = require_out(&ctx.out)?;
    let head = checkpoint(ckpt)?;
    let report = extract_layer_weights(&head.params)?;
    write_text(out, &report.to_csv())?;
    write_meta(out, "weights", &config_digest(&serde_json::json!({ "command": "weights" })), None)?;
    Ok(())
}

pub fn fuse_fit(
    ctx: &Context,
    score_paths: &[PathBuf],
    manifest_path: &Path,
    sum: bool,
    prior: Option<f64>,
    lambda: Option<f64>,
    config: Option<&Path>,
) -> anyhow::Result<()> {
    let out = require_out(&ctx.out)?;
    let mut config: FusionConfig = read_config(config)?;
    if let Some(p) = prior {
        config.prior = p;
    }
    if let Some(l) = lambda {
        config.lambda = l;
    }
    let systems = score_paths.iter().map(|p| scores(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let records = labels(manifest_path)?;
    let model = if sum {
        let calibrations = systems
            .iter()
            .map(|s| fit_calibration(s, &records, &config).with_context(|| format!("calibrating {}", s.system_tag)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        for c in calibrations.iter().filter(|c| c.negative_scale()) {
            eprintln!("warning: {} has a negative calibration scale", c.system_tag);
        }
        FusionFile::Sum(calibrations)
    } else {
        FusionFile::Lr(fit_fusion(&systems, &records, &config)?)
    };
    let mut text = serde_json::to_string_pretty(&model)?;
    text.push('\n');
    write_text(out, &text)?;
    let digest = config_digest(&serde_json::json!({ "command": "fuse-fit", "sum": sum, "config": config }));
    write_meta(out, "fuse-fit", &digest, None)?;
    Ok(())
}

pub fn fuse_apply(ctx: &Context, model: &Path, score_paths: &[PathBuf]) -> anyhow::Result<()> {
    let out = require_out(&ctx.out)?;
    let systems = score_paths.iter().map(|p| scores(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let fused = match read_json::<FusionFile>(model)? {
        FusionFile::Lr(m) => {
            m.validate()?;
            fuse_lr(&m, &systems)?
        }
        FusionFile::Sum(c) => {
            if c.is_empty() {
                bail!("{}: empty calibration list", model.display());
            }
            fuse_sum(&c, &systems)?
        }
    };
    create_parent(out)?;
    save_scores(&fused, out)?;
    let text = std::fs::read_to_string(model).with_context(|| format!("reading {}", model.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    write_meta(out, "fuse-apply", &config_digest(&value), None)?;
    Ok(())
}
