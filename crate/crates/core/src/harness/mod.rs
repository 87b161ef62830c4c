//! End-to-end experiment harness: data, training, evaluation and ablations.

pub mod ablation;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod manifest;
pub mod pipeline;
pub mod synth;
pub mod train;

use std::fs;

pub use ablation::{run_ablation_grid, run_cell, AblationGrid, AblationReport, AblationRow, CellMetrics};
pub use bleu::{bleu, is_char_level, BleuStats};
pub use checkpoint::Checkpoint;
pub use config::{DataSource, EvalConfig, ExperimentConfig, PretrainSettings, TrainingConfig, TrainingMode};
pub use evaluate::{evaluate, EvalReport, LanguageScore, Translation};
pub use manifest::{load_manifest, write_manifest, AudioRef, ManifestLoad, ManifestRow, MAX_FRAMES};
pub use pipeline::{EvalStats, ModelConfig, Pipeline};
pub use synth::{synth_generate, Dataset, PairSpec, Sample, Split, SynthTaskSpec};
pub use train::{curve_tsv, initial_model, pretrain, train, train_single, write_run, Candidate, CandidateStatus, CurvePoint, Pretrained, TrainRun};

use crate::error::{Error, Result};

/// Generates or reads the dataset named by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synth(spec) => synth_generate(spec, cfg.seed),
        DataSource::Dir { path } => Dataset::read(path),
    }
}

/// Pretrains (if enabled) once and shares the result across callers.
pub fn maybe_pretrain(cfg: &ExperimentConfig, data: &Dataset) -> Result<Option<Pretrained>> {
    if !cfg.pretrain.enabled {
        return Ok(None);
    }
    let p = pretrain(cfg, data)?;
    if let (Some(first), Some(last)) = (p.speech.first(), p.speech.last()) {
        log::info!("contrastive pretraining: loss {:.4} → {:.4}", first.loss, last.loss);
    }
    if let (Some(first), Some(last)) = (p.denoising.first(), p.denoising.last()) {
        log::info!("denoising pretraining: loss {first:.4} → {last:.4}");
    }
    Ok(Some(p))
}

/// Full run: data, pretraining, training, test evaluation. Curves,
/// checkpoints and reports go to `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<(TrainRun, EvalReport)>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let pre = maybe_pretrain(cfg, &data)?;
    let runs = train(cfg, &data, pre.as_ref().map(|p| &p.store))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let config_path = cfg.out_dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let mut out = Vec::with_capacity(runs.len());
    for run in runs {
        write_run(&cfg.out_dir, &run)?;
        let part = run.data_for(&data)?;
        let report = evaluate(&run.pipeline, &run.checkpoint.store, &part.vocab, &part.test, cfg.eval.beam, cfg.eval.max_len)?;
        let path = cfg.out_dir.join(format!("test-{}.tsv", run.label));
        fs::write(&path, report.translations_tsv()).map_err(|e| Error::io(&path, e))?;
        log::info!("{}: test BLEU {:.2}", run.label, report.bleu);
        out.push((run, report));
    }
    Ok(out)
}
