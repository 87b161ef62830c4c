//! Desk-scale ablation grids over finetuning strategies or adaptor shapes.

use std::fmt;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::adaptor::GridRow;
use crate::error::{Error, Result};
use crate::finetune::{count_budget, Budget, FinetuneStrategy, ReferenceArchSpec};
use crate::numeric::ParamStore;

use super::bleu::{is_char_level, BleuStats};
use super::config::ExperimentConfig;
use super::evaluate::evaluate;
use super::synth::Dataset;
use super::train::train;

#[derive(Clone, Debug, PartialEq)]
pub enum AblationGrid {
    /// Strategies with their reported reference BLEU.
    Strategies(Vec<(FinetuneStrategy, Option<f64>)>),
    /// Adaptor shapes; kernel, activation and widths come from the base config.
    Adaptors(Vec<GridRow>),
}

impl AblationGrid {
    pub fn len(&self) -> usize {
        match self {
            AblationGrid::Strategies(v) => v.len(),
            AblationGrid::Adaptors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cell_config(&self, base: &ExperimentConfig, i: usize) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            AblationGrid::Strategies(v) => cfg.strategy = v[i].0.clone(),
            AblationGrid::Adaptors(v) => {
                let r = &v[i].config;
                cfg.model.adaptor.layer_count = r.layer_count;
                cfg.model.adaptor.stride = r.stride;
                cfg.model.adaptor.layer_drop = r.layer_drop;
                cfg.model.adaptor.use_layer_norm = r.use_layer_norm;
                cfg.model.adaptor.kernel = cfg.model.adaptor.kernel.max(r.stride);
            }
        }
        cfg
    }
}

/// Desk-scale outcome of one cell, pooled over its training runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMetrics {
    /// Best validation loss, averaged over runs.
    pub valid_loss: f64,
    /// Teacher-forced content-token accuracy on the test split.
    pub token_accuracy: f64,
    /// Beam-search corpus BLEU on the test split.
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub reported_bleu: Option<f64>,
    /// Reference-architecture finetuning budget (strategy grids only).
    pub budget: Option<Budget>,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub strategies: bool,
    pub rows: Vec<AblationRow>,
}

/// Trains and scores one configuration on `data`.
pub fn run_cell(cfg: &ExperimentConfig, data: &Dataset, pretrained: Option<&ParamStore>) -> Result<CellMetrics> {
    let runs = train(cfg, data, pretrained)?;
    let (mut loss, mut correct, mut content) = (0.0, 0.0, 0.0);
    let mut pooled = BleuStats::default();
    for run in &runs {
        let part = run.data_for(data)?;
        let store = &run.checkpoint.store;
        loss += run.checkpoint.best_valid;
        let tf = run.pipeline.evaluate_teacher_forced(store, &part.vocab, &part.test, cfg.training.label_smoothing)?;
        let tokens: usize = part.test.iter().map(|s| s.tgt.len()).sum();
        correct += tf.token_accuracy * tokens as f64;
        content += tokens as f64;
        let report = evaluate(&run.pipeline, store, &part.vocab, &part.test, cfg.eval.beam, cfg.eval.max_len)?;
        for t in &report.translations {
            pooled.add(&BleuStats::sentence(&t.hypothesis, &t.reference, is_char_level(&t.lang)));
        }
    }
    Ok(CellMetrics { valid_loss: loss / runs.len() as f64, token_accuracy: correct / content.max(1.0), bleu: pooled.score() })
}

/// Runs every cell with the base seed. Cells are independent and run on up
/// to `jobs` threads; a failing cell is recorded and the grid continues.
pub fn run_ablation_grid(
    base: &ExperimentConfig,
    grid: &AblationGrid,
    data: &Dataset,
    pretrained: Option<&ParamStore>,
    jobs: usize,
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::Usage("ablation grid is empty".into()));
    }
    let arch = ReferenceArchSpec::default();
    let outcomes: Mutex<Vec<Option<std::result::Result<CellMetrics, String>>>> = Mutex::new(vec![None; grid.len()]);
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= grid.len() {
            break;
        }
        let cfg = grid.cell_config(base, i);
        let out = cfg.validate().and_then(|_| run_cell(&cfg, data, pretrained)).map_err(|e| e.to_string());
        if let Err(e) = &out {
            log::warn!("ablation cell {i} failed: {e}");
        }
        outcomes.lock().expect("no worker panicked while holding the lock")[i] = Some(out);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.clamp(1, grid.len()) {
            s.spawn(work);
        }
        work();
    });
    let outcomes = outcomes.into_inner().expect("no worker panicked while holding the lock");
    let rows = outcomes
        .into_iter()
        .enumerate()
        .map(|(i, out)| {
            let outcome = out.unwrap_or_else(|| Err("cell did not run".into()));
            match grid {
                AblationGrid::Strategies(v) => AblationRow {
                    label: v[i].0.to_string(),
                    reported_bleu: v[i].1,
                    budget: Some(count_budget(&arch, &v[i].0)),
                    outcome,
                },
                AblationGrid::Adaptors(v) => {
                    let c = &v[i].config;
                    AblationRow {
                        label: format!("s={} n={} p={} LN={}", c.stride, c.layer_count, c.layer_drop, if c.use_layer_norm { "YES" } else { "NO" }),
                        reported_bleu: Some(v[i].reported_bleu),
                        budget: None,
                        outcome,
                    }
                }
            }
        })
        .collect();
    Ok(AblationReport { strategies: matches!(grid, AblationGrid::Strategies(_)), rows })
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("cell\treported_bleu\tft_params\tvalid_loss\ttoken_accuracy\tbleu\tstatus\n");
        for r in &self.rows {
            let reported = r.reported_bleu.map_or("-".into(), |b| format!("{b:.2}"));
            let budget = r.budget.map_or("-".into(), |b| b.trainable.to_string());
            match &r.outcome {
                Ok(m) => {
                    let _ = writeln!(out, "{}\t{reported}\t{budget}\t{:.4}\t{:.4}\t{:.2}\tok", r.label, m.valid_loss, m.token_accuracy, m.bleu);
                }
                Err(e) => {
                    let _ = writeln!(out, "{}\t{reported}\t{budget}\t-\t-\t-\tfailed: {e}", r.label);
                }
            }
        }
        out
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:<width$}  {:>9}  {:>17}  {:>10}  {:>8}  {:>7}", "cell", "ref BLEU", "FT params", "valid loss", "tok acc", "BLEU")?;
        for r in &self.rows {
            let reported = r.reported_bleu.map_or("-".into(), |b| format!("{b:.2}"));
            let budget = r.budget.map_or("-".into(), |b| format!("{:.1}M ({:.1}%)", b.trainable as f64 / 1e6, 100.0 * b.fraction));
            match &r.outcome {
                Ok(m) => writeln!(
                    f,
                    "{:<width$}  {reported:>9}  {budget:>17}  {:>10.4}  {:>8.3}  {:>7.2}",
                    r.label, m.valid_loss, m.token_accuracy, m.bleu
                )?,
                Err(e) => writeln!(f, "{:<width$}  {reported:>9}  {budget:>17}  failed: {e}", r.label)?,
            }
        }
        Ok(())
    }
}
