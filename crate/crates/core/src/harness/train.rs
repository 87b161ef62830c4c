//! Pretraining, finetuning with a learning-rate sweep, and learning curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::decoder::{pretrain_denoising, TextEncoder};
use crate::error::{Error, Result};
use crate::finetune::select_trainable;
use crate::numeric::{Adam, Graph, Owner, ParamStore, Rng};
use crate::speech::{PretrainStats, Pretrainer};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, TrainingMode};
use super::pipeline::Pipeline;
use super::synth::{Dataset, Sample};

/// Pretrained encoder and decoder weights plus the objectives' histories.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub store: ParamStore,
    pub speech: Vec<PretrainStats>,
    pub denoising: Vec<f64>,
}

/// Contrastive pretraining of the speech encoder on the training audio, then
/// denoising pretraining of the text decoder on monolingual text.
pub fn pretrain(cfg: &ExperimentConfig, data: &Dataset) -> Result<Pretrained> {
    let rng = Rng::new(cfg.seed);
    let mut store = ParamStore::new();
    let model = Pipeline::new(cfg.model.resolved(&data.vocab), &mut store, &rng)?;
    let settings = &cfg.pretrain;
    let pretrainer = Pretrainer::new(settings.speech.clone(), &model.encoder, &mut store, &mut rng.derive("init-quantizer"))?;
    let text_encoder = TextEncoder::new(&model.decoder.config, &mut store, &mut rng.derive("init-text-encoder"))?;
    let corpus: Vec<Vec<f64>> = data.train.iter().map(|s| s.audio.as_ref().clone()).collect();

    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.owner(), p.name().starts_with("text_encoder."))).collect();
    for &(id, owner, text) in &ids {
        store.set_requires_grad(id, owner == Owner::Encoder && !text);
    }
    let speech = if settings.speech.steps > 0 && !corpus.is_empty() {
        pretrainer.run(&mut store, &model.encoder, &corpus, &mut rng.derive("pretrain-speech"))?
    } else {
        Vec::new()
    };
    for &(id, owner, text) in &ids {
        store.set_requires_grad(id, owner == Owner::Decoder || text);
    }
    let denoising = if settings.denoising.steps > 0 && !data.mono.is_empty() {
        pretrain_denoising(&mut store, &model.decoder, &text_encoder, &data.mono, &settings.denoising, &mut rng.derive("pretrain-text"))?
    } else {
        Vec::new()
    };
    store.set_all_requires_grad(true);
    Ok(Pretrained { store, speech, denoising })
}

/// A freshly built model with pretrained encoder weights and, unless the
/// strategy trains it from scratch, pretrained decoder weights.
pub fn initial_model(cfg: &ExperimentConfig, data: &Dataset, pretrained: Option<&ParamStore>) -> Result<(Pipeline, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Pipeline::new(cfg.model.resolved(&data.vocab), &mut store, &Rng::new(cfg.seed))?;
    if let Some(p) = pretrained {
        store.copy_matching(p, "encoder.")?;
        if !cfg.strategy.decoder_from_scratch() {
            store.copy_matching(p, "decoder.")?;
        }
    }
    Ok((model, store))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub seconds: f64,
    /// Mean training loss since the previous point; NaN at step 0.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CandidateStatus {
    Completed { best_valid: f64, best_step: u64 },
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub learning_rate: f64,
    pub status: CandidateStatus,
    pub curve: Vec<CurvePoint>,
}

impl Candidate {
    pub fn best_valid(&self) -> Option<f64> {
        match self.status {
            CandidateStatus::Completed { best_valid, .. } => Some(best_valid),
            CandidateStatus::Failed(_) => None,
        }
    }
}

/// The selected checkpoint of one training run and its sweep record.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub label: String,
    /// The language pair of a bilingual run; `None` for a multilingual one.
    pub pair: Option<(String, String)>,
    pub checkpoint: Checkpoint,
    pub pipeline: Pipeline,
    pub sweep: Vec<Candidate>,
}

impl TrainRun {
    /// The part of `data` this run was trained on.
    pub fn data_for(&self, data: &Dataset) -> Result<Dataset> {
        match &self.pair {
            Some(p) => data.restrict(p),
            None => Ok(data.clone()),
        }
    }

    pub fn selected(&self) -> &Candidate {
        self.sweep
            .iter()
            .find(|c| c.learning_rate == self.checkpoint.learning_rate && c.best_valid().is_some())
            .expect("the selected learning rate is a completed candidate")
    }
}

struct Snapshot {
    store: ParamStore,
    adam: Adam,
    step: u64,
    valid: f64,
}

fn validation_subset(cfg: &ExperimentConfig, data: &Dataset) -> Vec<Sample> {
    let limit = cfg.training.valid_limit;
    if limit == 0 || data.valid.len() <= limit {
        return data.valid.clone();
    }
    let mut picks = Rng::new(cfg.seed).derive("valid-subset").sample_indices(data.valid.len(), limit);
    picks.sort_unstable();
    picks.into_iter().map(|i| data.valid[i].clone()).collect()
}

/// Trains one candidate learning rate. `Err` only for errors that would
/// affect every candidate; divergence is reported as a failed candidate.
fn run_candidate(
    cfg: &ExperimentConfig,
    model: &Pipeline,
    init: &ParamStore,
    data: &Dataset,
    valid: &[Sample],
    label: &str,
    steps: u64,
    lr: f64,
) -> Result<(Candidate, Option<Snapshot>)> {
    let t = &cfg.training;
    let mut store = init.clone();
    let trainable = match select_trainable(&mut store, &cfg.strategy) {
        Ok(set) => set.len(),
        Err(Error::EmptyTrainableSet) => {
            log::warn!("{label}: strategy `{}` trains no parameters; only evaluating", cfg.strategy);
            0
        }
        Err(e) => return Err(e),
    };
    let mut adam = Adam::new(&store, t.adam.clone());
    let mut rng = Rng::new(cfg.seed).derive(&format!("train-{label}"));
    let start = Instant::now();
    let mut curve = Vec::new();
    let stats = model.evaluate_teacher_forced(&store, &data.vocab, valid, t.label_smoothing)?;
    curve.push(CurvePoint { step: 0, seconds: 0.0, train_loss: f64::NAN, valid_loss: stats.loss, token_accuracy: stats.token_accuracy });
    let mut best = Snapshot { store: store.clone(), adam: adam.clone(), step: 0, valid: stats.loss };
    let (mut running, mut seen) = (0.0, 0);
    for step in 1..=steps {
        let batch: Vec<&Sample> = (0..t.batch_size).map(|_| &data.train[rng.below(data.train.len())]).collect();
        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, &store, &data.vocab, &batch, t.label_smoothing, &mut rng)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            let why = format!("training loss {value} at step {step}");
            log::warn!("{label}: learning rate {lr:e} failed: {why}");
            return Ok((Candidate { learning_rate: lr, status: CandidateStatus::Failed(why), curve }, None));
        }
        if trainable > 0 {
            g.backward(loss)?;
            store.zero_grad();
            g.accumulate_param_grads(&mut store);
            adam.step(&mut store, lr);
        }
        running += value;
        seen += 1;
        if step % t.eval_interval as u64 == 0 || step == steps {
            let stats = model.evaluate_teacher_forced(&store, &data.vocab, valid, t.label_smoothing)?;
            if !stats.loss.is_finite() {
                let why = format!("validation loss {} at step {step}", stats.loss);
                return Ok((Candidate { learning_rate: lr, status: CandidateStatus::Failed(why), curve }, None));
            }
            curve.push(CurvePoint {
                step,
                seconds: start.elapsed().as_secs_f64(),
                train_loss: running / seen as f64,
                valid_loss: stats.loss,
                token_accuracy: stats.token_accuracy,
            });
            log::debug!("{label} lr {lr:e} step {step}: train {:.4} valid {:.4} acc {:.3}", running / seen as f64, stats.loss, stats.token_accuracy);
            (running, seen) = (0.0, 0);
            if stats.loss < best.valid {
                best = Snapshot { store: store.clone(), adam: adam.clone(), step, valid: stats.loss };
            }
        }
    }
    let status = CandidateStatus::Completed { best_valid: best.valid, best_step: best.step };
    Ok((Candidate { learning_rate: lr, status, curve }, Some(best)))
}

/// Sweeps the learning rates on one dataset and keeps the checkpoint with
/// the lowest validation loss under the best learning rate.
pub fn train_single(cfg: &ExperimentConfig, data: &Dataset, label: &str, steps: u64, pretrained: Option<&ParamStore>) -> Result<TrainRun> {
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Usage(format!("{label}: training and validation splits must be nonempty")));
    }
    let (model, init) = initial_model(cfg, data, pretrained)?;
    let valid = validation_subset(cfg, data);
    let mut sweep = Vec::new();
    let mut chosen: Option<(f64, Snapshot)> = None;
    for &lr in &cfg.training.learning_rates {
        let (cand, snap) = run_candidate(cfg, &model, &init, data, &valid, label, steps, lr)?;
        if let Some(snap) = snap {
            if chosen.as_ref().is_none_or(|(_, best)| snap.valid < best.valid) {
                chosen = Some((lr, snap));
            }
        }
        sweep.push(cand);
    }
    let (lr, snap) = chosen.ok_or_else(|| Error::Diverged(format!("{label}: every learning-rate candidate failed")))?;
    let mut store = snap.store;
    store.set_all_requires_grad(true);
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        vocab: data.vocab.clone(),
        label: label.to_string(),
        store,
        adam: snap.adam,
        step: snap.step,
        best_valid: snap.valid,
        learning_rate: lr,
    };
    Ok(TrainRun { label: label.to_string(), pair: None, checkpoint, pipeline: model, sweep })
}

pub fn pair_label(pair: &(String, String)) -> String {
    format!("{}-{}", pair.0, pair.1)
}

/// Bilingual mode trains one model per pair for `steps` updates each.
/// Multilingual mode trains one model on batches drawn uniformly from the
/// pooled data, so pairs are seen in proportion to size. It runs until the
/// smallest pair has had `steps` batches' worth of samples, the budget its
/// bilingual model gets; with equal-size pairs that is `steps × pairs`.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, pretrained: Option<&ParamStore>) -> Result<Vec<TrainRun>> {
    cfg.validate()?;
    let pairs = data.pairs();
    if pairs.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    let steps = cfg.training.steps as u64;
    match cfg.mode {
        TrainingMode::Bilingual => pairs
            .iter()
            .map(|p| {
                let mut run = train_single(cfg, &data.restrict(p)?, &pair_label(p), steps, pretrained)?;
                run.pair = Some(p.clone());
                Ok(run)
            })
            .collect(),
        TrainingMode::Multilingual => {
            let sizes: Vec<u64> = pairs.iter().map(|p| data.train.iter().filter(|s| &s.pair() == p).count() as u64).collect();
            let smallest = sizes.iter().copied().min().unwrap_or(1).max(1);
            let total = (steps * sizes.iter().sum::<u64>()).div_ceil(smallest);
            Ok(vec![train_single(cfg, data, "multi", total, pretrained)?])
        }
    }
}

/// Column-oriented learning curve.
pub fn curve_tsv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step\twall_seconds\ttrain_loss\tvalid_loss\ttoken_accuracy\n");
    for p in curve {
        let _ = writeln!(out, "{}\t{:.3}\t{:.6}\t{:.6}\t{:.6}", p.step, p.seconds, p.train_loss, p.valid_loss, p.token_accuracy);
    }
    out
}

/// Writes one curve per candidate plus a sweep summary under `dir`.
pub fn write_run(dir: &Path, run: &TrainRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = String::from("learning_rate\tstatus\tbest_valid\tbest_step\n");
    for c in &run.sweep {
        let path = dir.join(format!("curve-{}-lr{:e}.tsv", run.label, c.learning_rate));
        fs::write(&path, curve_tsv(&c.curve)).map_err(|e| Error::io(&path, e))?;
        match &c.status {
            CandidateStatus::Completed { best_valid, best_step } => {
                let _ = writeln!(summary, "{:e}\tok\t{best_valid:.6}\t{best_step}", c.learning_rate);
            }
            CandidateStatus::Failed(why) => {
                let _ = writeln!(summary, "{:e}\tfailed: {why}\t-\t-", c.learning_rate);
            }
        }
    }
    let path = dir.join(format!("sweep-{}.tsv", run.label));
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    run.checkpoint.save(&dir.join(format!("{}.ckpt", run.label)))
}
