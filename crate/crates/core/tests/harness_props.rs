use std::sync::OnceLock;

use xmtl::adaptor::{AdaptorConfig, Mode};
use xmtl::decoder::{beam_search, DecoderConfig, DecoderScorer, EOS};
use xmtl::finetune::{count_budget, FinetuneStrategy, ReferenceArchSpec};
use xmtl::harness::{
    run_ablation_grid, run_cell, synth_generate, train, AblationGrid, DataSource, Dataset, ExperimentConfig, ModelConfig, PairSpec, Sample,
    SynthTaskSpec, TrainRun, TrainingMode,
};
use xmtl::numeric::{Graph, Rng};
use xmtl::speech::{ContextEncoderConfig, ConvSpec, FeatureEncoderConfig, SpeechEncoderConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: SpeechEncoderConfig {
            feature: FeatureEncoderConfig {
                layers: vec![ConvSpec { out_channels: 16, kernel: 8, stride: 8 }, ConvSpec { out_channels: 32, kernel: 2, stride: 2 }],
                latent_dim: 32,
            },
            context: ContextEncoderConfig { layer_count: 1, model_dim: 32, head_count: 2, ffn_dim: 64, max_positions: 128 },
        },
        adaptor: AdaptorConfig { layer_count: 1, ..AdaptorConfig::default() },
        decoder: DecoderConfig { layer_count: 1, model_dim: 32, head_count: 2, ffn_dim: 64, ..Default::default() },
    }
}

fn base_config(pairs: Vec<PairSpec>, train_size: usize, steps: usize) -> ExperimentConfig {
    let spec = SynthTaskSpec { pairs, vocab_size: 12, train_size, valid_size: 16, test_size: 16, mono_size: 32, ..SynthTaskSpec::default() };
    let mut cfg = ExperimentConfig { model: small_model(), data: DataSource::Synth(spec), ..ExperimentConfig::default() };
    cfg.pretrain.enabled = false;
    cfg.strategy = FinetuneStrategy::all();
    cfg.training.steps = steps;
    cfg.training.eval_interval = steps;
    cfg.training.batch_size = 8;
    cfg.eval.beam = 2;
    cfg.eval.max_len = 8;
    cfg
}

fn data_of(cfg: &ExperimentConfig) -> Dataset {
    let DataSource::Synth(spec) = &cfg.data else { unreachable!() };
    synth_generate(spec, cfg.seed).unwrap()
}

/// One multilingual model over en-de and en-fr, trained once for the tests below.
fn multilingual() -> &'static (Dataset, TrainRun) {
    static RUN: OnceLock<(Dataset, TrainRun)> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = base_config(vec![PairSpec::new("de", 1), PairSpec::new("fr", 1)], 200, 250);
        cfg.mode = TrainingMode::Multilingual;
        let data = data_of(&cfg);
        let run = train(&cfg, &data, None).unwrap().remove(0);
        (data, run)
    })
}

fn retagged(samples: &[Sample], lang: &str) -> Vec<Sample> {
    samples.iter().map(|s| Sample { tgt_lang: lang.to_string(), ..s.clone() }).collect()
}

#[test]
fn language_tag_selects_the_output_mapping() {
    let (data, run) = multilingual();
    let store = &run.checkpoint.store;
    for (lang, other) in [("de", "fr"), ("fr", "de")] {
        let own: Vec<Sample> = data.test.iter().filter(|s| s.tgt_lang == lang).cloned().collect();
        let right = run.pipeline.evaluate_teacher_forced(store, &data.vocab, &own, 0.0).unwrap().token_accuracy;
        let wrong = run.pipeline.evaluate_teacher_forced(store, &data.vocab, &retagged(&own, other), 0.0).unwrap().token_accuracy;
        assert!(right > wrong + 0.1, "{lang}: accuracy {right:.3} with its own tag, {wrong:.3} with <{other}>");
        let changed = own
            .iter()
            .filter(|s| {
                let a = run.pipeline.translate(store, &data.vocab, &s.audio, lang, 1, 8).unwrap();
                let b = run.pipeline.translate(store, &data.vocab, &s.audio, other, 1, 8).unwrap();
                a != b
            })
            .count();
        assert!(2 * changed > own.len(), "{lang}: only {changed}/{} outputs change with the tag", own.len());
    }
}

#[test]
fn best_beam_score_does_not_decrease_with_width() {
    let (data, run) = multilingual();
    let store = &run.checkpoint.store;
    let model = &run.pipeline;
    for s in &data.test {
        let mut g = Graph::new();
        let memory = model.memory(&mut g, store, &s.audio, Mode::Eval, &mut Rng::new(0)).unwrap();
        let memory = g.value(memory).clone();
        let scorer = DecoderScorer { decoder: &model.decoder, store, memory: Some(&memory) };
        let tag = data.vocab.lang_id(&s.tgt_lang).unwrap();
        let best: Vec<f64> = [1, 2, 5].iter().map(|&k| beam_search(&scorer, &[tag], EOS, k, 10).unwrap()[0].normalized()).collect();
        assert!(best.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{}: best scores for k = 1, 2, 5: {best:?}", s.id);
    }
}

#[test]
fn strategy_grid_has_a_budgeted_row_per_strategy() {
    let cfg = base_config(vec![PairSpec::new("de", 1)], 16, 2);
    let data = data_of(&cfg);
    let strategies: Vec<_> = FinetuneStrategy::table3().into_iter().map(|(s, b)| (s, Some(b))).collect();
    let report = run_ablation_grid(&cfg, &AblationGrid::Strategies(strategies.clone()), &data, None, 2).unwrap();
    assert_eq!(report.rows.len(), 7);
    let arch = ReferenceArchSpec::default();
    for (row, (strategy, bleu)) in report.rows.iter().zip(&strategies) {
        assert_eq!(row.label, strategy.to_string());
        assert_eq!(row.reported_bleu, *bleu);
        assert_eq!(row.budget, Some(count_budget(&arch, strategy)));
        assert!(row.outcome.is_ok(), "{}: {:?}", row.label, row.outcome);
    }
    assert_eq!(report.to_string().lines().filter(|l| l.contains('%')).count(), 7);
}

#[test]
fn single_cell_grid_matches_one_training_call() {
    let cfg = base_config(vec![PairSpec::new("de", 1)], 16, 4);
    let data = data_of(&cfg);
    let report = run_ablation_grid(&cfg, &AblationGrid::Strategies(vec![(cfg.strategy.clone(), None)]), &data, None, 1).unwrap();
    let direct = run_cell(&cfg, &data, None).unwrap();
    assert_eq!(report.rows[0].outcome.as_ref().unwrap(), &direct);
    let run = train(&cfg, &data, None).unwrap().remove(0);
    assert_eq!(run.checkpoint.best_valid, direct.valid_loss);
}
