//! Synthetic speech-translation task.
//!
//! Every source token owns a fixed two-tone waveform template shared by all
//! language pairs. An utterance is the concatenation of its tokens' templates
//! plus white noise. Each target language maps source tokens through its own
//! fixed permutation, optionally reversing the sequence.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decoder::{TaggedText, Vocab};
use crate::error::{Error, Result};
use crate::numeric::Rng;
use crate::speech::wav::{read_wav, write_wav, SAMPLE_RATE};

use super::manifest::{load_manifest, write_manifest, AudioRef, ManifestRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub tgt_lang: String,
    /// Training set size relative to `train_size`.
    #[serde(default = "one")]
    pub size_multiplier: usize,
    #[serde(default = "yes")]
    pub permute: bool,
    #[serde(default)]
    pub reverse: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl PairSpec {
    pub fn new(tgt_lang: &str, size_multiplier: usize) -> Self {
        PairSpec { tgt_lang: tgt_lang.into(), size_multiplier, permute: true, reverse: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTaskSpec {
    /// Number of content tokens.
    pub vocab_size: usize,
    pub src_lang: String,
    pub pairs: Vec<PairSpec>,
    /// Latent encoder frames spanned by one token.
    pub frames_per_token: usize,
    /// Waveform samples per latent frame (the feature encoder's stride).
    pub samples_per_frame: usize,
    pub noise_level: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Training utterances for a pair with multiplier 1.
    pub train_size: usize,
    /// Validation and test utterances per pair.
    pub valid_size: usize,
    pub test_size: usize,
    /// Monolingual sentences per target language for denoising pretraining.
    pub mono_size: usize,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            vocab_size: 32,
            src_lang: "en".into(),
            pairs: vec![PairSpec::new("de", 1)],
            frames_per_token: 16,
            samples_per_frame: 16,
            noise_level: 0.05,
            min_tokens: 3,
            max_tokens: 6,
            train_size: 2000,
            valid_size: 100,
            test_size: 100,
            mono_size: 1000,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic task: {m}")));
        if self.vocab_size == 0 || self.frames_per_token == 0 || self.samples_per_frame == 0 {
            return bad("vocabulary, frames per token and samples per frame must be positive");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("need 1 ≤ min_tokens ≤ max_tokens");
        }
        if self.pairs.is_empty() {
            return bad("at least one language pair is required");
        }
        let langs: BTreeSet<&str> = self.pairs.iter().map(|p| p.tgt_lang.as_str()).collect();
        if langs.len() != self.pairs.len() {
            return bad("target languages must be distinct");
        }
        if self.pairs.iter().any(|p| p.size_multiplier == 0) {
            return bad("size multipliers must be positive");
        }
        if self.noise_level < 0.0 {
            return bad("noise level must be non-negative");
        }
        Ok(())
    }

    pub fn samples_per_token(&self) -> usize {
        self.frames_per_token * self.samples_per_frame
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let width = (self.vocab_size.max(2) - 1).to_string().len().max(2);
        let content: Vec<String> = (0..self.vocab_size).map(|i| format!("t{i:0width$}")).collect();
        let langs: Vec<String> = self.pairs.iter().map(|p| p.tgt_lang.clone()).collect();
        Vocab::new(&langs, &content)
    }

    /// Waveform template of source token `token`.
    pub fn template(&self, token: usize, seed: u64) -> Vec<f64> {
        let n = self.samples_per_token();
        let rows = self.vocab_size.div_ceil(8).max(1) as f64;
        let fa = 500.0 + 400.0 * (token % 8) as f64;
        let fb = 3900.0 + 3800.0 * (token / 8) as f64 / rows;
        let mut rng = Rng::new(seed).derive(&format!("template-{token}"));
        let (pa, pb) = (rng.uniform() * std::f64::consts::TAU, rng.uniform() * std::f64::consts::TAU);
        let sr = SAMPLE_RATE as f64;
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                0.4 * (std::f64::consts::TAU * fa * t + pa).sin() + 0.4 * (std::f64::consts::TAU * fb * t + pb).sin()
            })
            .collect()
    }

    /// The source-to-target token permutation of `pair`.
    pub fn mapping(&self, pair: &PairSpec, seed: u64) -> Vec<usize> {
        let mut m: Vec<usize> = (0..self.vocab_size).collect();
        if pair.permute {
            Rng::new(seed).derive(&format!("mapping-{}", pair.tgt_lang)).shuffle(&mut m);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub src_lang: String,
    pub tgt_lang: String,
    /// Source token indices; empty when unknown.
    pub src: Vec<usize>,
    /// Target vocabulary ids without tag or terminator.
    pub tgt: Vec<usize>,
    pub audio: Arc<Vec<f64>>,
}

impl Sample {
    pub fn pair(&self) -> (String, String) {
        (self.src_lang.clone(), self.tgt_lang.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Target-language text for denoising pretraining.
    pub mono: Vec<TaggedText>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split `{s}` (train, valid, test)"))),
        }
    }
}

pub fn synth_generate(spec: &SynthTaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let templates: Vec<Vec<f64>> = (0..spec.vocab_size).map(|t| spec.template(t, seed)).collect();
    let base = Rng::new(seed);
    let mut ds = Dataset { vocab, train: Vec::new(), valid: Vec::new(), test: Vec::new(), mono: Vec::new() };
    let content = ds.vocab.content_start();
    for pair in &spec.pairs {
        let mapping = spec.mapping(pair, seed);
        let target = |src: &[usize]| {
            let mut t: Vec<usize> = src.iter().map(|&s| content + mapping[s]).collect();
            if pair.reverse {
                t.reverse();
            }
            t
        };
        let draw = |rng: &mut Rng| -> Vec<usize> {
            let len = spec.min_tokens + rng.below(spec.max_tokens - spec.min_tokens + 1);
            (0..len).map(|_| rng.below(spec.vocab_size)).collect()
        };
        for (split, count) in [
            (Split::Train, spec.train_size * pair.size_multiplier),
            (Split::Valid, spec.valid_size),
            (Split::Test, spec.test_size),
        ] {
            let mut rng = base.derive(&format!("{}-{}", split.as_str(), pair.tgt_lang));
            let out = match split {
                Split::Train => &mut ds.train,
                Split::Valid => &mut ds.valid,
                Split::Test => &mut ds.test,
            };
            for i in 0..count {
                let src = draw(&mut rng);
                let mut audio = Vec::with_capacity(src.len() * spec.samples_per_token());
                for &s in &src {
                    audio.extend(templates[s].iter().map(|&x| x + spec.noise_level * rng.normal()));
                }
                out.push(Sample {
                    id: format!("{}-{}-{i:05}", pair.tgt_lang, split.as_str()),
                    src_lang: spec.src_lang.clone(),
                    tgt_lang: pair.tgt_lang.clone(),
                    tgt: target(&src),
                    src,
                    audio: Arc::new(audio),
                });
            }
        }
        let lang = ds.vocab.lang_id(&pair.tgt_lang)?;
        let mut rng = base.derive(&format!("mono-{}", pair.tgt_lang));
        for _ in 0..spec.mono_size {
            let src = draw(&mut rng);
            ds.mono.push(TaggedText { lang, tokens: target(&src) });
        }
    }
    Ok(ds)
}

/// 10 ms frames for a 16 kHz waveform.
pub fn frame_count(samples: usize) -> usize {
    samples.div_ceil(160).max(1)
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Distinct (source, target) language pairs in the training split.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let set: BTreeSet<(String, String)> = self.train.iter().map(Sample::pair).collect();
        set.into_iter().collect()
    }

    /// The dataset restricted to one language pair.
    pub fn restrict(&self, pair: &(String, String)) -> Result<Dataset> {
        let keep = |v: &[Sample]| v.iter().filter(|s| &s.pair() == pair).cloned().collect::<Vec<_>>();
        let lang = self.vocab.lang_id(&pair.1)?;
        Ok(Dataset {
            vocab: self.vocab.clone(),
            train: keep(&self.train),
            valid: keep(&self.valid),
            test: keep(&self.test),
            mono: self.mono.iter().filter(|t| t.lang == lang).cloned().collect(),
        })
    }

    /// Writes `vocab.txt`, `{train,valid,test}.tsv`, `mono.tsv` and WAV files
    /// under `dir/audio`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let audio_dir = dir.join("audio");
        fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
        self.vocab.write(&dir.join("vocab.txt"))?;
        for split in [Split::Train, Split::Valid, Split::Test] {
            let mut rows = Vec::new();
            for s in self.split(split) {
                let rel = Path::new("audio").join(format!("{}.wav", s.id));
                write_wav(&dir.join(&rel), &s.audio)?;
                rows.push(ManifestRow {
                    id: s.id.clone(),
                    audio: AudioRef::File(rel),
                    n_frames: frame_count(s.audio.len()),
                    src_lang: s.src_lang.clone(),
                    tgt_lang: s.tgt_lang.clone(),
                    tgt_text: self.vocab.decode(&s.tgt),
                });
            }
            write_manifest(&dir.join(format!("{}.tsv", split.as_str())), &rows)?;
        }
        let mut mono = String::new();
        for t in &self.mono {
            let lang = self.vocab.lang_of(t.lang).unwrap_or("?");
            mono.push_str(&format!("{lang}\t{}\n", self.vocab.decode(&t.tokens)));
        }
        let p = dir.join("mono.tsv");
        fs::write(&p, mono).map_err(|e| Error::io(&p, e))
    }

    /// Reads a directory written by [`Dataset::write`]. `mono.tsv` is
    /// optional; without it the training targets serve as monolingual text.
    pub fn read(dir: &Path) -> Result<Dataset> {
        let vocab = Vocab::read(&dir.join("vocab.txt"))?;
        let mut splits: Vec<Vec<Sample>> = Vec::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            let path = dir.join(format!("{}.tsv", split.as_str()));
            let mut samples = Vec::new();
            for row in load_manifest(&path)?.rows {
                vocab.lang_id(&row.tgt_lang)?;
                let audio = match &row.audio {
                    AudioRef::File(p) => read_wav(&dir.join(p))?,
                    AudioRef::Seed(_) => {
                        return Err(Error::Config(format!(
                            "{}: row {} refers to seeded audio; regenerate it with synth-data",
                            path.display(),
                            row.id
                        )))
                    }
                };
                let tgt = vocab.encode(&row.tgt_text).map_err(|e| Error::Config(format!("{}: row {}: {e}", path.display(), row.id)))?;
                samples.push(Sample { id: row.id, src_lang: row.src_lang, tgt_lang: row.tgt_lang, src: Vec::new(), tgt, audio: Arc::new(audio) });
            }
            splits.push(samples);
        }
        let mono_path = dir.join("mono.tsv");
        let mono = if mono_path.exists() {
            let text = fs::read_to_string(&mono_path).map_err(|e| Error::io(&mono_path, e))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    let (lang, body) = l.split_once('\t').ok_or_else(|| Error::Parse {
                        path: mono_path.clone(),
                        line: i + 1,
                        msg: "expected `lang<TAB>text`".into(),
                    })?;
                    Ok(TaggedText { lang: vocab.lang_id(lang)?, tokens: vocab.encode(body)? })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            splits[0].iter().map(|s| Ok(TaggedText { lang: vocab.lang_id(&s.tgt_lang)?, tokens: s.tgt.clone() })).collect::<Result<_>>()?
        };
        let test = splits.pop().unwrap_or_default();
        let valid = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Dataset { vocab, train, valid, test, mono })
    }
}
