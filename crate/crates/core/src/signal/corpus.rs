//! Utterance manifests and the synthetic toy corpus.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mel::MelConfig;
use super::wav::{save_wav, Waveform};
use crate::error::{Error, Result};
use crate::io;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intonation {
    Statement,
    YesNoQuestion,
}

impl fmt::Display for Intonation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Intonation::Statement => "statement",
            Intonation::YesNoQuestion => "yes_no_question",
        })
    }
}

impl FromStr for Intonation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "statement" => Ok(Intonation::Statement),
            "yes_no_question" => Ok(Intonation::YesNoQuestion),
            other => Err(Error::Manifest(format!("unknown intonation tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub phonemes: Vec<String>,
    /// As written in the manifest; relative paths resolve against the manifest directory.
    pub audio_path: String,
    pub intonation: Intonation,
}

/// Tab-separated `id  phonemes  wav_path  intonation_tag`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self { records, base_dir: base_dir.into() };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utterance id `{}`", r.id)));
            }
            if r.phonemes.is_empty() {
                return Err(Error::Manifest(format!("utterance `{}` has no phonemes", r.id)));
            }
            if r.id.contains('\t') || r.id.is_empty() {
                return Err(Error::Manifest(format!("invalid utterance id `{}`", r.id)));
            }
        }
        Ok(())
    }

    pub fn audio_path(&self, r: &UtteranceRecord) -> PathBuf {
        let p = Path::new(&r.audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn find(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, r.phonemes.join(" "), r.audio_path, r.intonation));
        }
        s
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Manifest(format!("line {}: expected 4 tab-separated columns, got {}", lineno + 1, cols.len())));
            }
            records.push(UtteranceRecord {
                id: cols[0].to_string(),
                phonemes: cols[1].split_whitespace().map(str::to_string).collect(),
                audio_path: cols[2].to_string(),
                intonation: cols[3].trim().parse()?,
            });
        }
        Self::new(records, base_dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = io::read_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_atomic(path, self.to_tsv().as_bytes())
    }

    /// Keeps only the records whose indices are listed.
    pub fn subset(&self, indices: &[usize]) -> Manifest {
        Manifest { records: indices.iter().map(|&i| self.records[i].clone()).collect(), base_dir: self.base_dir.clone() }
    }
}

/// One symbol of the toy inventory: two formant sinusoids under an envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub symbol: String,
    pub formants: (f64, f64),
    pub duration: usize,
}

pub const PAUSE: &str = "pau";

/// The fixed 12-token inventory, including the pause token.
pub fn toy_token_table() -> Vec<TokenSpec> {
    let t = |s: &str, f1: f64, f2: f64, d: usize| TokenSpec { symbol: s.to_string(), formants: (f1, f2), duration: d };
    vec![
        t(PAUSE, 0.0, 0.0, 1600),
        t("a", 500.0, 1500.0, 1600),
        t("e", 400.0, 2000.0, 1600),
        t("i", 300.0, 2300.0, 1600),
        t("o", 400.0, 900.0, 1600),
        t("u", 300.0, 800.0, 1600),
        t("m", 200.0, 1200.0, 1200),
        t("n", 200.0, 1700.0, 1200),
        t("l", 300.0, 1300.0, 1200),
        t("r", 400.0, 1100.0, 1200),
        t("s", 3000.0, 5000.0, 1200),
        t("k", 1800.0, 3600.0, 1200),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusOptions {
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Fraction of utterances rendered as yes/no questions.
    pub question_ratio: f64,
    /// Relative pitch rise at the end of a question (0.3 = +30%).
    pub ramp_depth: f64,
    /// Probability of inserting a pause between two tokens.
    pub pause_prob: f64,
}

impl Default for ToyCorpusOptions {
    fn default() -> Self {
        Self { min_tokens: 3, max_tokens: 6, question_ratio: 0.3, ramp_depth: 0.3, pause_prob: 0.15 }
    }
}

/// Renders one token. `pitch(i)` gives the frequency multiplier at utterance sample `offset + i`.
pub fn render_token(spec: &TokenSpec, sample_rate: u32, offset: usize, pitch: &dyn Fn(usize) -> f64) -> Vec<f64> {
    let n = spec.duration;
    if spec.symbol == PAUSE {
        return vec![0.0; n];
    }
    let sr = f64::from(sample_rate);
    let ramp = (n / 10).max(1);
    let (mut p1, mut p2) = (0.0f64, 0.0f64);
    (0..n)
        .map(|i| {
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if i >= n - ramp {
                0.5 - 0.5 * (PI * (n - 1 - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let v = env * (0.35 * p1.sin() + 0.25 * p2.sin());
            let m = pitch(offset + i);
            p1 += 2.0 * PI * spec.formants.0 * m / sr;
            p2 += 2.0 * PI * spec.formants.1 * m / sr;
            v
        })
        .collect()
}

/// Renders a token sequence. Questions get a linear pitch ramp over the utterance.
/// The waveform is padded by `win − hop` zeros so that it yields exactly
/// `Σ duration / hop` mel frames.
pub fn render_utterance(tokens: &[&TokenSpec], intonation: Intonation, ramp_depth: f64, cfg: &MelConfig) -> Waveform {
    let total: usize = tokens.iter().map(|t| t.duration).sum();
    let depth = if intonation == Intonation::YesNoQuestion { ramp_depth } else { 0.0 };
    let pitch = move |i: usize| 1.0 + depth * i as f64 / total.max(1) as f64;
    let mut samples = Vec::with_capacity(total + cfg.win);
    for t in tokens {
        let off = samples.len();
        samples.extend(render_token(t, cfg.sample_rate, off, &pitch));
    }
    samples.extend(std::iter::repeat_n(0.0, cfg.win.saturating_sub(cfg.hop)));
    Waveform::new(samples, cfg.sample_rate)
}

/// Writes `n_utts` synthetic utterances under `out_dir` (`manifest.tsv` + `wavs/`).
/// Output is a pure function of the arguments.
pub fn generate_toy_corpus(out_dir: impl AsRef<Path>, n_utts: usize, seed: u64, cfg: &MelConfig, opts: &ToyCorpusOptions) -> Result<Manifest> {
    cfg.validate()?;
    if opts.min_tokens == 0 || opts.min_tokens > opts.max_tokens {
        return Err(Error::InvalidArgument(format!("token count range {}..={} is empty", opts.min_tokens, opts.max_tokens)));
    }
    let out_dir = out_dir.as_ref();
    io::create_dir_all(out_dir)?;
    let table = toy_token_table();
    let speech: Vec<&TokenSpec> = table.iter().filter(|t| t.symbol != PAUSE).collect();
    let pause = &table[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_utts);
    if n_utts > 0 {
        io::create_dir_all(out_dir.join("wavs"))?;
    }
    for i in 0..n_utts {
        let n_tok = rng.random_range(opts.min_tokens..=opts.max_tokens);
        let mut toks: Vec<&TokenSpec> = Vec::new();
        for k in 0..n_tok {
            if k > 0 && rng.random::<f64>() < opts.pause_prob {
                toks.push(pause);
            }
            toks.push(speech[rng.random_range(0..speech.len())]);
        }
        let intonation = if rng.random::<f64>() < opts.question_ratio { Intonation::YesNoQuestion } else { Intonation::Statement };
        let wav = render_utterance(&toks, intonation, opts.ramp_depth, cfg);
        let id = format!("utt{i:04}");
        let rel = format!("wavs/{id}.wav");
        save_wav(out_dir.join(&rel), &wav)?;
        records.push(UtteranceRecord {
            id,
            phonemes: toks.iter().map(|t| t.symbol.clone()).collect(),
            audio_path: rel,
            intonation,
        });
    }
    let manifest = Manifest::new(records, out_dir)?;
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_tsv() {
        let text = "u1\ta b pau c\twavs/u1.wav\tstatement\nu2\ta\t/abs/u2.wav\tyes_no_question\n";
        let m = Manifest::parse(text, "/base").unwrap();
        assert_eq!(m.to_tsv(), text);
        assert_eq!(m.audio_path(&m.records[0]), PathBuf::from("/base/wavs/u1.wav"));
        assert_eq!(m.audio_path(&m.records[1]), PathBuf::from("/abs/u2.wav"));
    }

    #[test]
    fn manifest_rejects_duplicates_and_empty_phonemes() {
        assert!(Manifest::parse("u\ta\tx.wav\tstatement\nu\tb\ty.wav\tstatement\n", "").is_err());
        assert!(Manifest::parse("u\t \tx.wav\tstatement\n", "").is_err());
        assert!(Manifest::parse("u\ta\tx.wav\n", "").is_err());
        assert!(Manifest::parse("u\ta\tx.wav\tshout\n", "").is_err());
    }

    #[test]
    fn table_has_twelve_tokens_with_one_pause() {
        let t = toy_token_table();
        assert_eq!(t.len(), 12);
        assert_eq!(t.iter().filter(|s| s.symbol == PAUSE).count(), 1);
        let cfg = MelConfig::default();
        assert!(t.iter().all(|s| s.duration % cfg.hop == 0));
    }

    #[test]
    fn utterance_frame_count_is_duration_over_hop() {
        let cfg = MelConfig::default();
        let table = toy_token_table();
        let toks: Vec<&TokenSpec> = vec![&table[1], &table[0], &table[6]];
        let w = render_utterance(&toks, Intonation::Statement, 0.3, &cfg);
        assert_eq!(cfg.num_frames(w.len()), (1600 + 1600 + 1200) / cfg.hop);
        assert!(w.samples.iter().all(|s| s.abs() <= 1.0));
    }
}
