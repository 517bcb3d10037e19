use std::path::{Path, PathBuf};

use etts_autograd::Tensor;

use crate::acoustic::Vocabulary;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::signal::{corpus_stats, generate_toy_corpus, load_wav, wav_to_mel, Intonation, Manifest};

/// One training utterance with cached features.
#[derive(Clone, Debug)]
pub struct UtteranceData {
    pub id: String,
    pub intonation: Intonation,
    pub tokens: Vec<usize>,
    /// `M × n_mels` log-mel frames.
    pub mel: Tensor,
    /// The first `M·hop` samples, aligned with the frames.
    pub wave: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub utts: Vec<UtteranceData>,
    pub vocab: Vocabulary,
}

pub fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("manifest.tsv")
}

pub fn features_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("features")
}

/// Renders the toy corpus and caches its log-mel features. Returns the manifest.
pub fn prepare_data(cfg: &RunConfig) -> Result<Manifest> {
    let manifest = generate_toy_corpus(&cfg.paths.data_dir, cfg.corpus.n_utts, cfg.corpus.seed, &cfg.mel, &cfg.corpus.options)?;
    cache_features(cfg, &manifest)?;
    let stats = corpus_stats(&manifest, &cfg.pitch)?;
    let text = serde_json::to_string_pretty(&stats)? + "\n";
    crate::io::write_atomic(cfg.paths.data_dir.join("stats.json"), text.as_bytes())?;
    Ok(manifest)
}

pub fn cache_features(cfg: &RunConfig, manifest: &Manifest) -> Result<()> {
    let mut ck = Checkpoint::new("features", 0, None, "prepare", cfg);
    for r in &manifest.records {
        let wav = load_wav(manifest.audio_path(r))?;
        let mel = wav_to_mel(&wav, &cfg.mel)?;
        ck.tensors.push((format!("mel/{}", r.id), mel.to_tensor()));
    }
    ck.save(features_dir(cfg))
}

impl Dataset {
    /// Loads the manifest, cached features and aligned audio written by [`prepare_data`].
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let mpath = manifest_path(cfg);
        if !mpath.exists() {
            return Err(Error::Missing(mpath));
        }
        let manifest = Manifest::load(&mpath)?;
        Self::from_manifest(cfg, manifest, &features_dir(cfg))
    }

    pub fn from_manifest(cfg: &RunConfig, manifest: Manifest, features: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(features, "features")?;
        let vocab = Vocabulary::toy();
        let hop = cfg.mel.hop;
        let mut utts = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let mel = ck
                .tensor(&format!("mel/{}", r.id))
                .ok_or_else(|| Error::Manifest(format!("no cached features for {}", r.id)))?
                .clone();
            if mel.cols() != cfg.mel.n_mels {
                return Err(Error::Shape(format!("{}: cached mel has {} bins, config {}", r.id, mel.cols(), cfg.mel.n_mels)));
            }
            let wav = load_wav(manifest.audio_path(r))?;
            let n = mel.rows() * hop;
            if wav.len() < n {
                return Err(Error::Shape(format!("{}: {} samples for {} frames", r.id, wav.len(), mel.rows())));
            }
            utts.push(UtteranceData {
                id: r.id.clone(),
                intonation: r.intonation,
                tokens: vocab.encode(&r.phonemes)?,
                mel,
                wave: wav.samples[..n].to_vec(),
            });
        }
        Ok(Self { manifest, utts, vocab })
    }

    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }

    pub fn find(&self, id: &str) -> Option<&UtteranceData> {
        self.utts.iter().find(|u| u.id == id)
    }

    pub fn mels(&self) -> Vec<&Tensor> {
        self.utts.iter().map(|u| &u.mel).collect()
    }
}

/// Per-bin mean and standard deviation (floored at 1e-2) over all frames.
pub fn mel_stats(mels: &[&Tensor]) -> (Tensor, Tensor) {
    let n = mels.first().map_or(0, |m| m.cols());
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    let mut count = 0.0;
    for m in mels {
        for r in 0..m.rows() {
            for (j, &v) in m.row_slice(r).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            count += 1.0;
        }
    }
    let count = f64::max(count, 1.0);
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std: Vec<f64> = sq.iter().zip(&mean).map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-2)).collect();
    (Tensor::row(&mean), Tensor::row(&std))
}
