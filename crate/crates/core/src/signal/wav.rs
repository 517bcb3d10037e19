//! Mono 16-bit PCM WAV input and output.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Clamps every sample into `[-1, 1]`.
    pub fn clipped(mut self) -> Self {
        for s in &mut self.samples {
            *s = s.clamp(-1.0, 1.0);
        }
        self
    }
}

/// Reads a mono PCM16 file; samples are divided by 32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let fmt_err = |property: String| Error::WavFormat { path: path.to_path_buf(), property };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => fmt_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(fmt_err(format!("channels = {} (expected mono)", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(fmt_err("sample format is float (expected PCM16)".to_string()));
    }
    if spec.bits_per_sample != 16 {
        return Err(fmt_err(format!("bits_per_sample = {} (expected 16)", spec.bits_per_sample)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| fmt_err(e.to_string()))?;
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

/// Quantizes a sample to PCM16 (inverse of the `/ 32768` scaling in [`load_wav`]).
pub fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a mono PCM16 file. The file is written to a temporary path and renamed into place.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = crate::io::temp_sibling(path);
    {
        let mut writer = hound::WavWriter::create(&tmp, spec).map_err(|e| hound_err(&tmp, e))?;
        for &s in &w.samples {
            writer.write_sample(to_pcm16(s)).map_err(|e| hound_err(&tmp, e))?;
        }
        writer.finalize().map_err(|e| hound_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavFormat { path: path.to_path_buf(), property: other.to_string() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        save_wav(&p, &Waveform::new(vec![0.0; 16], 16000)).unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.0; 16]);
        assert_eq!(w.peak(), 0.0);
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn save_creates_missing_directories() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/s.wav");
        save_wav(&p, &Waveform::new(vec![0.5; 4], 8000)).unwrap();
        assert_eq!(load_wav(&p).unwrap().samples, vec![0.5; 4]);
    }

    #[test]
    fn max_sample_scales_by_32768() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(32767i16).unwrap();
        wr.finalize().unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples, vec![32767.0 / 32768.0]);
    }

    #[test]
    fn stereo_and_24_bit_are_rejected_by_property() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        let err = load_wav(&p).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");

        let p = dir.path().join("24.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 24, sample_format: hound::SampleFormat::Int };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(0i32).unwrap();
        wr.finalize().unwrap();
        let err = load_wav(&p).unwrap_err().to_string();
        assert!(err.contains("bits_per_sample"), "{err}");
    }

    #[test]
    fn missing_file_is_reported() {
        assert!(matches!(load_wav("/nonexistent/x.wav"), Err(Error::Missing(_))));
    }
}
