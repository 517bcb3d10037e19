use etts_core::signal::corpus::{render_token, toy_token_table};
use etts_core::signal::mel::MelFilterbank;
use etts_core::signal::pitch::waveform_stats;
use etts_core::signal::{
    corpus_stats, generate_toy_corpus, load_wav, save_wav, wav_to_mel, Intonation, MelConfig, PitchConfig, ToyCorpusOptions, Waveform,
};
use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn sine(freq: f64, amp: f64, n: usize, sr: u32) -> Waveform {
    Waveform::new((0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(sr)).sin()).collect(), sr)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wav_round_trip_is_bit_exact(pcm in proptest::collection::vec(any::<i16>(), 1..400)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let w = Waveform::new(pcm.iter().map(|&v| f64::from(v) / 32768.0).collect(), 22050);
        save_wav(&p, &w).unwrap();
        let back = load_wav(&p).unwrap();
        prop_assert_eq!(&back, &w);
        let first = std::fs::read(&p).unwrap();
        save_wav(&p, &back).unwrap();
        prop_assert_eq!(first, std::fs::read(&p).unwrap());
    }

    #[test]
    fn frame_count_formula_holds(len in 800usize..6000, hop in 50usize..400) {
        let cfg = MelConfig { hop: hop.min(800), n_mels: 20, ..Default::default() };
        let w = sine(300.0, 0.3, len, 16000);
        let mel = wav_to_mel(&w, &cfg).unwrap();
        prop_assert_eq!(mel.num_frames(), 1 + (len - cfg.win) / cfg.hop);
        let floor = cfg.log_floor.ln();
        prop_assert!(mel.frames.iter().flatten().all(|&v| v >= floor));
    }
}

#[test]
fn sine_at_band_center_peaks_in_that_band() {
    let cfg = MelConfig::default();
    let fb = MelFilterbank::new(&cfg);
    for k in [10usize, 25, 40, 55, 70] {
        let f = fb.centers[k];
        let mel = wav_to_mel(&sine(f, 0.5, 16000, 16000), &cfg).unwrap();
        let mut mean = vec![0.0; cfg.n_mels];
        for fr in &mel.frames {
            for (m, v) in mean.iter_mut().zip(fr) {
                *m += v.exp();
            }
        }
        let argmax = mean.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!(argmax, k, "band center {f} Hz");
    }
}

#[test]
fn doubling_amplitude_adds_log_two() {
    let cfg = MelConfig::default();
    let a = wav_to_mel(&sine(440.0, 0.2, 4000, 16000), &cfg).unwrap();
    let b = wav_to_mel(&sine(440.0, 0.4, 4000, 16000), &cfg).unwrap();
    let floor = cfg.log_floor.ln();
    let mut checked = 0;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        for (&x, &y) in fa.iter().zip(fb) {
            if x > floor {
                assert!((y - x - 2f64.ln()).abs() < 1e-9, "{x} {y}");
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn toy_corpus_is_deterministic() {
    let cfg = MelConfig::default();
    let opts = ToyCorpusOptions::default();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = generate_toy_corpus(d1.path(), 5, 7, &cfg, &opts).unwrap();
    let m2 = generate_toy_corpus(d2.path(), 5, 7, &cfg, &opts).unwrap();
    assert_eq!(m1.records, m2.records);
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(d1.path(), "manifest.tsv"), read(d2.path(), "manifest.tsv"));
    for r in &m1.records {
        assert_eq!(read(d1.path(), &r.audio_path), read(d2.path(), &r.audio_path));
        assert!(r.phonemes.iter().all(|p| toy_token_table().iter().any(|t| &t.symbol == p)));
    }
}

#[test]
fn empty_toy_corpus_writes_no_audio() {
    let d = tempfile::tempdir().unwrap();
    let m = generate_toy_corpus(d.path(), 0, 1, &MelConfig::default(), &ToyCorpusOptions::default()).unwrap();
    assert!(m.is_empty());
    assert!(!d.path().join("wavs").exists());
    assert_eq!(std::fs::read_to_string(d.path().join("manifest.tsv")).unwrap(), "");
}

#[test]
fn token_a_segment_peaks_at_its_formants() {
    let table = toy_token_table();
    let a = table.iter().find(|t| t.symbol == "a").unwrap();
    assert_eq!(a.formants, (500.0, 1500.0));
    let seg = render_token(a, 16000, 0, &|_| 1.0);
    let n = seg.len();
    let mut buf: Vec<Complex<f64>> = seg.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
    let bin_hz = 16000.0 / n as f64;
    let mut peaks: Vec<usize> = (1..mag.len() - 1).filter(|&k| mag[k] > mag[k - 1] && mag[k] >= mag[k + 1]).collect();
    peaks.sort_by(|&x, &y| mag[y].partial_cmp(&mag[x]).unwrap());
    let mut top: Vec<f64> = peaks[..2].iter().map(|&k| k as f64 * bin_hz).collect();
    top.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!((top[0] - 500.0).abs() <= bin_hz, "{top:?}");
    assert!((top[1] - 1500.0).abs() <= bin_hz, "{top:?}");
}

#[test]
fn constant_sine_corpus_stats() {
    let d = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for i in 0..3 {
        let rel = format!("s{i}.wav");
        save_wav(d.path().join(&rel), &sine(220.0, 0.5, 8000 + 1000 * i, 16000)).unwrap();
        records.push(etts_core::signal::UtteranceRecord { id: format!("s{i}"), phonemes: vec!["a".into()], audio_path: rel, intonation: Intonation::Statement });
    }
    let m = etts_core::signal::Manifest::new(records, d.path()).unwrap();
    let s = corpus_stats(&m, &PitchConfig::default()).unwrap();
    assert!((s.mean_f0 - 220.0).abs() < 5.0, "{s:?}");
    assert!(s.f0_variance < 1.0, "{s:?}");
}

#[test]
fn silent_corpus_has_no_voiced_frames() {
    let d = tempfile::tempdir().unwrap();
    save_wav(d.path().join("z.wav"), &Waveform::new(vec![0.0; 4000], 16000)).unwrap();
    let rec = etts_core::signal::UtteranceRecord { id: "z".into(), phonemes: vec!["pau".into()], audio_path: "z.wav".into(), intonation: Intonation::Statement };
    let m = etts_core::signal::Manifest::new(vec![rec], d.path()).unwrap();
    assert!(matches!(corpus_stats(&m, &PitchConfig::default()), Err(etts_core::Error::NoVoicedFrames)));
}

#[test]
fn pitch_ramps_increase_f0_variance() {
    let cfg = MelConfig::default();
    let flat = ToyCorpusOptions { question_ratio: 0.0, ..Default::default() };
    let ramped = ToyCorpusOptions { question_ratio: 1.0, ..Default::default() };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = generate_toy_corpus(d1.path(), 12, 3, &cfg, &flat).unwrap();
    let m2 = generate_toy_corpus(d2.path(), 12, 3, &cfg, &ramped).unwrap();
    let s1 = corpus_stats(&m1, &PitchConfig::default()).unwrap();
    let s2 = corpus_stats(&m2, &PitchConfig::default()).unwrap();
    assert!(s2.f0_variance > s1.f0_variance, "flat {s1:?} ramped {s2:?}");
    let waves: Vec<Waveform> = m2.records.iter().map(|r| load_wav(m2.audio_path(r)).unwrap()).collect();
    assert_eq!(waveform_stats(&waves, &PitchConfig::default()).unwrap(), s2);
}
