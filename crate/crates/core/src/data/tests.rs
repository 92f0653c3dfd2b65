use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use proptest::prelude::*;

use super::*;
use crate::dsp::{estimate_pitch, stft_magnitude, SpectroConfig};
use crate::error::Error;
use crate::io::{read_tokens, read_values, read_wav};

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn entry(id: &str, spk: &str, split: Split) -> ManifestEntry {
    ManifestEntry {
        utterance_id: id.into(),
        speaker_id: spk.into(),
        wav: format!("corpus/wav/{id}.wav").into(),
        phonemes: format!("corpus/phonemes/{id}.txt").into(),
        durations: format!("corpus/durations/{id}.txt").into(),
        pitch: None,
        energy: None,
        split,
    }
}

fn synthetic_manifest(speakers: usize, utts: usize) -> CorpusManifest {
    let entries = (0..speakers)
        .flat_map(|s| (0..utts).map(move |u| entry(&utterance_id(s, u), &speaker_id(s), Split::Train)))
        .collect();
    CorpusManifest::new("", entries).unwrap()
}

#[test]
fn same_seed_gives_byte_identical_corpus_for_any_job_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    make_toy_corpus(2, 3, 11, a.path(), 1).unwrap();
    make_toy_corpus(2, 3, 11, b.path(), 4).unwrap();
    let files = files_under(a.path());
    assert_eq!(files, files_under(b.path()));
    assert_eq!(files.len(), 2 * 3 * 3 + 1);
    for f in &files {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f:?}");
    }
    let c = tempfile::tempdir().unwrap();
    make_toy_corpus(2, 3, 12, c.path(), 1).unwrap();
    let wav = Path::new("corpus/wav/spk00_000.wav");
    assert_ne!(std::fs::read(a.path().join(wav)).unwrap(), std::fs::read(c.path().join(wav)).unwrap());
}

#[test]
fn eight_speakers_twenty_utterances_is_160_wavs() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_corpus(8, 20, 0, dir.path(), 4).unwrap();
    assert_eq!(m.len(), 160);
    let wavs = std::fs::read_dir(dir.path().join("corpus/wav")).unwrap().count();
    assert_eq!(wavs, 160);
    assert_eq!(m.speakers().len(), 8);
}

#[test]
fn toy_audio_length_is_exactly_durations_times_hop() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_corpus(2, 4, 5, dir.path(), 2).unwrap();
    for e in m.entries() {
        let d: Vec<usize> = read_values(&m.resolve(&e.durations)).unwrap();
        let p = read_tokens(&m.resolve(&e.phonemes)).unwrap();
        assert_eq!(d.len(), p.len());
        assert!((MIN_PHONEMES..=MAX_PHONEMES).contains(&p.len()));
        assert!(d.iter().all(|x| (MIN_DURATION..=MAX_DURATION).contains(x)));
        let w = read_wav(&m.resolve(&e.wav)).unwrap();
        assert_eq!(w.sample_rate(), TOY_SAMPLE_RATE);
        assert_eq!(w.len(), d.iter().sum::<usize>() * TOY_HOP);
    }
}

/// Fraction of mean spectral power falling within ±15% of `center`.
fn band_fraction(power: &[f64], center: f64, bin_hz: f64) -> f64 {
    let total: f64 = power.iter().sum();
    let band: f64 = power
        .iter()
        .enumerate()
        .filter(|(k, _)| (*k as f64 * bin_hz - center).abs() <= 0.15 * center)
        .map(|(_, p)| p)
        .sum();
    band / total
}

#[test]
fn speakers_differ_in_band_energy_by_construction() {
    let dir = tempfile::tempdir().unwrap();
    let n = 4;
    let m = make_toy_corpus(n, 6, 3, dir.path(), 4).unwrap();
    let voices = toy_speakers(n, 3);
    let cfg = SpectroConfig::synthesizer();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mean_power = |spk: &str| {
        let mut acc = vec![0.0; cfg.n_freqs()];
        let mut frames = 0.0;
        for e in m.entries().iter().filter(|e| e.speaker_id == spk) {
            let mag = stft_magnitude(&read_wav(&m.resolve(&e.wav)).unwrap(), &cfg).unwrap();
            for row in mag.values.rows() {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v * v);
                frames += 1.0;
            }
        }
        acc.iter().map(|a| a / frames).collect::<Vec<_>>()
    };
    let lo = voices.iter().min_by(|a, b| a.band_center.total_cmp(&b.band_center)).unwrap();
    let hi = voices.iter().max_by(|a, b| a.band_center.total_cmp(&b.band_center)).unwrap();
    let (p_lo, p_hi) = (mean_power(&lo.id), mean_power(&hi.id));
    for (own, other, c) in [(&p_lo, &p_hi, lo.band_center), (&p_hi, &p_lo, hi.band_center)] {
        let (a, b) = (band_fraction(own, c, bin_hz), band_fraction(other, c, bin_hz));
        assert!(a > 1.5 * b, "band at {c:.0} Hz: own {a:.4} vs other {b:.4}");
    }
}

#[test]
fn speaker_voices_are_seeded_and_distinct() {
    let v = toy_speakers(8, 1);
    assert_eq!(v, toy_speakers(8, 1));
    let f0: BTreeSet<u64> = v.iter().map(|s| s.f0.to_bits()).collect();
    let bands: BTreeSet<u64> = v.iter().map(|s| s.band_center.to_bits()).collect();
    assert_eq!((f0.len(), bands.len()), (8, 8));
    assert!(v.iter().all(|s| (90.0..=260.0).contains(&s.f0)));
}

#[test]
fn empty_manifest_gives_empty_cache() {
    let dir = tempfile::tempdir().unwrap();
    let m = CorpusManifest::new(dir.path(), Vec::new()).unwrap();
    let cache = preprocess_corpus(&m, &PreprocessConfig::default(), &dir.path().join("cache"), 2).unwrap();
    assert!(cache.is_empty());
    let reopened = FeatureCache::open(&dir.path().join("cache")).unwrap();
    assert!(reopened.is_empty());
    assert_eq!(reopened.stats, NormStats::default());
}

fn toy_cache(dir: &Path, speakers: usize, utts: usize, n_unseen: usize) -> (CorpusManifest, FeatureCache) {
    let m = make_toy_corpus(speakers, utts, 7, &dir.join("toy"), 4).unwrap();
    let m = split_speakers(&m, n_unseen, 7).unwrap().into_manifest(&m).unwrap();
    let cache = preprocess_corpus(&m, &PreprocessConfig::default(), &dir.join("cache"), 4).unwrap();
    (m, cache)
}

#[test]
fn cache_holds_every_entry_with_consistent_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (m, cache) = toy_cache(dir.path(), 3, 4, 1);
    assert_eq!(cache.len(), m.len());
    let reopened = FeatureCache::open(&cache.root).unwrap();
    assert_eq!(reopened.entries, cache.entries);
    assert_eq!(reopened.stats, cache.stats);
    assert_eq!(reopened.vocab.len(), toy_inventory().len().min(reopened.vocab.len()));
    for e in &cache.entries {
        let mel = cache.mel(&e.utterance_id).unwrap();
        assert_eq!(mel.dim(), (e.frames, 80));
        let (ids, t) = cache.targets(&e.utterance_id).unwrap();
        assert_eq!(ids.len(), e.phonemes);
        assert_eq!(t.total_frames(), e.frames);
        assert_eq!(cache.enc_mel(&e.utterance_id).unwrap().ncols(), 80);
        assert_eq!(cache.mfcc(&e.utterance_id).unwrap().ncols(), 30);
        assert_eq!(cache.wav(&e.utterance_id).unwrap().sample_rate(), 22050);
    }
}

#[test]
fn phoneme_pitch_is_mean_of_frame_pitch_over_its_span() {
    let dir = tempfile::tempdir().unwrap();
    let (m, cache) = toy_cache(dir.path(), 2, 2, 0);
    let e = &m.entries()[0];
    let w = read_wav(&m.resolve(&e.wav)).unwrap();
    let frames = estimate_pitch(&w, &SpectroConfig::synthesizer()).unwrap();
    let durations: Vec<usize> = read_values(&m.resolve(&e.durations)).unwrap();
    let mut oracle = Vec::new();
    let mut t = 0;
    for &d in &durations {
        let mut sum = 0.0;
        for k in t..t + d {
            sum += frames[k];
        }
        oracle.push(sum / d as f64);
        t += d;
    }
    let got = cache.prosody(&e.utterance_id).unwrap();
    assert_eq!(got.durations, durations);
    for (a, b) in got.pitch.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
    }
    assert!(got.pitch.iter().any(|&p| p > 50.0), "voiced phonemes carry pitch");
}

#[test]
fn normalization_statistics_exclude_test_splits() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cache) = toy_cache(dir.path(), 4, 5, 1);
    let prosody = |split: Option<Split>| {
        cache
            .entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| cache.prosody(&e.utterance_id).unwrap())
            .collect::<Vec<_>>()
    };
    let train = prosody(Some(Split::Train));
    assert_eq!(cache.stats, NormStats::from_prosody(&train));
    assert_eq!(cache.stats.train_items, cache.split(Split::Train).count());
    assert!(cache.split(Split::UnseenTest).count() > 0 && cache.split(Split::SeenTest).count() > 0);
    assert_ne!(cache.stats, NormStats::from_prosody(&prosody(None)));
}

#[test]
fn missing_files_are_itemized_and_partial_cache_is_kept() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_corpus(2, 3, 1, &dir.path().join("toy"), 2).unwrap();
    std::fs::remove_file(m.resolve(&m.entries()[1].wav)).unwrap();
    std::fs::remove_file(m.resolve(&m.entries()[4].durations)).unwrap();
    let out = dir.path().join("cache");
    match preprocess_corpus(&m, &PreprocessConfig::default(), &out, 2) {
        Err(Error::Preprocess { failures, written }) => {
            let ids: Vec<&str> = failures.iter().map(|(id, _)| id.as_str()).collect();
            assert_eq!(ids, [m.entries()[1].utterance_id.as_str(), m.entries()[4].utterance_id.as_str()]);
            assert!(failures.iter().all(|(_, why)| why.contains("missing file")));
            assert_eq!(written, 4);
        }
        other => panic!("expected itemized failure, got {other:?}"),
    }
    let cache = FeatureCache::open(&out).unwrap();
    assert_eq!(cache.len(), 4);
    assert!(cache.entries.iter().all(|e| cache.mel(&e.utterance_id).is_ok()));
}

#[test]
fn duration_audio_mismatch_is_a_data_failure() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_corpus(1, 1, 1, &dir.path().join("toy"), 1).unwrap();
    let e = &m.entries()[0];
    let mut d: Vec<usize> = read_values(&m.resolve(&e.durations)).unwrap();
    d[0] += 50;
    crate::io::write_tokens(&m.resolve(&e.durations), &d).unwrap();
    let err = preprocess_corpus(&m, &PreprocessConfig::default(), &dir.path().join("c"), 1).unwrap_err();
    assert!(matches!(&err, Error::Preprocess { failures, .. } if failures[0].1.contains("frames")), "{err}");
}

#[test]
fn explicit_pitch_track_overrides_estimation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    let m = make_toy_corpus(1, 1, 2, &root, 1).unwrap();
    let mut e = m.entries()[0].clone();
    let d: Vec<usize> = read_values(&m.resolve(&e.durations)).unwrap();
    let track: Vec<f64> = (0..d.iter().sum::<usize>() + 1).map(|t| t as f64).collect();
    crate::io::write_tokens(&root.join("track.txt"), &track).unwrap();
    e.pitch = Some("track.txt".into());
    let m = CorpusManifest::new(&root, vec![e.clone()]).unwrap();
    let cache = preprocess_corpus(&m, &PreprocessConfig::default(), &dir.path().join("c"), 1).unwrap();
    assert_eq!(cache.prosody(&e.utterance_id).unwrap().pitch, phoneme_means(&track, &d));
}

#[test]
fn phoneme_means_handles_zero_durations() {
    assert_eq!(phoneme_means(&[1.0, 3.0, 5.0, 7.0], &[2, 0, 2]), vec![2.0, 0.0, 6.0]);
}

#[test]
fn split_without_unseen_speakers_has_empty_unseen_test() {
    let m = synthetic_manifest(5, 10);
    let s = split_speakers(&m, 0, 3).unwrap();
    assert!(s.unseen_test.is_empty());
    assert_eq!(s.seen_test.len(), 5);
    assert_eq!(s.train.len() + s.seen_test.len(), 50);
}

#[test]
fn default_holds_out_eight_speakers() {
    assert_eq!(DEFAULT_UNSEEN, 8);
    let m = synthetic_manifest(16, 20);
    let s = split_speakers(&m, DEFAULT_UNSEEN, 0).unwrap();
    let unseen: BTreeSet<&str> = s.unseen_test.iter().map(|e| e.speaker_id.as_str()).collect();
    assert_eq!(unseen.len(), 8);
    assert_eq!(s.unseen_test.len(), 160);
    assert_eq!(s.seen_test.len(), 8 * 2);
}

#[test]
fn too_many_unseen_speakers_is_an_error() {
    let m = synthetic_manifest(3, 4);
    assert!(matches!(split_speakers(&m, 3, 0), Err(Error::Data(_))));
    assert!(split_speakers(&m, 2, 0).is_ok());
}

#[test]
fn manifest_rejects_duplicates_and_leaked_unseen_speakers() {
    let dup = vec![entry("u1", "a", Split::Train), entry("u1", "b", Split::Train)];
    assert!(matches!(CorpusManifest::new("", dup), Err(Error::Data(_))));
    let leak = vec![entry("u1", "a", Split::Train), entry("u2", "a", Split::UnseenTest)];
    assert!(matches!(CorpusManifest::new("", leak), Err(Error::Data(_))));
}

#[test]
fn manifest_file_round_trip_and_header_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = vec![entry("u1", "a", Split::Train), entry("u2", "b", Split::SeenTest)];
    entries[1].pitch = Some("f0/u2.txt".into());
    let m = CorpusManifest::new(dir.path(), entries).unwrap();
    let path = dir.path().join("manifest.tsv");
    m.save(&path).unwrap();
    assert_eq!(CorpusManifest::load(&path).unwrap(), m);
    assert!(matches!(CorpusManifest::parse("id\tspk\n", ""), Err(Error::Format(_))));
}

fn arb_entry() -> impl Strategy<Value = ManifestEntry> {
    (
        "[a-z0-9_]{1,8}",
        "[a-z]{1,4}",
        "[a-z/]{1,12}\\.wav",
        proptest::option::of("[a-z/]{1,10}"),
        proptest::option::of("[a-z/]{1,10}"),
        prop_oneof![Just(Split::Train), Just(Split::SeenTest)],
    )
        .prop_map(|(id, spk, wav, pitch, energy, split)| ManifestEntry {
            utterance_id: id.clone(),
            speaker_id: spk,
            wav: wav.into(),
            phonemes: format!("p/{id}.txt").into(),
            durations: format!("d/{id}.txt").into(),
            pitch: pitch.map(PathBuf::from),
            energy: energy.map(PathBuf::from),
            split,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn manifest_round_trips_losslessly(entries in proptest::collection::vec(arb_entry(), 0..12)) {
        let mut seen = BTreeSet::new();
        let entries: Vec<_> = entries.into_iter().filter(|e| seen.insert(e.utterance_id.clone())).collect();
        let m = CorpusManifest::new("root", entries).unwrap();
        prop_assert_eq!(CorpusManifest::parse(&m.render(), "root").unwrap(), m);
    }

    #[test]
    fn split_keeps_unseen_speakers_out_of_training(
        seed in any::<u64>(),
        speakers in 2usize..20,
        utts in 1usize..12,
        frac in 0.0f64..1.0,
    ) {
        let m = synthetic_manifest(speakers, utts);
        let n_unseen = ((speakers - 1) as f64 * frac) as usize;
        let s = split_speakers(&m, n_unseen, seed).unwrap();
        let train: BTreeSet<&str> = s.train.iter().map(|e| e.speaker_id.as_str()).collect();
        let unseen: BTreeSet<&str> = s.unseen_test.iter().map(|e| e.speaker_id.as_str()).collect();
        prop_assert!(train.is_disjoint(&unseen));
        prop_assert_eq!(unseen.len(), n_unseen);
        let seen_test: BTreeSet<&str> = s.seen_test.iter().map(|e| e.speaker_id.as_str()).collect();
        prop_assert!(seen_test.is_disjoint(&unseen));
        prop_assert_eq!(s.train.len() + s.seen_test.len() + s.unseen_test.len(), m.len());
        let retagged = s.clone().into_manifest(&m).unwrap();
        prop_assert_eq!(retagged.len(), m.len());
        prop_assert_eq!(s, split_speakers(&m, n_unseen, seed).unwrap());
    }
}
