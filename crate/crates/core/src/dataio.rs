//! Corpus access and deterministic splits.
//!
//! The corpus is a directory tree of single-channel WAV files whose names
//! encode the spoken digit and speaker as `{digit}_{speaker}_{index}.wav`
//! (the layout used by common spoken-digit corpora). Splitting is
//! uniform-random over clips with a fixed seed; an optional speaker-held-out
//! mode keeps each speaker's clips inside one split.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::util::{derive_seed, fnv1a64};

/// One decoded audio clip.
#[derive(Debug, Clone)]
pub struct AudioClip {
    /// Unique id, the corpus-relative file path.
    pub id: String,
    /// Mono amplitude samples in [-1, 1].
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// Spoken digit 0..=9.
    pub digit: u8,
    pub speaker_id: String,
    /// Sample count before any padding is applied downstream.
    pub original_length: usize,
}

impl AudioClip {
    pub fn new(
        id: String,
        samples: Vec<f32>,
        sample_rate: u32,
        digit: u8,
        speaker_id: String,
    ) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArg("sample_rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArg("samples must be non-empty".into()));
        }
        if digit > 9 {
            return Err(Error::InvalidArg(format!("digit {digit} out of 0..=9")));
        }
        let original_length = samples.len();
        Ok(AudioClip {
            id,
            samples,
            sample_rate,
            digit,
            speaker_id,
            original_length,
        })
    }
}

/// A corpus file located on disk, with metadata parsed from its name but
/// samples not yet decoded. Lets the preparation pipeline stream clips
/// one at a time instead of holding the whole corpus in memory.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub id: String,
    pub path: PathBuf,
    pub digit: u8,
    pub speaker_id: String,
}

fn parse_name(stem: &str) -> Option<(u8, String)> {
    let mut parts = stem.split('_');
    let digit: u8 = parts.next()?.parse().ok()?;
    if digit > 9 {
        return None;
    }
    let speaker = parts.next()?.to_string();
    Some((digit, speaker))
}

/// Scan a corpus directory for WAV files with parseable names, sorted by id.
/// Files that do not match the naming scheme are skipped with a warning.
pub fn scan_corpus(root: &Path) -> Result<Vec<CorpusEntry>> {
    if !root.is_dir() {
        return Err(Error::Corpus(format!(
            "corpus directory {} does not exist",
            root.display()
        )));
    }
    let mut entries = Vec::new();
    for item in walkdir::WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| Error::Corpus(e.to_string()))?;
        if !item.file_type().is_file() {
            continue;
        }
        let path = item.path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            != Some("wav".into())
        {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s,
            None => continue,
        };
        let Some((digit, speaker)) = parse_name(stem) else {
            log::warn!(
                "skipping {}: name does not encode a digit label",
                path.display()
            );
            continue;
        };
        let id = path
            .strip_prefix(root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        entries.push(CorpusEntry {
            id,
            path: path.to_path_buf(),
            digit,
            speaker_id: speaker,
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

/// Decode one corpus file to a mono clip. Multi-channel input is averaged.
pub fn load_clip(entry: &CorpusEntry) -> Result<AudioClip> {
    let reader = hound::WavReader::open(&entry.path)
        .map_err(|e| Error::Wav(format!("{}: {e}", entry.id)))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;

    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav(format!("{}: {e}", entry.id)))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / f32::from(1u16 << (spec.bits_per_sample - 1).min(15));
            let raw: Vec<i32> = reader
                .into_samples::<i32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Wav(format!("{}: {e}", entry.id)))?;
            let shift = spec.bits_per_sample.saturating_sub(16);
            raw.iter().map(|&s| (s >> shift) as f32 * scale).collect()
        }
    };

    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };

    AudioClip::new(
        entry.id.clone(),
        samples,
        spec.sample_rate,
        entry.digit,
        entry.speaker_id.clone(),
    )
}

/// Load every decodable clip under `root`. Undecodable files are skipped
/// with a warning; zero decodable files is fatal.
pub fn load_corpus(root: &Path) -> Result<Vec<AudioClip>> {
    let entries = scan_corpus(root)?;
    let mut clips = Vec::with_capacity(entries.len());
    for entry in &entries {
        match load_clip(entry) {
            Ok(clip) => clips.push(clip),
            Err(e) => log::warn!("skipping undecodable file: {e}"),
        }
    }
    if clips.is_empty() {
        return Err(Error::Corpus(format!(
            "no decodable audio files under {}",
            root.display()
        )));
    }
    Ok(clips)
}

/// Disjoint train/validation/test id lists plus the seed that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Which section of the manifest a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArg(format!("unknown split {other:?}"))),
        }
    }
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train_ids,
            Split::Val => &self.val_ids,
            Split::Test => &self.test_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.train_ids.len() + self.val_ids.len() + self.test_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hash over seed and all section ids, in section order.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        for (name, ids) in [
            ("train", &self.train_ids),
            ("val", &self.val_ids),
            ("test", &self.test_ids),
        ] {
            bytes.extend_from_slice(name.as_bytes());
            for id in ids.iter() {
                bytes.extend_from_slice(id.as_bytes());
                bytes.push(b'\n');
            }
        }
        fnv1a64(&bytes)
    }

    pub fn validate_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self
            .train_ids
            .iter()
            .chain(self.val_ids.iter())
            .chain(self.test_ids.iter())
        {
            if !seen.insert(id.as_str()) {
                return Err(Error::Manifest(format!("id {id} appears in two splits")));
            }
        }
        Ok(())
    }
}

/// 80/10/10 split sizes: validation and test each take floor(n/10) and
/// training takes the rest, which lands on 24000/3000/3000 for the full
/// 30000-clip corpus.
fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

/// Deterministic uniform-random split of clip ids.
pub fn make_splits(clips: &[AudioClip], seed: u64) -> Result<SplitManifest> {
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    make_splits_from_ids(ids, seed, false)
}

/// Split from bare ids. With `speaker_held_out` every id sharing the same
/// speaker field (second `_`-separated component) lands in one split;
/// sizes then only approximate 80/10/10.
pub fn make_splits_from_ids(
    mut ids: Vec<String>,
    seed: u64,
    speaker_held_out: bool,
) -> Result<SplitManifest> {
    if ids.len() < 10 {
        return Err(Error::InvalidArg(format!(
            "need at least 10 clips to split, got {}",
            ids.len()
        )));
    }
    {
        let mut dedup = BTreeSet::new();
        for id in &ids {
            if !dedup.insert(id.as_str()) {
                return Err(Error::InvalidArg(format!("duplicate clip id {id}")));
            }
        }
    }
    ids.sort();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "split"));

    let (mut train, mut val, mut test);
    if speaker_held_out {
        let speaker_of = |id: &str| -> String {
            let stem = id.rsplit('/').next().unwrap_or(id);
            stem.split('_').nth(1).unwrap_or(stem).to_string()
        };
        let mut speakers: Vec<String> = ids
            .iter()
            .map(|id| speaker_of(id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        speakers.shuffle(&mut rng);
        let n_spk = speakers.len();
        let val_spk = (n_spk / 10).max(1);
        let test_spk = (n_spk / 10).max(1);
        if val_spk + test_spk >= n_spk {
            return Err(Error::InvalidArg(
                "not enough distinct speakers for a held-out split".into(),
            ));
        }
        let test_set: BTreeSet<_> = speakers[..test_spk].iter().cloned().collect();
        let val_set: BTreeSet<_> = speakers[test_spk..test_spk + val_spk]
            .iter()
            .cloned()
            .collect();
        train = Vec::new();
        val = Vec::new();
        test = Vec::new();
        for id in ids {
            let spk = speaker_of(&id);
            if test_set.contains(&spk) {
                test.push(id);
            } else if val_set.contains(&spk) {
                val.push(id);
            } else {
                train.push(id);
            }
        }
    } else {
        ids.shuffle(&mut rng);
        let (n_train, n_val, _) = split_sizes(ids.len());
        test = ids.split_off(n_train + n_val);
        val = ids.split_off(n_train);
        train = ids;
    }
    train.sort();
    val.sort();
    test.sort();
    Ok(SplitManifest {
        train_ids: train,
        val_ids: val,
        test_ids: test,
        seed,
    })
}

/// Write the manifest as plain text: a header with seed and content hash,
/// then one id per line under `[train]` / `[val]` / `[test]` sections.
pub fn save_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "# split manifest v1")?;
    writeln!(out, "# seed: {}", manifest.seed)?;
    writeln!(out, "# hash: {:016x}", manifest.content_hash())?;
    for (name, ids) in [
        ("train", &manifest.train_ids),
        ("val", &manifest.val_ids),
        ("test", &manifest.test_ids),
    ] {
        writeln!(out, "[{name}]")?;
        for id in ids.iter() {
            writeln!(out, "{id}")?;
        }
    }
    Ok(())
}

/// Read a manifest and verify its recorded content hash.
pub fn load_manifest(path: &Path) -> Result<SplitManifest> {
    let file = fs::File::open(path)?;
    let mut seed: Option<u64> = None;
    let mut hash: Option<u64> = None;
    let mut section: Option<Split> = None;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());

    for line in BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# seed:") {
            seed = Some(
                rest.trim()
                    .parse()
                    .map_err(|_| Error::Manifest(format!("bad seed line {line:?}")))?,
            );
        } else if let Some(rest) = line.strip_prefix("# hash:") {
            hash = Some(
                u64::from_str_radix(rest.trim(), 16)
                    .map_err(|_| Error::Manifest(format!("bad hash line {line:?}")))?,
            );
        } else if line.starts_with('#') {
            continue;
        } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.parse()?);
        } else {
            match section {
                Some(Split::Train) => train.push(line.to_string()),
                Some(Split::Val) => val.push(line.to_string()),
                Some(Split::Test) => test.push(line.to_string()),
                None => return Err(Error::Manifest(format!("id {line:?} before any section"))),
            }
        }
    }

    let manifest = SplitManifest {
        train_ids: train,
        val_ids: val,
        test_ids: test,
        seed: seed.ok_or_else(|| Error::Manifest("missing seed header".into()))?,
    };
    let expected = hash.ok_or_else(|| Error::Manifest("missing hash header".into()))?;
    let actual = manifest.content_hash();
    if actual != expected {
        return Err(Error::Manifest(format!(
            "content hash mismatch: header {expected:016x}, computed {actual:016x}"
        )));
    }
    manifest.validate_disjoint()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn synth_clip(id: &str, digit: u8) -> AudioClip {
        AudioClip::new(id.into(), vec![0.1; 1000], 48_000, digit, "s1".into()).unwrap()
    }

    fn write_wav(path: &Path, samples: &[i16], rate: u32) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn load_corpus_missing_directory_fails() {
        assert!(load_corpus(Path::new("/nonexistent/corpus")).is_err());
    }

    #[test]
    fn load_corpus_empty_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(dir.path()).is_err());
    }

    #[test]
    fn load_corpus_parses_metadata_from_names() {
        let dir = tempfile::tempdir().unwrap();
        // 12 synthetic files across speakers and digits; record what we wrote.
        let mut expected = Vec::new();
        for spk in 1..=3 {
            let spk_dir = dir.path().join(format!("{spk:02}"));
            fs::create_dir(&spk_dir).unwrap();
            for digit in 0..4u8 {
                let name = format!("{digit}_{spk:02}_0.wav");
                let samples: Vec<i16> = (0..2000).map(|i| ((i * 13) % 251) as i16).collect();
                write_wav(&spk_dir.join(&name), &samples, 48_000);
                expected.push((format!("{spk:02}/{name}"), digit, format!("{spk:02}")));
            }
        }
        let clips = load_corpus(dir.path()).unwrap();
        assert_eq!(clips.len(), 12);
        expected.sort();
        for (clip, (id, digit, spk)) in clips.iter().zip(expected.iter()) {
            assert_eq!(&clip.id, id);
            assert_eq!(clip.digit, *digit);
            assert_eq!(&clip.speaker_id, spk);
            assert_eq!(clip.original_length, 2000);
        }
    }

    #[test]
    fn load_corpus_skips_undecodable_files() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("5_01_0.wav"), &[0, 100, -100], 16_000);
        fs::write(dir.path().join("6_01_0.wav"), b"not a wav at all").unwrap();
        let clips = load_corpus(dir.path()).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].digit, 5);
    }

    #[test]
    fn pcm16_scaling_is_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(
            &dir.path().join("0_01_0.wav"),
            &[i16::MIN, 0, i16::MAX],
            48_000,
        );
        let clips = load_corpus(dir.path()).unwrap();
        let s = &clips[0].samples;
        assert!((s[0] + 1.0).abs() < 1e-4);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn splits_are_sized_and_disjoint() {
        let clips: Vec<AudioClip> = (0..100)
            .map(|i| synth_clip(&format!("clip{i:03}"), (i % 10) as u8))
            .collect();
        let m = make_splits(&clips, 7).unwrap();
        assert_eq!(m.train_ids.len(), 80);
        assert_eq!(m.val_ids.len(), 10);
        assert_eq!(m.test_ids.len(), 10);
        m.validate_disjoint().unwrap();
        let union: BTreeSet<_> = m
            .train_ids
            .iter()
            .chain(&m.val_ids)
            .chain(&m.test_ids)
            .collect();
        assert_eq!(union.len(), 100);
    }

    #[test]
    fn full_corpus_sizes_match_spec() {
        assert_eq!(split_sizes(30_000), (24_000, 3_000, 3_000));
    }

    #[test]
    fn splits_are_deterministic() {
        let clips: Vec<AudioClip> = (0..50)
            .map(|i| synth_clip(&format!("c{i}"), (i % 10) as u8))
            .collect();
        let a = make_splits(&clips, 3).unwrap();
        let b = make_splits(&clips, 3).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&clips, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_reject_tiny_corpus() {
        let clips: Vec<AudioClip> = (0..9).map(|i| synth_clip(&format!("c{i}"), 0)).collect();
        assert!(make_splits(&clips, 0).is_err());
    }

    #[test]
    fn speaker_held_out_keeps_speakers_whole() {
        let ids: Vec<String> = (0..12)
            .flat_map(|spk| (0..5).map(move |i| format!("{}_{spk:02}_{i}.wav", i % 10)))
            .collect();
        let m = make_splits_from_ids(ids, 1, true).unwrap();
        let spk_of = |id: &str| id.split('_').nth(1).unwrap().to_string();
        let train: BTreeSet<_> = m.train_ids.iter().map(|i| spk_of(i)).collect();
        let val: BTreeSet<_> = m.val_ids.iter().map(|i| spk_of(i)).collect();
        let test: BTreeSet<_> = m.test_ids.iter().map(|i| spk_of(i)).collect();
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
    }

    #[test]
    fn manifest_round_trips_and_verifies_hash() {
        let clips: Vec<AudioClip> = (0..30)
            .map(|i| synth_clip(&format!("c{i:02}"), (i % 10) as u8))
            .collect();
        let m = make_splits(&clips, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        save_manifest(&path, &m).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(m, loaded);

        // Tamper with one id: the hash check must fail.
        let text = fs::read_to_string(&path).unwrap().replace("c00", "c99");
        fs::write(&path, text).unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
