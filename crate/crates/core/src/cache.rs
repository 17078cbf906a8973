//! Binary cache of preprocessed spectrograms.
//!
//! Preparing the corpus is far more expensive than reading it back, so the
//! preparation step writes every [`SpectrogramSample`] into a single cache
//! file that training and evaluation then stream from. The file starts with
//! a header recording the grid geometry and a hash of the preprocessing
//! configuration, followed by length-framed records each carrying its own
//! checksum. A reader therefore detects both "this cache was built with
//! different preprocessing" (header hash mismatch, fatal) and "this record
//! was damaged on disk" (checksum mismatch, skipped and counted).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::dsp::SpectrogramSample;
use crate::error::{Error, Result};
use crate::util::fnv1a64;

const MAGIC: [u8; 8] = *b"VACSPC01";
const VERSION: u32 = 1;
/// Upper bound on a sane record payload; anything larger means the length
/// field itself is damaged.
const MAX_PAYLOAD: u32 = 1 << 24;

/// Cache file header: grid geometry plus the preprocessing-config hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheHeader {
    pub freq_bins: u32,
    pub frames: u32,
    pub dsp_hash: u64,
}

fn encode_record(sample: &SpectrogramSample) -> Result<Vec<u8>> {
    let id = sample.clip_id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(Error::Cache(format!(
            "clip id too long: {} bytes",
            id.len()
        )));
    }
    let mut payload =
        Vec::with_capacity(2 + id.len() + 1 + sample.mask.len() + 4 * sample.grid.len());
    payload.write_u16::<LittleEndian>(id.len() as u16)?;
    payload.extend_from_slice(id);
    payload.push(sample.digit);
    payload.extend_from_slice(&sample.mask);
    for &v in sample.grid.iter() {
        payload.write_f32::<LittleEndian>(v)?;
    }
    Ok(payload)
}

fn decode_record(payload: &[u8], header: &CacheHeader) -> Result<SpectrogramSample> {
    let mut cur = payload;
    let id_len = cur.read_u16::<LittleEndian>()? as usize;
    if cur.len() < id_len {
        return Err(Error::Cache("record truncated inside id".into()));
    }
    let clip_id = String::from_utf8(cur[..id_len].to_vec())
        .map_err(|_| Error::Cache("record id is not UTF-8".into()))?;
    cur = &cur[id_len..];
    let digit = cur.read_u8()?;
    let frames = header.frames as usize;
    let bins = header.freq_bins as usize;
    if cur.len() != frames + 4 * bins * frames {
        return Err(Error::Cache(format!(
            "record payload for {clip_id} has wrong size: {}",
            cur.len()
        )));
    }
    let mask = cur[..frames].to_vec();
    cur = &cur[frames..];
    let mut grid = Array2::<f32>::zeros((bins, frames));
    for v in grid.iter_mut() {
        *v = cur.read_f32::<LittleEndian>()?;
    }
    let sample = SpectrogramSample {
        grid,
        mask,
        digit,
        clip_id,
    };
    sample.validate_with_shape(bins, frames)?;
    Ok(sample)
}

/// Streaming writer. Records go to `<path>.tmp`; [`CacheWriter::finish`]
/// renames it over `path`, so an interrupted run never leaves a
/// half-written cache under the final name.
pub struct CacheWriter {
    out: BufWriter<File>,
    tmp: PathBuf,
    path: PathBuf,
    header: CacheHeader,
    count: u64,
    finished: bool,
}

impl CacheWriter {
    pub fn create(path: &Path, freq_bins: u32, frames: u32, dsp_hash: u64) -> Result<Self> {
        let tmp = path.with_extension("tmp");
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(&MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(freq_bins)?;
        out.write_u32::<LittleEndian>(frames)?;
        out.write_u64::<LittleEndian>(dsp_hash)?;
        Ok(CacheWriter {
            out,
            tmp,
            path: path.to_path_buf(),
            header: CacheHeader {
                freq_bins,
                frames,
                dsp_hash,
            },
            count: 0,
            finished: false,
        })
    }

    pub fn append(&mut self, sample: &SpectrogramSample) -> Result<()> {
        let (bins, frames) = sample.grid.dim();
        if bins != self.header.freq_bins as usize || frames != self.header.frames as usize {
            return Err(Error::Shape(format!(
                "sample {} is {bins}x{frames}, cache is {}x{}",
                sample.clip_id, self.header.freq_bins, self.header.frames
            )));
        }
        let payload = encode_record(sample)?;
        self.out.write_u32::<LittleEndian>(payload.len() as u32)?;
        self.out.write_all(&payload)?;
        self.out.write_u64::<LittleEndian>(fnv1a64(&payload))?;
        self.count += 1;
        Ok(())
    }

    /// Flush and atomically move the file into place. Returns the record count.
    pub fn finish(mut self) -> Result<u64> {
        self.out.flush()?;
        fs::rename(&self.tmp, &self.path)?;
        self.finished = true;
        Ok(self.count)
    }
}

impl Drop for CacheWriter {
    fn drop(&mut self) {
        if !self.finished {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

/// Streaming reader over cache records.
pub struct CacheReader {
    input: BufReader<File>,
    pub header: CacheHeader,
    /// Records whose checksum or shape check failed so far.
    pub corrupt: usize,
}

impl CacheReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Cache(format!(
                "{} is not a spectrogram cache",
                path.display()
            )));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Cache(format!(
                "unsupported cache version {version} (expected {VERSION})"
            )));
        }
        let freq_bins = input.read_u32::<LittleEndian>()?;
        let frames = input.read_u32::<LittleEndian>()?;
        let dsp_hash = input.read_u64::<LittleEndian>()?;
        Ok(CacheReader {
            input,
            header: CacheHeader {
                freq_bins,
                frames,
                dsp_hash,
            },
            corrupt: 0,
        })
    }

    /// Read the next valid record, skipping damaged ones. `None` at end of
    /// file; a truncated trailing record counts as damaged.
    pub fn next_record(&mut self) -> Option<SpectrogramSample> {
        loop {
            let len = match self.input.read_u32::<LittleEndian>() {
                Ok(len) => len,
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return None,
                Err(_) => {
                    self.corrupt += 1;
                    return None;
                }
            };
            if len > MAX_PAYLOAD {
                // Length field itself is damaged; no way to resynchronise.
                self.corrupt += 1;
                return None;
            }
            let mut payload = vec![0u8; len as usize];
            if self.input.read_exact(&mut payload).is_err() {
                self.corrupt += 1;
                return None;
            }
            let stored = match self.input.read_u64::<LittleEndian>() {
                Ok(h) => h,
                Err(_) => {
                    self.corrupt += 1;
                    return None;
                }
            };
            if stored != fnv1a64(&payload) {
                log::warn!("cache record with bad checksum skipped");
                self.corrupt += 1;
                continue;
            }
            match decode_record(&payload, &self.header) {
                Ok(sample) => return Some(sample),
                Err(e) => {
                    log::warn!("cache record undecodable: {e}");
                    self.corrupt += 1;
                    continue;
                }
            }
        }
    }
}

/// Load every valid record. Returns the header, the samples, and how many
/// records were skipped as damaged.
pub fn read_all(path: &Path) -> Result<(CacheHeader, Vec<SpectrogramSample>, usize)> {
    let mut reader = CacheReader::open(path)?;
    let mut samples = Vec::new();
    while let Some(s) = reader.next_record() {
        samples.push(s);
    }
    Ok((reader.header, samples, reader.corrupt))
}

/// The clip ids present in a cache, in file order. Used to resume an
/// interrupted preparation run without re-decoding finished clips.
pub fn cached_ids(path: &Path) -> Result<Vec<String>> {
    let mut reader = CacheReader::open(path)?;
    let mut ids = Vec::new();
    while let Some(s) = reader.next_record() {
        ids.push(s.clip_id);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{FRAMES, FREQ_BINS};

    fn synth_sample(id: &str, digit: u8, fill: f32) -> SpectrogramSample {
        let grid = Array2::from_elem((FREQ_BINS, FRAMES), fill);
        let mask = vec![1u8; FRAMES];
        SpectrogramSample {
            grid,
            mask,
            digit,
            clip_id: id.into(),
        }
    }

    fn write_cache(path: &Path, samples: &[SpectrogramSample]) {
        let mut w = CacheWriter::create(path, FREQ_BINS as u32, FRAMES as u32, 0xabcd).unwrap();
        for s in samples {
            w.append(s).unwrap();
        }
        w.finish().unwrap();
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.cache");
        let samples: Vec<_> = (0..5)
            .map(|i| synth_sample(&format!("clip{i}"), i as u8, i as f32 / 10.0))
            .collect();
        write_cache(&path, &samples);

        let (header, loaded, corrupt) = read_all(&path).unwrap();
        assert_eq!(header.dsp_hash, 0xabcd);
        assert_eq!(corrupt, 0);
        assert_eq!(loaded.len(), 5);
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a.clip_id, b.clip_id);
            assert_eq!(a.digit, b.digit);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.grid, b.grid);
        }
    }

    #[test]
    fn flipped_byte_is_detected_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.cache");
        let samples: Vec<_> = (0..3)
            .map(|i| synth_sample(&format!("clip{i}"), i as u8, 0.5))
            .collect();
        write_cache(&path, &samples);

        // Flip one byte in the middle of the first record's grid data.
        let mut bytes = fs::read(&path).unwrap();
        let offset = 28 + 4 + 200; // header + first length field + into payload
        bytes[offset] ^= 0xff;
        fs::write(&path, &bytes).unwrap();

        let (_, loaded, corrupt) = read_all(&path).unwrap();
        assert_eq!(corrupt, 1);
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].clip_id, "clip1");
    }

    #[test]
    fn truncated_tail_counts_as_damaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.cache");
        let samples: Vec<_> = (0..3)
            .map(|i| synth_sample(&format!("clip{i}"), i as u8, 0.25))
            .collect();
        write_cache(&path, &samples);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1000]).unwrap();

        let (_, loaded, corrupt) = read_all(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(corrupt, 1);
    }

    #[test]
    fn not_a_cache_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, b"random bytes, definitely not a cache header").unwrap();
        assert!(CacheReader::open(&path).is_err());
    }

    #[test]
    fn interrupted_writer_leaves_no_final_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.cache");
        {
            let mut w = CacheWriter::create(&path, FREQ_BINS as u32, FRAMES as u32, 1).unwrap();
            w.append(&synth_sample("a", 0, 0.1)).unwrap();
            // Dropped without finish(): simulates a crash mid-preparation.
        }
        assert!(!path.exists());
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn cached_ids_lists_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.cache");
        let samples: Vec<_> = ["x", "y", "z"]
            .iter()
            .map(|id| synth_sample(id, 0, 0.0))
            .collect();
        write_cache(&path, &samples);
        assert_eq!(cached_ids(&path).unwrap(), vec!["x", "y", "z"]);
    }

    #[test]
    fn wrong_shape_sample_is_rejected_by_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.cache");
        let mut w = CacheWriter::create(&path, 4, 4, 0).unwrap();
        let bad = synth_sample("a", 0, 0.1); // 128x99, writer expects 4x4
        assert!(w.append(&bad).is_err());
    }
}
