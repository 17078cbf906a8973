//! The training loop: seeded shuffling, joint Adam updates over encoder,
//! decoder, and prior, a geometric learning-rate decay, per-epoch
//! validation, and best/latest checkpointing with a JSONL history.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Split, SplitManifest};
use crate::dsp::SpectrogramSample;
use crate::error::{Error, Result};
use crate::loss::{elbo_eval, elbo_forward_backward, LossBreakdown, ReconFamily};
use crate::metrics::{self, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use crate::nn::adam::Adam;
use crate::util::derive_seed;

/// Optimisation hyperparameters. The learning rate decays geometrically
/// from `lr_start` at the first epoch to `lr_end` at the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Monte-Carlo samples of the latent per step; one is the default and
    /// has always been enough in practice.
    pub mc_samples: usize,
    pub kl_weight: f64,
    pub seed: u64,
    pub recon: ReconFamily,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 64,
            lr_start: 5e-3,
            lr_end: 5e-4,
            mc_samples: 1,
            kl_weight: 1.0,
            seed: 0,
            recon: ReconFamily::Bernoulli,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_end > self.lr_start {
            return Err(Error::Config(format!(
                "lr_end {} exceeds lr_start {}; the schedule only decays",
                self.lr_end, self.lr_start
            )));
        }
        if !self.kl_weight.is_finite() || self.kl_weight < 0.0 {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: geometric interpolation hitting `lr_start`
/// and `lr_end` exactly at the first and last epoch.
pub fn lr_schedule(cfg: &TrainConfig, epoch: u32) -> f64 {
    debug_assert!(epoch < cfg.epochs);
    if epoch == 0 || cfg.epochs == 1 {
        return cfg.lr_start;
    }
    if epoch == cfg.epochs - 1 {
        return cfg.lr_end;
    }
    let ratio = (cfg.lr_end / cfg.lr_start).powf(1.0 / (cfg.epochs - 1) as f64);
    cfg.lr_start * ratio.powi(epoch as i32)
}

/// The three corpus splits, loaded into memory. The held-out test split is
/// deliberately reachable only through one loudly named accessor so that
/// every use is easy to audit; the generic [`Dataset::split`] refuses it.
pub struct Dataset {
    train: Vec<SpectrogramSample>,
    val: Vec<SpectrogramSample>,
    test: Vec<SpectrogramSample>,
    pub dsp_hash: u64,
}

impl Dataset {
    pub fn from_parts(
        train: Vec<SpectrogramSample>,
        val: Vec<SpectrogramSample>,
        test: Vec<SpectrogramSample>,
        dsp_hash: u64,
    ) -> Self {
        Dataset {
            train,
            val,
            test,
            dsp_hash,
        }
    }

    /// Read a spectrogram cache and partition it by manifest membership.
    /// Every id named in the manifest must be present in the cache.
    pub fn from_cache(cache_path: &Path, manifest: &SplitManifest) -> Result<Self> {
        let (header, samples, corrupt) = crate::cache::read_all(cache_path)?;
        if corrupt > 0 {
            warn!("{corrupt} corrupt cache records were skipped");
        }
        let train_ids: HashSet<&str> = manifest.train_ids.iter().map(|s| s.as_str()).collect();
        let val_ids: HashSet<&str> = manifest.val_ids.iter().map(|s| s.as_str()).collect();
        let test_ids: HashSet<&str> = manifest.test_ids.iter().map(|s| s.as_str()).collect();

        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        let mut found: HashSet<String> = HashSet::new();
        for sample in samples {
            let id = sample.clip_id.clone();
            if train_ids.contains(id.as_str()) {
                train.push(sample);
            } else if val_ids.contains(id.as_str()) {
                val.push(sample);
            } else if test_ids.contains(id.as_str()) {
                test.push(sample);
            } else {
                warn!("cached clip {id} is not in the manifest; ignored");
                continue;
            }
            found.insert(id);
        }
        let missing = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&s| manifest.ids(s))
            .filter(|id| !found.contains(id.as_str()))
            .count();
        if missing > 0 {
            return Err(Error::Corpus(format!(
                "{missing} manifest clips are absent from the cache; re-run preparation"
            )));
        }
        Ok(Dataset {
            train,
            val,
            test,
            dsp_hash: header.dsp_hash,
        })
    }

    pub fn train(&self) -> &[SpectrogramSample] {
        &self.train
    }

    pub fn val(&self) -> &[SpectrogramSample] {
        &self.val
    }

    /// The held-out split. Call this only from final-evaluation paths.
    pub fn test_split_for_final_evaluation(&self) -> &[SpectrogramSample] {
        &self.test
    }

    /// Split accessor for code that iterates over splits; refuses the test
    /// split so that no loop accidentally trains or tunes on it.
    pub fn split(&self, split: Split) -> Result<&[SpectrogramSample]> {
        match split {
            Split::Train => Ok(&self.train),
            Split::Val => Ok(&self.val),
            Split::Test => Err(Error::InvalidArg(
                "the test split must be requested explicitly via \
                 test_split_for_final_evaluation"
                    .into(),
            )),
        }
    }
}

/// Pack samples into the `(N, 1, freq, frames)` input tensor and the
/// `(N, frames)` frame mask the loss expects.
pub fn batch_arrays(samples: &[&SpectrogramSample]) -> (Array4<f64>, Array2<f64>) {
    let n = samples.len();
    let (h, w) = samples[0].grid.dim();
    let mut x = Array4::<f64>::zeros((n, 1, h, w));
    let mut mask = Array2::<f64>::zeros((n, w));
    for (i, s) in samples.iter().enumerate() {
        for row in 0..h {
            for col in 0..w {
                x[[i, 0, row, col]] = f64::from(s.grid[[row, col]]);
            }
        }
        for col in 0..w {
            mask[[i, col]] = f64::from(s.mask[col]);
        }
    }
    (x, mask)
}

/// One line of the training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub val_accuracy_pct: f64,
    pub val_nmi: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: u32,
    pub best_val_total: f64,
    pub best_path: PathBuf,
    pub latest_path: PathBuf,
    pub history_path: PathBuf,
}

fn mean_breakdown(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
    let n: usize = parts.iter().map(|(_, b)| b).sum();
    let mut out = LossBreakdown {
        reconstruction: 0.0,
        kl: 0.0,
        total: 0.0,
    };
    for (loss, b) in parts {
        let w = *b as f64 / n as f64;
        out.reconstruction += w * loss.reconstruction;
        out.kl += w * loss.kl;
        out.total += w * loss.total;
    }
    out
}

/// Evaluation-mode loss over a whole split, batched.
fn eval_loss(
    model: &Model,
    samples: &[SpectrogramSample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut parts = Vec::new();
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&SpectrogramSample> = chunk.iter().collect();
        let (x, mask) = batch_arrays(&refs);
        let loss = elbo_eval(model, &x, &mask, cfg.kl_weight, cfg.recon)?;
        parts.push((loss, chunk.len()));
    }
    Ok(mean_breakdown(&parts))
}

/// Encode a split in evaluation mode: posterior-mean latents and the
/// prior's hard cluster assignment for every sample, in split order.
pub fn predict_split(
    model: &Model,
    samples: &[SpectrogramSample],
    batch_size: usize,
) -> Result<(Vec<usize>, Array2<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("cannot evaluate an empty split".into()));
    }
    let d_z = model.cfg.d_z;
    let mut latents = Array2::<f64>::zeros((samples.len(), d_z));
    let mut predicted = Vec::with_capacity(samples.len());
    let mut offset = 0usize;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&SpectrogramSample> = chunk.iter().collect();
        let (x, _) = batch_arrays(&refs);
        let latent = model.encoder.forward_eval(&x)?;
        for i in 0..chunk.len() {
            latents.row_mut(offset + i).assign(&latent.mean.row(i));
            let assignment = model.prior.assign(latent.mean.row(i).as_slice().unwrap());
            predicted.push(assignment.component);
        }
        offset += chunk.len();
    }
    Ok((predicted, latents))
}

/// Cluster a split through the evaluation path and score it against the
/// spoken digits. Features for the geometric metrics are the posterior
/// means. Fails if the model assigns everything to one cluster, since the
/// geometric metrics are undefined there.
pub fn evaluate_split(
    model: &Model,
    samples: &[SpectrogramSample],
    batch_size: usize,
) -> Result<(MetricsReport, Vec<usize>, Array2<f64>)> {
    let (predicted, latents) = predict_split(model, samples, batch_size)?;
    let truth: Vec<usize> = samples.iter().map(|s| usize::from(s.digit)).collect();
    let report = metrics::evaluate(latents.view(), &predicted, &truth)?;
    Ok((report, predicted, latents))
}

/// Train a fresh model on the dataset's training split, validating every
/// epoch and writing `best.ckpt`, `latest.ckpt`, and `history.jsonl` under
/// `out_dir`. Returns the per-epoch records.
///
/// Any non-finite objective aborts immediately, naming the epoch, the
/// batch, and the clips in it.
pub fn train(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if dataset.train().is_empty() {
        return Err(Error::InvalidArg("training split is empty".into()));
    }
    if dataset.val().is_empty() {
        return Err(Error::InvalidArg("validation split is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let best_path = out_dir.join("best.ckpt");
    let latest_path = out_dir.join("latest.ckpt");
    let history_path = out_dir.join("history.jsonl");

    let mut model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    let mut adam = Adam::new();
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(train_cfg.seed, "train-shuffle"));
    let mut noise_rng = ChaCha12Rng::seed_from_u64(derive_seed(train_cfg.seed, "train-noise"));

    let mut history = BufWriter::new(File::create(&history_path)?);
    let mut records = Vec::with_capacity(train_cfg.epochs as usize);
    let mut best_epoch = 0u32;
    let mut best_val_total = f64::INFINITY;

    let n_train = dataset.train().len();
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..train_cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(train_cfg, epoch);
        order.shuffle(&mut shuffle_rng);

        let mut train_parts = Vec::new();
        for (batch_idx, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let refs: Vec<&SpectrogramSample> =
                chunk.iter().map(|&i| &dataset.train()[i]).collect();
            let (x, mask) = batch_arrays(&refs);
            let b = refs.len();

            model.zero_grad();
            let mut batch_loss = LossBreakdown {
                reconstruction: 0.0,
                kl: 0.0,
                total: 0.0,
            };
            for _ in 0..train_cfg.mc_samples {
                let eps = Array2::from_shape_fn((b, model_cfg.d_z), |_| {
                    noise_rng.sample::<f64, _>(StandardNormal)
                });
                let loss = elbo_forward_backward(
                    &mut model,
                    &x,
                    &mask,
                    &eps,
                    train_cfg.kl_weight,
                    train_cfg.recon,
                )
                .map_err(|e| {
                    let ids: Vec<&str> = refs.iter().map(|s| s.clip_id.as_str()).collect();
                    Error::Train(format!(
                        "epoch {epoch}, batch {batch_idx} (clips: {}): {e}",
                        ids.join(", ")
                    ))
                })?;
                batch_loss.reconstruction += loss.reconstruction;
                batch_loss.kl += loss.kl;
                batch_loss.total += loss.total;
            }
            let m = train_cfg.mc_samples as f64;
            batch_loss.reconstruction /= m;
            batch_loss.kl /= m;
            batch_loss.total /= m;

            if !batch_loss.total.is_finite() {
                let ids: Vec<&str> = refs.iter().map(|s| s.clip_id.as_str()).collect();
                return Err(Error::NonFinite(format!(
                    "objective became non-finite at epoch {epoch}, batch {batch_idx} \
                     (clips: {})",
                    ids.join(", ")
                )));
            }

            let mut params = model.collect_params();
            if train_cfg.mc_samples > 1 {
                for p in params.iter_mut() {
                    for g in p.grad.iter_mut() {
                        *g /= m;
                    }
                }
            }
            adam.step(&mut params, lr)?;
            drop(params);
            train_parts.push((batch_loss, b));
        }

        let val = eval_loss(&model, dataset.val(), train_cfg)?;
        if !val.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation objective became non-finite at epoch {epoch}"
            )));
        }
        // Track clustering quality with the label-based scores only: they
        // stay defined even when an early epoch collapses everything into
        // one component, whereas the geometric metrics would error out.
        let (val_pred, _) = predict_split(&model, dataset.val(), train_cfg.batch_size)?;
        let val_truth: Vec<usize> = dataset.val().iter().map(|s| usize::from(s.digit)).collect();
        let val_accuracy_pct = 100.0 * metrics::unsupervised_accuracy(&val_pred, &val_truth)?;
        let val_nmi = metrics::nmi(&val_pred, &val_truth)?;

        let record = EpochRecord {
            epoch,
            lr,
            train: mean_breakdown(&train_parts),
            val,
            val_accuracy_pct,
            val_nmi,
            seconds: started.elapsed().as_secs_f64(),
        };
        let line =
            serde_json::to_string(&record).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        history.write_all(line.as_bytes())?;
        history.write_all(b"\n")?;
        history.flush()?;

        save_checkpoint(
            &latest_path,
            &mut model,
            Some(&adam),
            epoch,
            dataset.dsp_hash,
        )?;
        if val.total < best_val_total {
            best_val_total = val.total;
            best_epoch = epoch;
            save_checkpoint(&best_path, &mut model, None, epoch, dataset.dsp_hash)?;
        }
        records.push(record);
    }

    Ok(TrainOutcome {
        records,
        best_epoch,
        best_val_total,
        best_path,
        latest_path,
        history_path,
    })
}

/// Load a checkpoint and refuse it when its preprocessing hash does not
/// match the data it is about to be evaluated on.
pub fn load_checkpoint_verified(path: &Path, expected_dsp_hash: u64) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.dsp_hash != expected_dsp_hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on preprocessing {:016x} but the data at hand \
             has {:016x}; refusing to mix them",
            ckpt.dsp_hash, expected_dsp_hash
        )));
    }
    Ok(ckpt)
}

/// Field-wise mean of several runs' reports.
pub fn mean_reports(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    Some(MetricsReport {
        accuracy_pct: reports.iter().map(|r| r.accuracy_pct).sum::<f64>() / n,
        nmi: reports.iter().map(|r| r.nmi).sum::<f64>() / n,
        silhouette: reports.iter().map(|r| r.silhouette).sum::<f64>() / n,
        dbi: reports.iter().map(|r| r.dbi).sum::<f64>() / n,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::Array2 as Nd2;

    /// Two synthetic spectrogram families on the tiny 16x12 grid: a low
    /// band and a high band, with per-sample jitter. Clusterable by
    /// construction, with the digit recording the family.
    pub(crate) fn synthetic_samples(count: usize, seed: u64) -> Vec<SpectrogramSample> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let family = i % 2;
                let mut grid = Nd2::<f32>::zeros((16, 12));
                for row in 0..16 {
                    for col in 0..12 {
                        let band = if family == 0 { row < 8 } else { row >= 8 };
                        let base = if band { 0.8 } else { 0.2 };
                        let jitter: f64 = rng.random_range(-0.15..0.15);
                        grid[[row, col]] = (base + jitter).clamp(0.0, 1.0) as f32;
                    }
                }
                // Most clips fill the window; a few stop early.
                let valid = if i % 5 == 4 { 9 } else { 12 };
                let mask: Vec<u8> = (0..12).map(|t| u8::from(t < valid)).collect();
                SpectrogramSample {
                    grid,
                    mask,
                    digit: family as u8,
                    clip_id: format!("synthetic/{i}"),
                }
            })
            .collect()
    }

    pub(crate) fn synthetic_dataset(seed: u64) -> Dataset {
        let train = synthetic_samples(12, seed);
        let val = synthetic_samples(6, seed.wrapping_add(1));
        let test = synthetic_samples(6, seed.wrapping_add(2));
        Dataset::from_parts(train, val, test, 0xabcd)
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_hits_both_endpoints_exactly() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 5e-3);
        assert_eq!(lr_schedule(&cfg, 499), 5e-4);
        // Interior points follow the geometric curve.
        let expected_mid = 5e-3 * (0.1f64).powf(250.0 / 499.0);
        assert!((lr_schedule(&cfg, 250) - expected_mid).abs() < 1e-15);
        // Strictly decreasing.
        for e in 1..cfg.epochs {
            assert!(lr_schedule(&cfg, e) < lr_schedule(&cfg, e - 1));
        }
        // One-epoch schedules are constant at the start rate.
        let one = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(&one, 0), 5e-3);
    }

    #[test]
    fn two_epoch_smoke_run_produces_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = synthetic_dataset(40);
        let outcome = train(&quick_cfg(7), &ModelConfig::tiny(), &dataset, dir.path()).unwrap();
        assert_eq!(outcome.records.len(), 2);
        for r in &outcome.records {
            assert!(r.train.total.is_finite());
            assert!(r.val.total.is_finite());
            assert!(r.val_accuracy_pct >= 0.0 && r.val_accuracy_pct <= 100.0);
        }
        assert!(outcome.best_path.exists());
        assert!(outcome.latest_path.exists());
        let history = std::fs::read_to_string(&outcome.history_path).unwrap();
        let lines: Vec<&str> = history.lines().collect();
        assert_eq!(lines.len(), 2);
        let parsed: EpochRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(parsed.epoch, 1);

        // The latest checkpoint carries optimizer state; best does not.
        let latest = load_checkpoint(&outcome.latest_path).unwrap();
        assert!(latest.adam.is_some());
        assert_eq!(latest.dsp_hash, 0xabcd);
        let best = load_checkpoint(&outcome.best_path).unwrap();
        assert!(best.adam.is_none());
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let dataset = synthetic_dataset(41);
        let run = |seed: u64| {
            let dir = tempfile::tempdir().unwrap();
            train(&quick_cfg(seed), &ModelConfig::tiny(), &dataset, dir.path())
                .unwrap()
                .records
                .iter()
                .map(|r| r.train.total.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn every_parameter_group_moves_during_training() {
        let dataset = synthetic_dataset(42);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut fresh = Model::new(ModelConfig::tiny(), cfg.seed).unwrap();
        let before: Vec<(String, Vec<f64>)> = fresh
            .collect_params()
            .iter()
            .map(|p| (p.name.clone(), p.value.to_vec()))
            .collect();

        train(&cfg, &ModelConfig::tiny(), &dataset, dir.path()).unwrap();
        let mut trained = load_checkpoint(&dir.path().join("latest.ckpt"))
            .unwrap()
            .model;
        let after: Vec<(String, Vec<f64>)> = trained
            .collect_params()
            .iter()
            .map(|p| (p.name.clone(), p.value.to_vec()))
            .collect();

        for group in ["encoder.", "decoder.", "prior."] {
            let moved = before
                .iter()
                .zip(after.iter())
                .filter(|((name, _), _)| name.starts_with(group))
                .any(|((_, b), (_, a))| b != a);
            assert!(moved, "no parameter in group {group} changed");
        }
    }

    #[test]
    fn non_finite_objectives_abort_with_context() {
        let dataset = synthetic_dataset(43);
        let dir = tempfile::tempdir().unwrap();
        // Poison the input: a NaN in one clip's grid surfaces as a
        // non-finite loss in the very first epoch.
        let mut train_set = synthetic_samples(8, 50);
        train_set[3].grid[[0, 0]] = f32::NAN;
        let poisoned = Dataset::from_parts(train_set, dataset.val.clone(), Vec::new(), 0);
        let err = train(&quick_cfg(1), &ModelConfig::tiny(), &poisoned, dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 0"), "unhelpful abort message: {msg}");
        assert!(msg.contains("synthetic/"), "no clip ids in: {msg}");
    }

    #[test]
    fn test_split_stays_behind_its_guard() {
        let dataset = synthetic_dataset(44);
        assert!(dataset.split(Split::Train).is_ok());
        assert!(dataset.split(Split::Val).is_ok());
        let err = dataset.split(Split::Test).unwrap_err().to_string();
        assert!(err.contains("test_split_for_final_evaluation"));
        assert_eq!(dataset.test_split_for_final_evaluation().len(), 6);
    }

    #[test]
    fn checkpoint_hash_guard_refuses_mismatched_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = Model::new(ModelConfig::tiny(), 5).unwrap();
        save_checkpoint(&path, &mut model, None, 3, 0x1111).unwrap();
        assert!(load_checkpoint_verified(&path, 0x1111).is_ok());
        let err = match load_checkpoint_verified(&path, 0x2222) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("mismatched preprocessing hash was accepted"),
        };
        assert!(err.contains("refusing"));
    }

    #[test]
    fn evaluate_split_scores_an_untrained_model_sanely() {
        let dataset = synthetic_dataset(45);
        let model = Model::new(ModelConfig::tiny(), 6).unwrap();
        let (predicted, latents) = predict_split(&model, dataset.val(), 4).unwrap();
        assert_eq!(predicted.len(), 6);
        assert_eq!(latents.dim(), (6, 2));
        let distinct: std::collections::BTreeSet<usize> = predicted.iter().copied().collect();
        match evaluate_split(&model, dataset.val(), 4) {
            Ok((report, p, l)) => {
                assert!(distinct.len() >= 2);
                assert_eq!(p, predicted);
                assert_eq!(l, latents);
                assert!(report.accuracy_pct >= 0.0 && report.accuracy_pct <= 100.0);
                assert!(report.nmi >= 0.0 && report.nmi <= 1.0 + 1e-12);
            }
            // An untrained prior may funnel everything into one component;
            // the geometric metrics must then refuse rather than fabricate.
            Err(_) => assert_eq!(distinct.len(), 1),
        }
    }

    #[test]
    fn mean_reports_averages_fieldwise() {
        let a = MetricsReport {
            accuracy_pct: 80.0,
            nmi: 0.6,
            silhouette: 0.2,
            dbi: 1.5,
        };
        let b = MetricsReport {
            accuracy_pct: 90.0,
            nmi: 0.8,
            silhouette: 0.4,
            dbi: 2.5,
        };
        let mean = mean_reports(&[a, b]).unwrap();
        assert!((mean.accuracy_pct - 85.0).abs() < 1e-12);
        assert!((mean.nmi - 0.7).abs() < 1e-12);
        assert!((mean.silhouette - 0.3).abs() < 1e-12);
        assert!((mean.dbi - 2.0).abs() < 1e-12);
        assert!(mean_reports(&[]).is_none());
    }

    #[test]
    fn dataset_from_cache_round_trips_splits() {
        use crate::cache::CacheWriter;
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("spectrograms.bin");
        let samples = synthetic_samples(10, 60);
        let mut writer = CacheWriter::create(&cache_path, 16, 12, 0x77).unwrap();
        for s in &samples {
            writer.append(s).unwrap();
        }
        writer.finish().unwrap();

        let manifest = SplitManifest {
            train_ids: samples[0..6].iter().map(|s| s.clip_id.clone()).collect(),
            val_ids: samples[6..8].iter().map(|s| s.clip_id.clone()).collect(),
            test_ids: samples[8..10].iter().map(|s| s.clip_id.clone()).collect(),
            seed: 1,
        };
        let dataset = Dataset::from_cache(&cache_path, &manifest).unwrap();
        assert_eq!(dataset.train().len(), 6);
        assert_eq!(dataset.val().len(), 2);
        assert_eq!(dataset.test_split_for_final_evaluation().len(), 2);
        assert_eq!(dataset.dsp_hash, 0x77);

        // A manifest naming a missing clip is an error, not a short read.
        let mut bad = manifest.clone();
        bad.train_ids.push("synthetic/999".into());
        assert!(Dataset::from_cache(&cache_path, &bad).is_err());
    }
}
