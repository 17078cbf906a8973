//! The five pipeline commands. Each one is an ordinary function over a
//! validated `RunConfig`, so integration tests drive them directly and the
//! binary stays a thin argument-parsing shell.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array2;
use vaclust_core::baselines::{gmm_em_fit, kmeans_assign, kmeans_fit, GmmConfig, KMeansConfig};
use vaclust_core::cache::{self, CacheWriter};
use vaclust_core::dataio::{load_corpus, load_manifest, make_splits, save_manifest};
use vaclust_core::dsp::preprocess;
use vaclust_core::embed::{tsne, TsneConfig};
use vaclust_core::metrics;
use vaclust_core::trainer::{self, evaluate_split, load_checkpoint_verified, mean_reports};
use vaclust_core::{Dataset, DspConfig, MetricsReport, SpectrogramSample, Split, TrainOutcome};

use crate::config::RunConfig;
use crate::plot::{coordinates_tsv, scatter_svg};

/// What `prepare` did, for the summary line and for tests.
#[derive(Debug)]
pub struct PrepareSummary {
    pub clips: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Cache records carried over unchanged from a previous run.
    pub reused: usize,
    /// Clips preprocessed in this run (new or previously corrupt).
    pub regenerated: usize,
    /// Unreadable records dropped from the previous cache.
    pub corrupt_dropped: usize,
    pub manifest_path: PathBuf,
    pub cache_path: PathBuf,
}

/// Scan the corpus, fix the splits, and fill the spectrogram cache.
/// Re-running is incremental: intact cache records are kept, corrupt or
/// missing ones are rebuilt, and a fully up-to-date cache is a no-op.
pub fn cmd_prepare(cfg: &RunConfig, corpus_dir: &Path) -> Result<PrepareSummary> {
    // The front end's geometry and windowing are fixed; a cache stamped
    // with a different configuration than the code actually runs would
    // poison every downstream hash check.
    anyhow::ensure!(
        cfg.dsp == DspConfig::default(),
        "prepare always runs the standard front end; custom [dsp] sections \
         are only honored by synthetic-cache workflows"
    );
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create {}", cfg.out_dir.display()))?;

    let clips = load_corpus(corpus_dir)?;
    let manifest_path = cfg.manifest_path();
    let cache_path = cfg.cache_path();

    // Reuse the existing manifest when it covers exactly this corpus with
    // this seed; anything else is regenerated (and overwritten).
    let manifest = match load_manifest(&manifest_path) {
        Ok(existing)
            if existing.seed == cfg.seed && {
                let mut have: Vec<&str> = [Split::Train, Split::Val, Split::Test]
                    .iter()
                    .flat_map(|&s| existing.ids(s))
                    .map(String::as_str)
                    .collect();
                let mut want: Vec<&str> = clips.iter().map(|c| c.id.as_str()).collect();
                have.sort_unstable();
                want.sort_unstable();
                have == want
            } =>
        {
            existing
        }
        _ => {
            let fresh = make_splits(&clips, cfg.seed)?;
            save_manifest(&manifest_path, &fresh)?;
            fresh
        }
    };

    let dsp_hash = cfg.dsp.content_hash();
    let mut kept: HashMap<String, SpectrogramSample> = HashMap::new();
    let mut corrupt_dropped = 0usize;
    if cache_path.exists() {
        if let Ok((header, samples, corrupt)) = cache::read_all(&cache_path) {
            if header.dsp_hash == dsp_hash
                && header.freq_bins as usize == cfg.dsp.freq_bins
                && header.frames as usize == cfg.dsp.frames
            {
                corrupt_dropped = corrupt;
                for s in samples {
                    kept.entry(s.clip_id.clone()).or_insert(s);
                }
            }
            // A cache from a different front end is rebuilt wholesale.
        }
    }

    let missing = clips.iter().filter(|c| !kept.contains_key(&c.id)).count();
    let mut reused = 0usize;
    let mut regenerated = 0usize;
    if missing == 0 && corrupt_dropped == 0 && kept.len() == clips.len() {
        reused = clips.len();
    } else {
        // Rewrite atomically: carry intact records over, preprocess the rest.
        let tmp = cache_path.with_extension("bin.tmp");
        let mut writer = CacheWriter::create(
            &tmp,
            cfg.dsp.freq_bins as u32,
            cfg.dsp.frames as u32,
            dsp_hash,
        )?;
        for clip in &clips {
            if let Some(sample) = kept.get(&clip.id) {
                writer.append(sample)?;
                reused += 1;
            } else {
                let sample = preprocess(clip)
                    .with_context(|| format!("preprocessing {} failed", clip.id))?;
                writer.append(&sample)?;
                regenerated += 1;
            }
        }
        writer.finish()?;
        fs::rename(&tmp, &cache_path)
            .with_context(|| format!("cannot move cache into place at {}", cache_path.display()))?;
    }

    Ok(PrepareSummary {
        clips: clips.len(),
        train: manifest.ids(Split::Train).len(),
        val: manifest.ids(Split::Val).len(),
        test: manifest.ids(Split::Test).len(),
        reused,
        regenerated,
        corrupt_dropped,
        manifest_path,
        cache_path,
    })
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = load_manifest(&cfg.manifest_path())
        .with_context(|| "no manifest found; run `vaclust prepare` first")?;
    let dataset = Dataset::from_cache(&cfg.cache_path(), &manifest)
        .with_context(|| "cannot load the spectrogram cache; run `vaclust prepare` first")?;
    anyhow::ensure!(
        dataset.dsp_hash == cfg.dsp.content_hash(),
        "the cache was built by a different front-end configuration; \
         refusing to mix them (re-run `vaclust prepare`)"
    );
    Ok(dataset)
}

/// Split access for evaluation-style commands. Training itself can never
/// reach the held-out split; these read it through the explicit
/// final-evaluation accessor instead.
fn split_samples(dataset: &Dataset, split: Split) -> &[SpectrogramSample] {
    match split {
        Split::Test => dataset.test_split_for_final_evaluation(),
        other => dataset
            .split(other)
            .expect("train and validation splits are always readable"),
    }
}

/// Row-per-sample view of the raw grids, the feature space for baselines
/// and for the labels-as-clusters reference row.
fn flattened_spectrograms(samples: &[SpectrogramSample]) -> Array2<f64> {
    let n = samples.len();
    let d = if n == 0 { 0 } else { samples[0].grid.len() };
    let mut out = Array2::<f64>::zeros((n, d));
    for (i, s) in samples.iter().enumerate() {
        for (j, &v) in s.grid.iter().enumerate() {
            out[[i, j]] = v as f64;
        }
    }
    out
}

fn truth_labels(samples: &[SpectrogramSample]) -> Vec<usize> {
    samples.iter().map(|s| s.digit as usize).collect()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("cannot serialize report")?;
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// One multi-run training result.
#[derive(Debug)]
pub struct TrainSummary {
    pub outcomes: Vec<TrainOutcome>,
    /// Mean test-set metrics across runs; only present when `runs > 1`.
    pub mean_metrics: Option<MetricsReport>,
    pub mean_metrics_path: Option<PathBuf>,
}

/// Train once under `out_dir`, or — with `runs > 1` — repeat under
/// `out_dir/run-<i>` with seeds `seed..seed+runs`, evaluate each best
/// checkpoint on the held-out split, and report the mean metrics.
pub fn cmd_train(cfg: &RunConfig, runs: u32) -> Result<TrainSummary> {
    anyhow::ensure!(runs >= 1, "--runs must be at least 1");
    let dataset = open_dataset(cfg)?;

    if runs == 1 {
        let outcome = trainer::train(&cfg.train, &cfg.model, &dataset, &cfg.out_dir)?;
        return Ok(TrainSummary {
            outcomes: vec![outcome],
            mean_metrics: None,
            mean_metrics_path: None,
        });
    }

    let mut outcomes = Vec::new();
    let mut reports = Vec::new();
    for r in 0..runs {
        let mut run_cfg = cfg.train.clone();
        run_cfg.seed = cfg.seed + r as u64;
        let run_dir = cfg.out_dir.join(format!("run-{r}"));
        let outcome = trainer::train(&run_cfg, &cfg.model, &dataset, &run_dir)?;
        let ckpt = load_checkpoint_verified(&outcome.best_path, dataset.dsp_hash)?;
        let (report, _, _) = evaluate_split(
            &ckpt.model,
            dataset.test_split_for_final_evaluation(),
            cfg.train.batch_size,
        )?;
        outcomes.push(outcome);
        reports.push(report);
    }
    let mean = mean_reports(&reports).expect("runs >= 1 so the mean exists");
    let path = cfg.out_dir.join("multi-run-metrics.json");
    #[derive(serde::Serialize)]
    struct MultiRun<'a> {
        runs: &'a [MetricsReport],
        mean: &'a MetricsReport,
    }
    write_json(
        &path,
        &MultiRun {
            runs: &reports,
            mean: &mean,
        },
    )?;
    Ok(TrainSummary {
        outcomes,
        mean_metrics: Some(mean),
        mean_metrics_path: Some(path),
    })
}

/// Score a checkpoint (or the truth labels) on one split; the report goes
/// to stdout and to a JSON file under `out_dir`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: Split,
    use_labels: bool,
) -> Result<(MetricsReport, PathBuf)> {
    let dataset = open_dataset(cfg)?;
    let samples = split_samples(&dataset, split);

    let (report, suffix) = if use_labels {
        // Reference row: the annotation itself as the clustering, scored on
        // the raw spectrogram geometry.
        let truth = truth_labels(samples);
        let features = flattened_spectrograms(samples);
        (
            metrics::evaluate(features.view(), &truth, &truth)?,
            "-labels",
        )
    } else {
        let default_path = cfg.default_checkpoint_path();
        let path = checkpoint.unwrap_or(&default_path);
        anyhow::ensure!(
            path.exists(),
            "no checkpoint at {}; train first or pass --checkpoint",
            path.display()
        );
        let ckpt = load_checkpoint_verified(path, dataset.dsp_hash)?;
        let (report, _, _) = evaluate_split(&ckpt.model, samples, cfg.train.batch_size).context(
            "scoring failed; if the model collapsed to a single cluster, train longer or reseed",
        )?;
        (report, "")
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let out_path = cfg
        .out_dir
        .join(format!("eval-{}{}.json", split.name(), suffix));
    write_json(&out_path, &report)?;
    Ok((report, out_path))
}

/// Which classical baseline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    KMeans,
    GmmEm,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::KMeans => "kmeans",
            BaselineMethod::GmmEm => "gmm-em",
        }
    }
}

/// Cluster the flattened spectrograms of a split with a classical method,
/// repeated over `runs` seeds, and report per-run and mean metrics.
pub fn cmd_baseline(
    cfg: &RunConfig,
    method: BaselineMethod,
    split: Split,
    runs: u32,
) -> Result<(Vec<MetricsReport>, MetricsReport, PathBuf)> {
    anyhow::ensure!(runs >= 1, "--runs must be at least 1");
    let dataset = open_dataset(cfg)?;
    let samples = split_samples(&dataset, split);
    let features = flattened_spectrograms(samples);
    let truth = truth_labels(samples);
    let k = cfg.model.n_components;

    let mut reports = Vec::with_capacity(runs as usize);
    for r in 0..runs {
        let seed = cfg.seed + r as u64;
        let pred = match method {
            BaselineMethod::KMeans => {
                let fit = kmeans_fit(features.view(), &KMeansConfig::new(k, seed))?;
                kmeans_assign(fit.centroids.view(), features.view())
            }
            BaselineMethod::GmmEm => {
                let fit = gmm_em_fit(features.view(), &GmmConfig::new(k, seed))?;
                fit.predict(features.view())
            }
        };
        reports.push(metrics::evaluate(features.view(), &pred, &truth)?);
    }
    let mean = mean_reports(&reports).expect("runs >= 1 so the mean exists");

    fs::create_dir_all(&cfg.out_dir)?;
    let out_path = cfg
        .out_dir
        .join(format!("baseline-{}-{}.json", method.name(), split.name()));
    #[derive(serde::Serialize)]
    struct BaselineOut<'a> {
        method: &'a str,
        split: &'a str,
        first_seed: u64,
        runs: &'a [MetricsReport],
        mean: &'a MetricsReport,
    }
    write_json(
        &out_path,
        &BaselineOut {
            method: method.name(),
            split: split.name(),
            first_seed: cfg.seed,
            runs: &reports,
            mean: &mean,
        },
    )?;
    Ok((reports, mean, out_path))
}

/// Artifacts produced by `plot`.
#[derive(Debug)]
pub struct PlotPaths {
    pub image: PathBuf,
    pub coordinates: PathBuf,
    pub points: usize,
    pub clusters: usize,
}

/// Embed a split in 2-D and render it. With a checkpoint the features are
/// the latent means and the colors the model's clusters; without one the
/// raw spectrograms are embedded and colored by the spoken digit. Passing
/// `color_by_truth` keeps checkpoint features but colors by digit.
pub fn cmd_plot(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: Split,
    color_by_truth: bool,
    perplexity: Option<f64>,
) -> Result<PlotPaths> {
    let dataset = open_dataset(cfg)?;
    let samples = split_samples(&dataset, split);
    let ids: Vec<String> = samples.iter().map(|s| s.clip_id.clone()).collect();

    let default_path = cfg.default_checkpoint_path();
    let ckpt_path = match checkpoint {
        Some(p) => {
            anyhow::ensure!(p.exists(), "no checkpoint at {}", p.display());
            Some(p.to_path_buf())
        }
        None if default_path.exists() => Some(default_path),
        None => None,
    };

    let (features, clusters, source) = match &ckpt_path {
        Some(path) => {
            let ckpt = load_checkpoint_verified(path, dataset.dsp_hash)?;
            let (_, predicted, latents) =
                evaluate_split(&ckpt.model, samples, cfg.train.batch_size)?;
            let colors = if color_by_truth {
                truth_labels(samples)
            } else {
                predicted
            };
            (latents, colors, "latent means")
        }
        None => (
            flattened_spectrograms(samples),
            truth_labels(samples),
            "spectrograms",
        ),
    };

    let mut tsne_cfg = TsneConfig {
        seed: cfg.seed,
        ..TsneConfig::default()
    };
    if let Some(p) = perplexity {
        tsne_cfg.perplexity = p;
    }
    let embedding = tsne(features.view(), &tsne_cfg)?;
    let points: Vec<(f64, f64)> = (0..embedding.nrows())
        .map(|i| (embedding[[i, 0]], embedding[[i, 1]]))
        .collect();

    fs::create_dir_all(&cfg.out_dir)?;
    let image = cfg.out_dir.join(format!("plot-{}.svg", split.name()));
    let coordinates = cfg
        .out_dir
        .join(format!("plot-{}-coords.tsv", split.name()));
    let colored_by = if color_by_truth || ckpt_path.is_none() {
        "digit"
    } else {
        "cluster"
    };
    let title = format!("{} split, {} ({} colors)", split.name(), source, colored_by);
    scatter_svg(&image, &points, &clusters, &title)?;
    coordinates_tsv(&coordinates, &ids, &points, &clusters)?;

    let mut distinct = clusters.clone();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(PlotPaths {
        image,
        coordinates,
        points: points.len(),
        clusters: distinct.len(),
    })
}
