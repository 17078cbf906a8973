//! Clustering quality measures.
//!
//! Cluster labels are arbitrary `usize` values; every measure first compacts
//! the distinct values it actually sees, so callers never need contiguous
//! label ranges. External measures (accuracy via optimal assignment, NMI)
//! compare predictions against reference labels; internal measures
//! (silhouette, Davies-Bouldin) judge geometry alone.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Map arbitrary label values onto 0..k, preserving value order.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in labels {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| map[l]).collect(), map.len())
}

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::InvalidArg("label lists must be non-empty".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::InvalidArg(format!(
            "label lists differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Joint count table: entry `(i, j)` is how many samples carry compacted
/// predicted label `i` and compacted reference label `j`.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Array2<u64>> {
    check_pair(pred, truth)?;
    let (p, kp) = compact(pred);
    let (t, kt) = compact(truth);
    let mut table = Array2::<u64>::zeros((kp, kt));
    for (&i, &j) in p.iter().zip(t.iter()) {
        table[[i, j]] += 1;
    }
    Ok(table)
}

/// Minimum-cost perfect assignment on a square cost matrix via the
/// shortest-augmenting-path method with potentials, O(n^3).
///
/// Returns `assignment` with `assignment[row] = column` and the total cost.
pub fn hungarian(cost: ArrayView2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if n == 0 || cost.ncols() != n {
        return Err(Error::InvalidArg(format!(
            "cost matrix must be square and non-empty, got {}x{}",
            n,
            cost.ncols()
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix entry".into()));
    }

    // 1-based arrays; p[j] is the row matched to column j (0 = free).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path back, flipping matches.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[[i, assignment[i]]]).sum();
    Ok((assignment, total))
}

/// Clustering accuracy as a fraction in `[0, 1]`: the best one-to-one
/// matching of predicted clusters to reference classes (extra clusters on
/// either side match nothing) and the fraction of samples it explains.
pub fn unsupervised_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let (kp, kt) = table.dim();
    let n = kp.max(kt);
    // Pad to square and negate so minimum cost means maximum matched count.
    let mut cost = Array2::<f64>::zeros((n, n));
    for i in 0..kp {
        for j in 0..kt {
            cost[[i, j]] = -(table[[i, j]] as f64);
        }
    }
    let (_, total) = hungarian(cost.view())?;
    Ok(-total / pred.len() as f64)
}

/// How mutual information is scaled into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NmiNormalization {
    /// Divide by the arithmetic mean of the two entropies (the default).
    Arithmetic,
    /// Divide by the geometric mean of the two entropies.
    Geometric,
}

/// Normalized mutual information with arithmetic-mean scaling.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_normalized(pred, truth, NmiNormalization::Arithmetic)
}

pub fn nmi_normalized(pred: &[usize], truth: &[usize], norm: NmiNormalization) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let rows: Vec<f64> = table
        .rows()
        .into_iter()
        .map(|r| r.iter().sum::<u64>() as f64)
        .collect();
    let cols: Vec<f64> = table
        .columns()
        .into_iter()
        .map(|c| c.iter().sum::<u64>() as f64)
        .collect();

    let entropy = |margin: &[f64]| -> f64 {
        margin
            .iter()
            .filter(|&&m| m > 0.0)
            .map(|&m| {
                let p = m / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_pred = entropy(&rows);
    let h_truth = entropy(&cols);

    let mut mi = 0.0;
    for (i, &ri) in rows.iter().enumerate() {
        for (j, &cj) in cols.iter().enumerate() {
            let nij = table[[i, j]] as f64;
            if nij > 0.0 {
                mi += (nij / n) * ((nij * n) / (ri * cj)).ln();
            }
        }
    }

    let denom = match norm {
        NmiNormalization::Arithmetic => 0.5 * (h_pred + h_truth),
        NmiNormalization::Geometric => (h_pred * h_truth).sqrt(),
    };
    if denom == 0.0 {
        // Both partitions put everything in one cluster: identical, hence 1.
        // One-sided degeneracy has zero mutual information, hence 0.
        return Ok(if h_pred == 0.0 && h_truth == 0.0 {
            1.0
        } else {
            0.0
        });
    }
    // Guard against tiny negative values from float cancellation.
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_features(data: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if data.nrows() != labels.len() {
        return Err(Error::InvalidArg(format!(
            "{} feature rows but {} labels",
            data.nrows(),
            labels.len()
        )));
    }
    if data.nrows() == 0 {
        return Err(Error::InvalidArg("no samples".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix entry".into()));
    }
    Ok(())
}

/// Mean silhouette coefficient over all samples, in `[-1, 1]`.
///
/// For each sample, `a` is its mean distance to the rest of its own cluster
/// and `b` the smallest mean distance to any other cluster; its score is
/// `(b - a) / max(a, b)`. Samples in singleton clusters score 0, as does a
/// sample whose `a` and `b` are both exactly 0. Fewer than two clusters
/// overall is an error: there is no "other cluster" to compare against.
pub fn silhouette(data: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_features(data, labels)?;
    let (lab, k) = compact(labels);
    if k < 2 {
        return Err(Error::InvalidArg(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let n = data.nrows();
    let sizes = {
        let mut s = vec![0usize; k];
        for &l in &lab {
            s[l] += 1;
        }
        s
    };

    let mut total = 0.0;
    // Per-sample accumulator of summed distance to each cluster.
    let mut acc = vec![0.0f64; k];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let row_i = data.row(i);
        for j in 0..n {
            if j != i {
                acc[lab[j]] +=
                    euclidean(row_i.as_slice().unwrap(), data.row(j).as_slice().unwrap());
            }
        }
        let own = lab[i];
        if sizes[own] == 1 {
            continue; // singleton scores 0
        }
        let a = acc[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| acc[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Davies-Bouldin index: for each cluster, the worst ratio of summed
/// within-cluster scatter to centroid separation, averaged over clusters.
/// Lower is better. Coincident centroids make that pair's ratio `+inf`,
/// reported with a warning; fewer than two clusters is an error.
pub fn davies_bouldin(data: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_features(data, labels)?;
    let (lab, k) = compact(labels);
    if k < 2 {
        return Err(Error::InvalidArg(
            "the Davies-Bouldin index needs at least two clusters".into(),
        ));
    }
    let d = data.ncols();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let mut sizes = vec![0usize; k];
    for (i, &l) in lab.iter().enumerate() {
        sizes[l] += 1;
        for j in 0..d {
            centroids[[l, j]] += data[[i, j]];
        }
    }
    for c in 0..k {
        for j in 0..d {
            centroids[[c, j]] /= sizes[c] as f64;
        }
    }
    // Mean distance of members to their centroid.
    let mut scatter = vec![0.0f64; k];
    for (i, &l) in lab.iter().enumerate() {
        scatter[l] += euclidean(
            data.row(i).as_slice().unwrap(),
            centroids.row(l).as_slice().unwrap(),
        );
    }
    for c in 0..k {
        scatter[c] /= sizes[c] as f64;
    }

    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep = euclidean(
                centroids.row(i).as_slice().unwrap(),
                centroids.row(j).as_slice().unwrap(),
            );
            if sep == 0.0 {
                log::warn!("coincident centroids make the Davies-Bouldin index +inf");
                return Ok(f64::INFINITY);
            }
            worst = worst.max((scatter[i] + scatter[j]) / sep);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// The four headline numbers reported for any clustering result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Optimal-assignment accuracy in percent.
    pub accuracy_pct: f64,
    pub nmi: f64,
    pub silhouette: f64,
    pub dbi: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        // Serialization of this struct cannot fail.
        serde_json::to_string_pretty(self).expect("metrics report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("metrics report: {e}")))
    }
}

/// All four measures in one pass: external ones against `truth`, internal
/// ones on `features` (typically latent means or flattened spectrograms).
pub fn evaluate(
    features: ArrayView2<f64>,
    pred: &[usize],
    truth: &[usize],
) -> Result<MetricsReport> {
    check_pair(pred, truth)?;
    Ok(MetricsReport {
        accuracy_pct: 100.0 * unsupervised_accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        silhouette: silhouette(features, pred)?,
        dbi: davies_bouldin(features, pred)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Brute-force minimum assignment by enumerating all permutations.
    fn brute_force(cost: &Array2<f64>) -> f64 {
        fn rec(cost: &Array2<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
            if row == cost.nrows() {
                *best = best.min(acc);
                return;
            }
            for col in 0..cost.ncols() {
                if !used[col] {
                    used[col] = true;
                    rec(cost, row + 1, used, acc + cost[[row, col]], best);
                    used[col] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_hand_case() {
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let (assignment, total) = hungarian(cost.view()).unwrap();
        // Row 0 takes the cheap column 1; row 1 falls back to column 0;
        // row 2 keeps column 2: 1 + 2 + 2 = 5, the enumerated optimum.
        assert_eq!(assignment, vec![1, 0, 2]);
        assert_eq!(total, 5.0);
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for n in 2..=7usize {
            for _ in 0..1000 {
                let cost = Array2::from_shape_fn((n, n), |_| rng.random_range(-10.0..10.0f64));
                let (assignment, total) = hungarian(cost.view()).unwrap();
                // The assignment must be a permutation...
                let mut seen = vec![false; n];
                for &c in &assignment {
                    assert!(!seen[c]);
                    seen[c] = true;
                }
                // ...whose cost the reported total matches and which achieves
                // the enumerated optimum.
                let direct: f64 = (0..n).map(|i| cost[[i, assignment[i]]]).sum();
                assert!((direct - total).abs() < 1e-9);
                assert!((total - brute_force(&cost)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hungarian_rejects_bad_input() {
        assert!(hungarian(Array2::<f64>::zeros((0, 0)).view()).is_err());
        assert!(hungarian(Array2::<f64>::zeros((2, 3)).view()).is_err());
        let nan = array![[0.0, f64::NAN], [1.0, 2.0]];
        assert!(hungarian(nan.view()).is_err());
    }

    #[test]
    fn accuracy_hand_case_with_extra_cluster() {
        // Three predicted clusters against two classes: cluster 0 matches
        // class 1 (2 samples), cluster 1 matches class 0 (2 samples), and
        // cluster 2's single sample is stranded: 4 of 5 explained.
        let pred = [0, 0, 1, 1, 2];
        let truth = [1, 1, 0, 0, 0];
        let acc = unsupervised_accuracy(&pred, &truth).unwrap();
        assert!((acc - 0.8).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_invariant_to_label_permutation() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        let pred = [5, 5, 9, 9, 1, 1, 1]; // a pure relabeling
        assert!((unsupervised_accuracy(&pred, &truth).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_hand_case() {
        // pred = [0,0,0,1], truth = [0,0,1,1]. Written out from the
        // definition with natural logs:
        //   H(pred)  = -(3/4 ln 3/4 + 1/4 ln 1/4)
        //   H(truth) = ln 2
        //   I = 1/2 ln(4/3) + 1/4 ln(2/3) + 1/4 ln 2
        let pred = [0, 0, 0, 1];
        let truth = [0, 0, 1, 1];
        let h_p = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let h_t = 2.0f64.ln();
        let mi = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2.0f64.ln();
        let expected = mi / (0.5 * (h_p + h_t));
        assert!((nmi(&pred, &truth).unwrap() - expected).abs() < 1e-12);
        let expected_geo = mi / (h_p * h_t).sqrt();
        let got_geo = nmi_normalized(&pred, &truth, NmiNormalization::Geometric).unwrap();
        assert!((got_geo - expected_geo).abs() < 1e-12);
    }

    #[test]
    fn nmi_perfect_and_independent() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&[7, 7, 3, 3, 0, 0], &truth).unwrap() - 1.0).abs() < 1e-12);
        // Exactly independent partitions: every contingency cell equals
        // row_sum * col_sum / n (here 3 * 2 / 6 = 1), so each MI term is
        // ln(1) and the mutual information vanishes identically.
        let pred = [0, 1, 0, 1, 0, 1];
        assert!(nmi(&pred, &truth).unwrap() < 1e-9);
    }

    #[test]
    fn nmi_degenerate_cases() {
        // Both single-cluster partitions are identical.
        assert_eq!(nmi(&[0, 0, 0], &[5, 5, 5]).unwrap(), 1.0);
        // One-sided degeneracy shares no information.
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_hand_case() {
        // Two tight pairs far apart on a line. Worked by hand:
        // sample 0: a = 1, b = (10+11)/2 -> s = 9.5/10.5; sample 1 mirrors
        // with b = 9.5 -> s = 8.5/9.5; the far pair is symmetric.
        let data = array![[0.0], [1.0], [10.0], [11.0]];
        let labels = [0, 0, 1, 1];
        let expected = 0.5 * (9.5 / 10.5 + 8.5 / 9.5);
        assert!((silhouette(data.view(), &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn silhouette_edge_cases() {
        let data = array![[0.0], [1.0], [5.0]];
        // Singleton cluster scores 0 for its member.
        let s = silhouette(data.view(), &[0, 0, 1]).unwrap();
        assert!(s.is_finite());
        // A single cluster overall has no "other cluster" to compare with.
        assert!(silhouette(data.view(), &[3, 3, 3]).is_err());
        assert!(davies_bouldin(data.view(), &[3, 3, 3]).is_err());
        // Identical points: a = b = 0 scores 0.
        let same = array![[1.0], [1.0], [1.0], [1.0]];
        assert_eq!(silhouette(same.view(), &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn davies_bouldin_hand_case() {
        // Centroids 0.5 and 10.5, scatters 0.5 each, separation 10:
        // both clusters' worst ratio is 1/10.
        let data = array![[0.0], [1.0], [10.0], [11.0]];
        let dbi = davies_bouldin(data.view(), &[0, 0, 1, 1]).unwrap();
        assert!((dbi - 0.1).abs() < 1e-12);
    }

    #[test]
    fn davies_bouldin_coincident_centroids() {
        let data = array![[0.0], [2.0], [1.0], [1.0]];
        // Clusters {0,2} and {1,1} share the centroid 1.
        let dbi = davies_bouldin(data.view(), &[0, 0, 1, 1]).unwrap();
        assert!(dbi.is_infinite());
    }

    /// Straightforward transliterations of the definitions, kept separate
    /// from the production code paths, as oracles for random instances.
    mod oracle {
        use super::super::compact;
        use ndarray::ArrayView2;

        pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
            let (p, kp) = compact(pred);
            let (t, kt) = compact(truth);
            let k = kp.max(kt);
            let mut counts = vec![vec![0u64; k]; k];
            for (&a, &b) in p.iter().zip(t.iter()) {
                counts[a][b] += 1;
            }
            // Enumerate all mappings of predicted clusters to classes.
            fn rec(counts: &[Vec<u64>], row: usize, used: &mut [bool], acc: u64, best: &mut u64) {
                if row == counts.len() {
                    *best = (*best).max(acc);
                    return;
                }
                for col in 0..counts.len() {
                    if !used[col] {
                        used[col] = true;
                        rec(counts, row + 1, used, acc + counts[row][col], best);
                        used[col] = false;
                    }
                }
            }
            let mut best = 0u64;
            rec(&counts, 0, &mut vec![false; k], 0, &mut best);
            best as f64 / pred.len() as f64
        }

        pub fn nmi_arith(pred: &[usize], truth: &[usize]) -> f64 {
            let (p, kp) = compact(pred);
            let (t, kt) = compact(truth);
            let n = pred.len() as f64;
            let mut joint = vec![vec![0.0f64; kt]; kp];
            for (&a, &b) in p.iter().zip(t.iter()) {
                joint[a][b] += 1.0 / n;
            }
            let pu: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
            let pv: Vec<f64> = (0..kt).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
            let h =
                |ps: &[f64]| -> f64 { ps.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum() };
            let mut mi = 0.0;
            for i in 0..kp {
                for j in 0..kt {
                    if joint[i][j] > 0.0 {
                        mi += joint[i][j] * (joint[i][j] / (pu[i] * pv[j])).ln();
                    }
                }
            }
            let denom = 0.5 * (h(&pu) + h(&pv));
            if denom == 0.0 {
                if h(&pu) == 0.0 && h(&pv) == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (mi / denom).clamp(0.0, 1.0)
            }
        }

        pub fn silhouette(data: ArrayView2<f64>, labels: &[usize]) -> f64 {
            let n = data.nrows();
            let dist = |i: usize, j: usize| -> f64 {
                data.row(i)
                    .iter()
                    .zip(data.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            };
            let (lab, k) = compact(labels);
            if k < 2 {
                return 0.0;
            }
            let mut total = 0.0;
            for i in 0..n {
                let own: Vec<usize> = (0..n).filter(|&j| j != i && lab[j] == lab[i]).collect();
                if own.is_empty() {
                    continue;
                }
                let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
                let mut b = f64::INFINITY;
                for c in 0..k {
                    if c == lab[i] {
                        continue;
                    }
                    let members: Vec<usize> = (0..n).filter(|&j| lab[j] == c).collect();
                    if !members.is_empty() {
                        let m =
                            members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64;
                        b = b.min(m);
                    }
                }
                if a.max(b) > 0.0 {
                    total += (b - a) / a.max(b);
                }
            }
            total / n as f64
        }

        pub fn dbi(data: ArrayView2<f64>, labels: &[usize]) -> f64 {
            let (lab, k) = compact(labels);
            if k < 2 {
                return f64::INFINITY;
            }
            let d = data.ncols();
            let mut cent = vec![vec![0.0f64; d]; k];
            let mut sizes = vec![0usize; k];
            for (i, &l) in lab.iter().enumerate() {
                sizes[l] += 1;
                for j in 0..d {
                    cent[l][j] += data[[i, j]];
                }
            }
            for c in 0..k {
                for j in 0..d {
                    cent[c][j] /= sizes[c] as f64;
                }
            }
            let dist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            let mut s = vec![0.0f64; k];
            for (i, &l) in lab.iter().enumerate() {
                s[l] += dist(data.row(i).as_slice().unwrap(), &cent[l]);
            }
            for c in 0..k {
                s[c] /= sizes[c] as f64;
            }
            let mut total = 0.0;
            for i in 0..k {
                let mut worst = 0.0f64;
                for j in 0..k {
                    if i != j {
                        let sep = dist(&cent[i], &cent[j]);
                        if sep == 0.0 {
                            return f64::INFINITY;
                        }
                        worst = worst.max((s[i] + s[j]) / sep);
                    }
                }
                total += worst;
            }
            total / k as f64
        }
    }

    #[test]
    fn external_measures_match_oracles_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(5..40usize);
            let kp = rng.random_range(1..6usize);
            let kt = rng.random_range(1..6usize);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
            let acc = unsupervised_accuracy(&pred, &truth).unwrap();
            assert!((acc - oracle::accuracy(&pred, &truth)).abs() < 1e-9);
            let got = nmi(&pred, &truth).unwrap();
            assert!((got - oracle::nmi_arith(&pred, &truth)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&acc));
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn internal_measures_match_oracles_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.random_range(6..30usize);
            let d = rng.random_range(1..5usize);
            let k = rng.random_range(2..5usize);
            let data = Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0f64));
            // Guarantee every cluster is non-empty.
            let labels: Vec<usize> = (0..n)
                .map(|i| if i < k { i } else { rng.random_range(0..k) })
                .collect();
            let s = silhouette(data.view(), &labels).unwrap();
            assert!((s - oracle::silhouette(data.view(), &labels)).abs() < 1e-9);
            assert!((-1.0..=1.0).contains(&s));
            let got = davies_bouldin(data.view(), &labels).unwrap();
            let want = oracle::dbi(data.view(), &labels);
            if want.is_finite() {
                assert!((got - want).abs() < 1e-9);
            } else {
                assert!(got.is_infinite());
            }
        }
    }

    #[test]
    fn nmi_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(5..30usize);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4usize)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..4usize)).collect();
            let ab = nmi(&a, &b).unwrap();
            let ba = nmi(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn report_serializes_round_trip() {
        let r = MetricsReport {
            accuracy_pct: 61.25,
            nmi: 0.72,
            silhouette: 0.33,
            dbi: 1.4,
        };
        let back = MetricsReport::from_json(&r.to_json()).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn evaluate_combines_all_measures() {
        let data = array![[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
        let pred = [0, 0, 1, 1];
        let truth = [1, 1, 0, 0];
        let report = evaluate(data.view(), &pred, &truth).unwrap();
        assert!((report.accuracy_pct - 100.0).abs() < 1e-9);
        assert!((report.nmi - 1.0).abs() < 1e-9);
        assert!(report.silhouette > 0.9);
        assert!(report.dbi < 0.1);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(unsupervised_accuracy(&[0, 1], &[0]).is_err());
        assert!(nmi(&[], &[]).is_err());
        let data = array![[0.0], [1.0]];
        assert!(silhouette(data.view(), &[0]).is_err());
    }
}
