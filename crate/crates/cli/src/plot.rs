//! Scatter-plot rendering for 2-D embeddings: a self-contained SVG with one
//! color per cluster and a legend, plus a tab-separated coordinates file so
//! the numbers behind the picture stay inspectable.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

/// Distinguishable fill colors; clusters beyond the palette wrap around.
const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#1170aa", "#a3acb9",
];

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 620.0;
const MARGIN_LEFT: f64 = 55.0;
const MARGIN_TOP: f64 = 50.0;
const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 520.0;

fn esc(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes an SVG scatter of `points`, colored by `clusters`.
pub fn scatter_svg(
    path: &Path,
    points: &[(f64, f64)],
    clusters: &[usize],
    title: &str,
) -> Result<()> {
    anyhow::ensure!(
        points.len() == clusters.len(),
        "{} points but {} cluster ids",
        points.len(),
        clusters.len()
    );
    anyhow::ensure!(!points.is_empty(), "nothing to plot");

    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    // Pad the data box; degenerate (single-blob) extents still render.
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);
    let pad_x = 0.05 * span_x;
    let pad_y = 0.05 * span_y;
    let (lo_x, hi_x) = (min_x - pad_x, max_x + pad_x);
    let (lo_y, hi_y) = (min_y - pad_y, max_y + pad_y);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let px = MARGIN_LEFT + (x - lo_x) / (hi_x - lo_x) * PLOT_W;
        // SVG y grows downward; flip so larger y plots higher.
        let py = MARGIN_TOP + (hi_y - y) / (hi_y - lo_y) * PLOT_H;
        (px, py)
    };

    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"30\" font-family=\"sans-serif\" font-size=\"18\" \
         text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + PLOT_W / 2.0,
        esc(title)
    ));
    svg.push_str(&format!(
        "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         fill=\"none\" stroke=\"#888\" stroke-width=\"1\"/>\n"
    ));

    for (&(x, y), &c) in points.iter().zip(clusters.iter()) {
        let (px, py) = to_px(x, y);
        let color = PALETTE[c % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3.5\" fill=\"{color}\" \
             fill-opacity=\"0.75\"/>\n"
        ));
    }

    // Legend: one swatch per cluster id, with its population.
    let legend_x = MARGIN_LEFT + PLOT_W + 20.0;
    for (row, &c) in ids.iter().enumerate() {
        let y = MARGIN_TOP + 10.0 + 22.0 * row as f64;
        let color = PALETTE[c % PALETTE.len()];
        let count = clusters.iter().filter(|&&v| v == c).count();
        svg.push_str(&format!(
            "<circle cx=\"{legend_x}\" cy=\"{y:.2}\" r=\"5\" fill=\"{color}\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\">\
             cluster {c} ({count})</text>\n",
            legend_x + 12.0,
            y + 4.0
        ));
    }
    svg.push_str("</svg>\n");

    fs::write(path, svg).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Writes the embedding as `clip_id<TAB>x<TAB>y<TAB>cluster` rows.
pub fn coordinates_tsv(
    path: &Path,
    ids: &[String],
    points: &[(f64, f64)],
    clusters: &[usize],
) -> Result<()> {
    anyhow::ensure!(
        ids.len() == points.len() && points.len() == clusters.len(),
        "inconsistent column lengths"
    );
    let mut out = String::from("clip_id\tx\ty\tcluster\n");
    for ((id, &(x, y)), &c) in ids.iter().zip(points.iter()).zip(clusters.iter()) {
        out.push_str(&format!("{id}\t{x:.6e}\t{y:.6e}\t{c}\n"));
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_contains_every_cluster_in_the_legend() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.svg");
        let points = vec![(0.0, 0.0), (1.0, 1.0), (2.0, 0.5), (0.5, 2.0)];
        let clusters = vec![0, 1, 1, 3];
        scatter_svg(&path, &points, &clusters, "toy <scatter>").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("cluster 0 (1)"));
        assert!(text.contains("cluster 1 (2)"));
        assert!(text.contains("cluster 3 (1)"));
        assert!(text.contains("&lt;scatter&gt;"));
        assert_eq!(text.matches("<circle").count(), 4 + 3); // points + swatches
    }

    #[test]
    fn coincident_points_still_render() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blob.svg");
        let points = vec![(1.0, 1.0); 5];
        let clusters = vec![0; 5];
        scatter_svg(&path, &points, &clusters, "blob").unwrap();
        assert!(fs::read_to_string(&path).unwrap().contains("<svg"));
    }

    #[test]
    fn coordinates_file_is_tab_separated_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coords.tsv");
        coordinates_tsv(
            &path,
            &["a".into(), "b".into()],
            &[(0.5, -1.25), (2.0, 3.0)],
            &[1, 0],
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "clip_id\tx\ty\tcluster");
        assert!(lines[1].starts_with("a\t5.000000e-1\t-1.250000e0\t1"));
        assert_eq!(lines.len(), 3);
    }
}
