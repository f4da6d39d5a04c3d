//! Analysis artifacts: confusion tables and heatmaps, PCA of the propTarg
//! head, and predicted-vs-true quantifier curves.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ground_truth::{canonical_ratios, TaskLabels, NUM_QUANTIFIERS, NUM_RATIOS, QUANTIFIERS};
use crate::model::Task;
use crate::numeric::{pca2, Tensor};
use crate::ground_truth::SetComp;
use crate::scene::{encode_pgm, ManifestEntry};

/// Class labels in index order; ratios use their compact form ("14" is 1:4).
pub fn class_labels(task: Task) -> Vec<String> {
    match task {
        Task::SetComp => SetComp::ALL.iter().map(|s| s.name().to_string()).collect(),
        Task::PropTarg => canonical_ratios().iter().map(|r| r.compact()).collect(),
        Task::NTarg => (0..task.classes()).map(|i| i.to_string()).collect(),
        Task::VagueQ => QUANTIFIERS.iter().map(|q| q.to_string()).collect(),
    }
}

/// Counts with a header of predicted labels and one row per true label.
pub fn confusion_csv(task: Task, confusion: &[Vec<u64>]) -> String {
    let labels = class_labels(task);
    let mut s = String::from("true\\pred");
    for l in &labels {
        write!(s, ",{l}").unwrap();
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(confusion) {
        s.push_str(l);
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Row-normalised heatmap: each matrix cell becomes a `cell_px` square whose
/// intensity is the row fraction. Rows without any scenes stay black.
pub fn confusion_pgm(confusion: &[Vec<u64>], cell_px: usize) -> Vec<u8> {
    let n = confusion.len();
    let side = n * cell_px;
    let mut px = vec![0u8; side * side];
    for (i, row) in confusion.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let level = if total == 0 { 0 } else { (255.0 * v as f64 / total as f64).round() as u8 };
            for y in i * cell_px..(i + 1) * cell_px {
                px[y * side + j * cell_px..y * side + (j + 1) * cell_px].fill(level);
            }
        }
    }
    encode_pgm(side, side, &px)
}

/// Fraction of misclassifications landing on a neighbouring class (classes
/// are ordered by proportion). `None` when there are no errors.
pub fn adjacency_fraction(confusion: &[Vec<u64>]) -> Option<f64> {
    let (mut errors, mut adjacent) = (0u64, 0u64);
    for (i, row) in confusion.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j {
                errors += v;
                if i.abs_diff(j) == 1 {
                    adjacent += v;
                }
            }
        }
    }
    (errors > 0).then(|| adjacent as f64 / errors as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaExport {
    pub csv: String,
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    /// Mean silhouette by proportion class, in [−1, 1].
    pub silhouette: f64,
    /// Mean pairwise distance between scenes of the same proportion.
    pub within: f64,
    /// Mean pairwise distance between scenes of different proportions.
    pub between: f64,
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Mean silhouette of labelled points; singletons score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        for (q, &l) in points.iter().zip(labels) {
            sums[l] += dist(p, q);
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / points.len() as f64
}

/// Mean pairwise distances (within-label, between-label).
pub fn within_between(points: &[[f64; 2]], labels: &[usize]) -> (f64, f64) {
    let (mut ws, mut wn, mut bs, mut bn) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dist(&points[i], &points[j]);
            if labels[i] == labels[j] {
                ws += d;
                wn += 1;
            } else {
                bs += d;
                bn += 1;
            }
        }
    }
    let mean = |s: f64, n: u64| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(ws, wn), mean(bs, bn))
}

/// PCA of the propTarg head vectors (one row per scene).
pub fn export_pca(features: &Tensor, entries: &[ManifestEntry]) -> Result<PcaExport> {
    if features.rows() != entries.len() {
        return Err(Error::Protocol(format!(
            "{} feature rows for {} scenes",
            features.rows(),
            entries.len()
        )));
    }
    let points: Vec<Vec<f64>> = (0..features.rows()).map(|i| features.row(i).to_vec()).collect();
    let pca = pca2(&points)?;
    let labels: Vec<usize> = entries.iter().map(|e| e.labels.prop_class).collect();
    let ratios = canonical_ratios();
    let mut csv = String::from("scene_id,ratio,proportion,pc1,pc2\n");
    for (e, c) in entries.iter().zip(&pca.coords) {
        let r = ratios[e.labels.prop_class];
        writeln!(csv, "{},{},{},{},{}", e.scene_id, r.compact(), r.proportion(), c[0], c[1]).unwrap();
    }
    let (within, between) = within_between(&pca.coords, &labels);
    Ok(PcaExport {
        csv,
        silhouette: silhouette(&pca.coords, &labels),
        within,
        between,
        explained: pca.explained,
        coords: pca.coords,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantCurves {
    pub csv: String,
    /// `predicted[ratio][quantifier]`, mean over scenes of that ratio.
    pub predicted: Vec<[f64; NUM_QUANTIFIERS]>,
    pub ground_truth: Vec<[f64; NUM_QUANTIFIERS]>,
    /// Mean |predicted − ground truth| over all (quantifier, ratio) cells
    /// with scenes.
    pub mean_abs_gap: f64,
}

/// Mean predicted quantifier distribution per proportion, next to the
/// ground truth.
pub fn export_quant_curves(outputs: &Tensor, labels: &[&TaskLabels]) -> Result<QuantCurves> {
    if outputs.shape() != [labels.len(), NUM_QUANTIFIERS] {
        return Err(Error::Protocol(format!("quantifier outputs have shape {:?}", outputs.shape())));
    }
    let mut predicted = vec![[0.0; NUM_QUANTIFIERS]; NUM_RATIOS];
    let mut truth = vec![[0.0; NUM_QUANTIFIERS]; NUM_RATIOS];
    let mut counts = [0usize; NUM_RATIOS];
    for (i, l) in labels.iter().enumerate() {
        let c = l.prop_class;
        counts[c] += 1;
        for (p, o) in predicted[c].iter_mut().zip(outputs.row(i)) {
            *p += o;
        }
        truth[c] = l.quant_dist;
    }
    let ratios = canonical_ratios();
    let mut csv = String::from("quantifier,ratio,proportion,predicted,ground_truth\n");
    let (mut gap, mut cells) = (0.0, 0usize);
    for c in 0..NUM_RATIOS {
        if counts[c] > 0 {
            predicted[c].iter_mut().for_each(|v| *v /= counts[c] as f64);
        }
    }
    for (q, name) in QUANTIFIERS.iter().enumerate() {
        for c in 0..NUM_RATIOS {
            if counts[c] == 0 {
                continue;
            }
            let r = ratios[c];
            writeln!(csv, "{name},{},{},{},{}", r.compact(), r.proportion(), predicted[c][q], truth[c][q]).unwrap();
            gap += (predicted[c][q] - truth[c][q]).abs();
            cells += 1;
        }
    }
    Ok(QuantCurves {
        csv,
        predicted,
        ground_truth: truth,
        mean_abs_gap: if cells == 0 { 0.0 } else { gap / cells as f64 },
    })
}
