//! Estimation-error metrics, latent-recovery scores, and report plumbing.
//!
//! Covers the absolute error of averaged effects, the per-unit RMS error of
//! heterogeneous effects, a block-wise mean correlation coefficient between
//! true and recovered latents (optimal dimension assignment, absolute
//! Pearson by default), recovered-vs-true scatter exports, and the CSV
//! report schema shared by the experiment harness.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use ordered_float::OrderedFloat;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::datagen::LatentBlocks;
use crate::error::{Error, Result};

/// Absolute error of an averaged effect estimate.
pub fn eps_average(tau_hat: f64, tau_true: f64) -> f64 {
    (tau_hat - tau_true).abs()
}

/// Root-mean-square error of per-unit effect estimates.
pub fn eps_individual(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    if tau_hat.len() != tau_true.len() {
        return Err(Error::Input(format!(
            "effect vectors disagree on length: {} vs {}",
            tau_hat.len(),
            tau_true.len()
        )));
    }
    if tau_hat.is_empty() {
        return Err(Error::Input("effect vectors must be non-empty".into()));
    }
    let mse = tau_hat
        .iter()
        .zip(tau_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / tau_hat.len() as f64;
    Ok(mse.sqrt())
}

/// Correlation used inside the block-recovery score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    /// Linear correlation; invariant to affine maps.
    #[default]
    Pearson,
    /// Rank correlation; invariant to strictly monotone maps.
    Spearman,
}

/// Pearson correlation, defined as 0 (with a warning) when either input has
/// zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        eprintln!("warning: zero-variance dimension in correlation; treating as 0");
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Mid-ranks (ties get the average of their positions).
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on mid-ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn correlate(kind: CorrelationKind, x: &[f64], y: &[f64]) -> f64 {
    match kind {
        CorrelationKind::Pearson => pearson(x, y),
        CorrelationKind::Spearman => spearman(x, y),
    }
}

/// Mean weight of a maximum-weight one-to-one assignment between the rows
/// and columns of `weights` (matching min(rows, cols) pairs).
fn assignment_mean(weights: &Array2<f64>) -> f64 {
    let (p, q) = weights.dim();
    if p == 0 || q == 0 {
        return 0.0;
    }
    if p == 1 && q == 1 {
        return weights[(0, 0)];
    }
    // The solver wants rows <= columns; scores are symmetric in orientation.
    let (rows, cols, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if p <= q {
        (p, q, Box::new(|r, c| weights[(r, c)]))
    } else {
        (q, p, Box::new(|r, c| weights[(c, r)]))
    };
    let m = Matrix::from_fn(rows, cols, |(r, c)| OrderedFloat(at(r, c)));
    let (total, _) = kuhn_munkres(&m);
    total.into_inner() / rows as f64
}

/// Block-recovery score: entry `(a, b)` is the mean absolute correlation
/// between the dimensions of true block `a` and recovered block `b` under
/// the best one-to-one dimension assignment. Row/column order is
/// (individual, confounding, neighbor).
pub fn mcc_blocks_with(
    truth: &LatentBlocks,
    recovered: &LatentBlocks,
    kind: CorrelationKind,
) -> Result<Array2<f64>> {
    if truth.n() != recovered.n() {
        return Err(Error::Input(format!(
            "latent blocks disagree on unit count: {} vs {}",
            truth.n(),
            recovered.n()
        )));
    }
    let true_blocks = [&truth.u_i, &truth.u_c, &truth.u_n];
    let rec_blocks = [&recovered.u_i, &recovered.u_c, &recovered.u_n];
    let mut out = Array2::zeros((3, 3));
    for (a, tb) in true_blocks.iter().enumerate() {
        for (b, rb) in rec_blocks.iter().enumerate() {
            let mut w = Array2::zeros((tb.ncols(), rb.ncols()));
            for ti in 0..tb.ncols() {
                let tcol: Vec<f64> = tb.column(ti).to_vec();
                for ri in 0..rb.ncols() {
                    let rcol: Vec<f64> = rb.column(ri).to_vec();
                    w[(ti, ri)] = correlate(kind, &tcol, &rcol).abs();
                }
            }
            out[(a, b)] = assignment_mean(&w);
        }
    }
    Ok(out)
}

/// [`mcc_blocks_with`] using absolute Pearson correlation.
pub fn mcc_blocks(truth: &LatentBlocks, recovered: &LatentBlocks) -> Result<Array2<f64>> {
    mcc_blocks_with(truth, recovered, CorrelationKind::Pearson)
}

const BLOCK_LABELS: [&str; 3] = ["u_i", "u_c", "u_n"];

/// Writes recovered-vs-true scatter data and rendered plots, one pair of
/// files per block (`scatter_u_i.csv` / `scatter_u_i.png`, ...). Recovered
/// values are sign-aligned (flipped when the correlation with the truth is
/// negative). Multi-dimensional blocks contribute their first dimension,
/// which the CSV header records.
pub fn scatter_export(truth: &LatentBlocks, recovered: &LatentBlocks, dir: &Path) -> Result<()> {
    if truth.n() != recovered.n() {
        return Err(Error::Input(format!(
            "latent blocks disagree on unit count: {} vs {}",
            truth.n(),
            recovered.n()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, &e))?;
    let true_blocks = [&truth.u_i, &truth.u_c, &truth.u_n];
    let rec_blocks = [&recovered.u_i, &recovered.u_c, &recovered.u_n];
    for (label, (tb, rb)) in BLOCK_LABELS.iter().zip(true_blocks.iter().zip(rec_blocks)) {
        let tcol: Vec<f64> = tb.column(0).to_vec();
        let mut rcol: Vec<f64> = rb.column(0).to_vec();
        if pearson(&tcol, &rcol) < 0.0 {
            for v in &mut rcol {
                *v = -*v;
            }
        }
        let theader = if tb.ncols() > 1 {
            format!("true_{label}_dim0_of_{}", tb.ncols())
        } else {
            format!("true_{label}")
        };
        let rheader = if rb.ncols() > 1 {
            format!("recovered_{label}_dim0_of_{}", rb.ncols())
        } else {
            format!("recovered_{label}")
        };

        let csv_path = dir.join(format!("scatter_{label}.csv"));
        let mut body = format!("{theader},{rheader}\n");
        for (t, r) in tcol.iter().zip(&rcol) {
            body.push_str(&format!("{t},{r}\n"));
        }
        fs::write(&csv_path, body).map_err(|e| Error::io(&csv_path, &e))?;

        let png_path = dir.join(format!("scatter_{label}.png"));
        let img = render_scatter(&tcol, &rcol);
        img.save(&png_path)
            .map_err(|e| Error::Io { path: png_path.display().to_string(), message: e.to_string() })?;
    }
    Ok(())
}

/// Minimal scatter rendering: dark points on a white canvas with a framed
/// plot area, both axes spanning the data range with 5% padding.
fn render_scatter(x: &[f64], y: &[f64]) -> image::GrayImage {
    const SIZE: u32 = 480;
    const MARGIN: u32 = 24;
    let mut img = image::GrayImage::from_pixel(SIZE, SIZE, image::Luma([255u8]));

    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.05 * (hi - lo).max(1e-12);
        (lo - pad, hi + pad)
    };
    let (x_lo, x_hi) = span(x);
    let (y_lo, y_hi) = span(y);
    let inner = (SIZE - 2 * MARGIN) as f64;
    let to_px = |v: f64, lo: f64, hi: f64| MARGIN as f64 + (v - lo) / (hi - lo) * inner;

    // Frame.
    for p in MARGIN..=SIZE - MARGIN {
        for (a, b) in [(p, MARGIN), (p, SIZE - MARGIN), (MARGIN, p), (SIZE - MARGIN, p)] {
            img.put_pixel(a, b, image::Luma([0u8]));
        }
    }
    // Points: 3x3 blocks.
    for (&xv, &yv) in x.iter().zip(y) {
        let cx = to_px(xv, x_lo, x_hi).round() as i64;
        // Image rows grow downward; flip the vertical axis.
        let cy = (SIZE as f64 - to_px(yv, y_lo, y_hi)).round() as i64;
        for dx in -1..=1_i64 {
            for dy in -1..=1_i64 {
                let (px, py) = (cx + dx, cy + dy);
                if px >= 0 && py >= 0 && (px as u32) < SIZE && (py as u32) < SIZE {
                    img.put_pixel(px as u32, py as u32, image::Luma([40u8]));
                }
            }
        }
    }
    img
}

/// One evaluated query: a (dataset, method, seed, split, query) cell of the
/// experiment grid with its two error metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub split: String,
    pub estimand: String,
    pub setting_a: String,
    pub setting_b: String,
    pub eps_average: f64,
    pub eps_individual: f64,
}

/// Mean and sample standard deviation of both errors over seeds, for one
/// (dataset, method, split, estimand, settings) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: String,
    pub split: String,
    pub estimand: String,
    pub setting_a: String,
    pub setting_b: String,
    pub seeds: usize,
    pub eps_average_mean: f64,
    pub eps_average_std: f64,
    pub eps_individual_mean: f64,
    pub eps_individual_std: f64,
}

/// Full evaluation payload for one method on one dataset: per-seed query
/// errors plus per-seed recovery matrices (empty for baselines that recover
/// no latents).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<RunRecord>,
    /// Per-seed 3x3 recovery scores as (seed, row-major entries).
    pub mcc: Vec<(u64, Vec<f64>)>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn push_mcc(&mut self, seed: u64, matrix: &Array2<f64>) {
        self.mcc.push((seed, matrix.iter().cloned().collect()));
    }

    /// Groups rows by everything except the seed and aggregates both errors
    /// as mean and sample standard deviation.
    pub fn summarize(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(String, String, String, String, String, String), Vec<&RunRecord>> =
            BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((
                    r.dataset.clone(),
                    r.method.clone(),
                    r.split.clone(),
                    r.estimand.clone(),
                    r.setting_a.clone(),
                    r.setting_b.clone(),
                ))
                .or_default()
                .push(r);
        }
        groups
            .into_iter()
            .map(|((dataset, method, split, estimand, setting_a, setting_b), rows)| {
                let (am, asd) = mean_std(&rows.iter().map(|r| r.eps_average).collect::<Vec<_>>());
                let (im, isd) =
                    mean_std(&rows.iter().map(|r| r.eps_individual).collect::<Vec<_>>());
                SummaryRow {
                    dataset,
                    method,
                    split,
                    estimand,
                    setting_a,
                    setting_b,
                    seeds: rows.len(),
                    eps_average_mean: am,
                    eps_average_std: asd,
                    eps_individual_mean: im,
                    eps_individual_std: isd,
                }
            })
            .collect()
    }

    /// Entrywise mean of the per-seed recovery matrices.
    pub fn mcc_mean(&self) -> Option<Array2<f64>> {
        if self.mcc.is_empty() {
            return None;
        }
        let mut acc = Array2::zeros((3, 3));
        for (_, entries) in &self.mcc {
            for (k, v) in entries.iter().enumerate() {
                acc[(k / 3, k % 3)] += v;
            }
        }
        Some(acc / self.mcc.len() as f64)
    }
}

/// Writes per-run rows in the report schema. String fields must not contain
/// commas (settings use the `(t;z)` rendering for that reason).
pub fn write_runs_csv(path: &Path, rows: &[RunRecord]) -> Result<()> {
    let mut body = String::from(
        "dataset,method,seed,split,estimand,setting_a,setting_b,eps_average,eps_individual\n",
    );
    for r in rows {
        for field in [&r.dataset, &r.method, &r.split, &r.estimand, &r.setting_a, &r.setting_b] {
            if field.contains(',') {
                return Err(Error::Input(format!(
                    "report field {field:?} contains a comma"
                )));
            }
        }
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.dataset,
            r.method,
            r.seed,
            r.split,
            r.estimand,
            r.setting_a,
            r.setting_b,
            r.eps_average,
            r.eps_individual
        ));
    }
    fs::write(path, body).map_err(|e| Error::io(path, &e))
}

/// Reads rows written by [`write_runs_csv`].
pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, &e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| {
        Error::Input(format!("{}: empty runs file", path.display()))
    })?;
    if header
        != "dataset,method,seed,split,estimand,setting_a,setting_b,eps_average,eps_individual"
    {
        return Err(Error::Input(format!(
            "{}: unexpected runs header: {header}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Input(format!(
                "{}: line {}: expected 9 fields, got {}",
                path.display(),
                lineno + 2,
                f.len()
            )));
        }
        let parse_f64 = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::Input(format!(
                    "{}: line {}: bad number {s:?}",
                    path.display(),
                    lineno + 2
                ))
            })
        };
        out.push(RunRecord {
            dataset: f[0].to_string(),
            method: f[1].to_string(),
            seed: f[2].parse().map_err(|_| {
                Error::Input(format!(
                    "{}: line {}: bad seed {:?}",
                    path.display(),
                    lineno + 2,
                    f[2]
                ))
            })?,
            split: f[3].to_string(),
            estimand: f[4].to_string(),
            setting_a: f[5].to_string(),
            setting_b: f[6].to_string(),
            eps_average: parse_f64(f[7])?,
            eps_individual: parse_f64(f[8])?,
        });
    }
    Ok(out)
}

/// Writes grouped summaries (mean, std) next to the per-run rows.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut body = String::from(
        "dataset,method,split,estimand,setting_a,setting_b,seeds,\
         eps_average_mean,eps_average_std,eps_individual_mean,eps_individual_std\n",
    );
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.dataset,
            r.method,
            r.split,
            r.estimand,
            r.setting_a,
            r.setting_b,
            r.seeds,
            r.eps_average_mean,
            r.eps_average_std,
            r.eps_individual_mean,
            r.eps_individual_std
        ));
    }
    fs::write(path, body).map_err(|e| Error::io(path, &e))
}

/// Writes one labeled 3x3 recovery matrix per seed, then the seed-mean.
pub fn write_mcc_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, &e))?;
    writeln!(f, "seed,true_block,rec_u_i,rec_u_c,rec_u_n").map_err(|e| Error::io(path, &e))?;
    let mut emit = |tag: &str, entries: &[f64]| -> Result<()> {
        for (r, label) in BLOCK_LABELS.iter().enumerate() {
            writeln!(
                f,
                "{tag},{label},{},{},{}",
                entries[3 * r],
                entries[3 * r + 1],
                entries[3 * r + 2]
            )
            .map_err(|e| Error::io(path, &e))?;
        }
        Ok(())
    };
    for (seed, entries) in &report.mcc {
        emit(&seed.to_string(), entries)?;
    }
    if let Some(mean) = report.mcc_mean() {
        let entries: Vec<f64> = mean.iter().cloned().collect();
        emit("mean", &entries)?;
    }
    Ok(())
}
