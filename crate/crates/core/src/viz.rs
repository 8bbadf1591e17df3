//! Exact t-SNE and file output for figures: SVG scatter plots, SVG small
//! multiples for latent sweeps, and CSV tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{PipelineConfig, Source};
use crate::error::{Error, Result};
use crate::numerics::{euclidean, pairwise_sum, squared_euclidean};
use crate::rng::stream;
use crate::sefa::SweepCell;

pub const MAX_TSNE_POINTS: usize = 2000;
const MIN_TSNE_POINTS: usize = 10;
const P_FLOOR: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub output_dims: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            output_dims: 3,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            seed: 42,
            exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

impl TsneConfig {
    pub fn from_pipeline(c: &PipelineConfig) -> Self {
        Self {
            output_dims: c.tsne_dims,
            perplexity: c.tsne_perplexity,
            iterations: c.tsne_iterations,
            seed: c.seed,
            ..Self::default()
        }
    }

    /// Check these settings against an input of `n` points.
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(2..=3).contains(&self.output_dims) {
            return Err(Error::validation(format!(
                "t-SNE output dims must be 2 or 3, got {}",
                self.output_dims
            )));
        }
        if !(MIN_TSNE_POINTS..=MAX_TSNE_POINTS).contains(&n) {
            return Err(Error::validation(format!(
                "t-SNE needs between {MIN_TSNE_POINTS} and {MAX_TSNE_POINTS} points, got {n}"
            )));
        }
        if !(self.perplexity > 0.0 && self.perplexity < (n as f64 - 1.0) / 3.0) {
            return Err(Error::validation(format!(
                "perplexity {} must lie in (0, (N-1)/3) for N = {n}",
                self.perplexity
            )));
        }
        if !(self.learning_rate > 0.0 && self.exaggeration >= 1.0) {
            return Err(Error::validation("learning rate must be positive and exaggeration >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub layout: Vec<Vec<f64>>,
    /// KL(P‖Q) after every iteration, without exaggeration.
    pub kl: Vec<f64>,
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.par_iter()
        .map(|a| x.iter().map(|b| squared_euclidean(a, b)).collect())
        .collect()
}

/// `p_{j|i}` for one row of squared distances at precision `beta`, with the
/// row's entropy in nats.
fn conditional_row(d: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(j, v)| if j == i { 0.0 } else { (-beta * (v - dmin)).exp() })
        .collect();
    let sum = pairwise_sum(&p);
    let weighted: Vec<f64> = p.iter().zip(d).map(|(p, v)| p * (v - dmin)).collect();
    let entropy = sum.ln() + beta * pairwise_sum(&weighted) / sum;
    p.iter_mut().for_each(|v| *v /= sum);
    (p, entropy)
}

/// Conditional input similarities `p_{j|i}`, with each row's precision
/// found by bisection so its entropy equals `ln(perplexity)`.
pub fn conditional_probabilities(x: &[Vec<f64>], perplexity: f64) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    if n < 2 || !(perplexity > 0.0 && perplexity < n as f64 - 1.0) {
        return Err(Error::validation(format!(
            "perplexity {perplexity} invalid for {n} points"
        )));
    }
    let target = perplexity.ln();
    let d = squared_distances(x);
    d.par_iter()
        .enumerate()
        .map(|(i, row)| {
            let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
            let mut beta = 1.0;
            let mut best = conditional_row(row, i, beta);
            for _ in 0..200 {
                if (best.1 - target).abs() < ENTROPY_TOL {
                    break;
                }
                if best.1 > target {
                    lo = beta;
                    beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = 0.5 * (lo + hi);
                }
                best = conditional_row(row, i, beta);
            }
            if !best.0.iter().all(|v| v.is_finite()) {
                return Err(Error::numerical(format!("non-finite affinities for point {i}")));
            }
            Ok(best.0)
        })
        .collect()
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -pairwise_sum(
        &p.iter()
            .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
            .collect::<Vec<_>>(),
    )
}

fn joint_probabilities(cond: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cond.len() as f64;
    (0..cond.len())
        .map(|i| {
            (0..cond.len())
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        ((cond[i][j] + cond[j][i]) / (2.0 * n)).max(P_FLOOR)
                    }
                })
                .collect()
        })
        .collect()
}

/// Student-t kernel values `1 / (1 + ‖yᵢ − yⱼ‖²)` and their total.
fn kernel(y: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let num: Vec<Vec<f64>> = y
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            y.iter()
                .enumerate()
                .map(|(j, b)| if i == j { 0.0 } else { 1.0 / (1.0 + squared_euclidean(a, b)) })
                .collect()
        })
        .collect();
    let row_sums: Vec<f64> = num.iter().map(|r| pairwise_sum(r)).collect();
    let total = pairwise_sum(&row_sums);
    (num, total)
}

fn kl_divergence(p: &[Vec<f64>], num: &[Vec<f64>], total: f64) -> f64 {
    let rows: Vec<f64> = p
        .par_iter()
        .enumerate()
        .map(|(i, pr)| {
            let terms: Vec<f64> = pr
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, &pij)| pij * (pij / (num[i][j] / total).max(f64::MIN_POSITIVE)).ln())
                .collect();
            pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&rows)
}

fn gradient(p: &[Vec<f64>], y: &[Vec<f64>], num: &[Vec<f64>], total: f64, exag: f64) -> Vec<Vec<f64>> {
    let dims = y[0].len();
    y.par_iter()
        .enumerate()
        .map(|(i, yi)| {
            (0..dims)
                .map(|d| {
                    let terms: Vec<f64> = (0..y.len())
                        .filter(|&j| j != i)
                        .map(|j| {
                            let q = num[i][j] / total;
                            4.0 * (exag * p[i][j] - q) * num[i][j] * (yi[d] - y[j][d])
                        })
                        .collect();
                    pairwise_sum(&terms)
                })
                .collect()
        })
        .collect()
}

fn center(y: &mut [Vec<f64>]) {
    let n = y.len() as f64;
    for d in 0..y[0].len() {
        let col: Vec<f64> = y.iter().map(|r| r[d]).collect();
        let mean = pairwise_sum(&col) / n;
        y.iter_mut().for_each(|r| r[d] -= mean);
    }
}

/// Exact t-SNE. During early exaggeration the update is the usual
/// momentum step with per-coordinate gains; afterwards a step that would
/// raise KL is rejected, momentum reset and the step halved, so the
/// objective never increases.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    cfg.validate(x.len())?;
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::validation("t-SNE input rows must share one length and be finite"));
    }
    let p = joint_probabilities(&conditional_probabilities(x, cfg.perplexity)?);
    let n = x.len();
    let mut rng = stream(cfg.seed, &[0x75e]);
    let mut y: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..cfg.output_dims)
                .map(|_| 1e-4 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut velocity = vec![vec![0.0; cfg.output_dims]; n];
    let mut gains = vec![vec![1.0_f64; cfg.output_dims]; n];
    let (mut num, mut total) = kernel(&y);
    let mut kl_now = kl_divergence(&p, &num, total);
    let mut scale = 1.0;
    let mut kl = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let exaggerating = it < cfg.exaggeration_iters;
        let exag = if exaggerating { cfg.exaggeration } else { 1.0 };
        let momentum = if exaggerating { 0.5 } else { 0.8 };
        let grad = gradient(&p, &y, &num, total, exag);
        if grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::numerical(format!("non-finite t-SNE gradient at iteration {it}")));
        }
        let mut new_gains = gains.clone();
        let mut new_vel = velocity.clone();
        let mut cand = y.clone();
        for i in 0..n {
            for d in 0..cfg.output_dims {
                let g = grad[i][d];
                let gain = &mut new_gains[i][d];
                *gain = if (g > 0.0) != (new_vel[i][d] > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
                *gain = f64::max(*gain, 0.01);
                new_vel[i][d] = momentum * new_vel[i][d] - scale * cfg.learning_rate * *gain * g;
                cand[i][d] += new_vel[i][d];
            }
        }
        center(&mut cand);
        let (c_num, c_total) = kernel(&cand);
        let c_kl = kl_divergence(&p, &c_num, c_total);
        if !c_kl.is_finite() {
            return Err(Error::numerical(format!("non-finite KL at iteration {it}")));
        }
        if exaggerating || c_kl <= kl_now {
            y = cand;
            num = c_num;
            total = c_total;
            kl_now = c_kl;
            velocity = new_vel;
            gains = new_gains;
            scale = (scale * 2.0).min(1.0);
        } else {
            velocity.iter_mut().flatten().for_each(|v| *v = 0.0);
            scale *= 0.5;
        }
        kl.push(kl_now);
    }
    Ok(TsneResult { layout: y, kl })
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(points: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    if points.len() != labels.len() || points.len() < 2 {
        return Err(Error::validation("silhouette needs matching points and labels"));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::validation("silhouette needs at least two clusters"));
    }
    let scores: Vec<f64> = (0..points.len())
        .map(|i| {
            let mean_to = |c: u8| {
                let d: Vec<f64> = (0..points.len())
                    .filter(|&j| j != i && labels[j] == c)
                    .map(|j| euclidean(&points[i], &points[j]))
                    .collect();
                (!d.is_empty()).then(|| pairwise_sum(&d) / d.len() as f64)
            };
            let Some(a) = mean_to(labels[i]) else {
                return 0.0;
            };
            let b = classes
                .iter()
                .filter(|&&c| c != labels[i])
                .filter_map(|&c| mean_to(c))
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(pairwise_sum(&scores) / points.len() as f64)
}

const PANEL: f64 = 300.0;
const MARGIN: f64 = 24.0;
const BENIGN: &str = "#d62728";
const MALIGNANT: &str = "#1f77b4";

fn class_color(label: u8) -> &'static str {
    if label == 0 {
        BENIGN
    } else {
        MALIGNANT
    }
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (-1.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn panel_frame(svg: &mut String, ox: f64, title: &str) {
    let (x0, y0, x1, y1) = (ox + MARGIN, MARGIN, ox + PANEL - MARGIN, PANEL - MARGIN);
    let _ = writeln!(
        svg,
        r#"<g><line x1="{x0:.2}" y1="{y1:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="black"/><line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{title}</text></g>"#,
        ox + PANEL / 2.0,
        MARGIN - 8.0
    );
}

/// SVG scatter of a 2-D or 3-D layout. Color encodes class (benign red,
/// malignant blue); circles are real samples, squares synthetic. A 3-D
/// layout becomes three pairwise-axis panels.
pub fn scatter_svg(layout: &[Vec<f64>], labels: &[u8], sources: &[Source]) -> Result<String> {
    if layout.len() != labels.len() || layout.len() != sources.len() {
        return Err(Error::validation("layout, labels and sources must align"));
    }
    let dims = layout.first().map_or(2, Vec::len);
    if !(2..=3).contains(&dims) || layout.iter().any(|r| r.len() != dims) {
        return Err(Error::validation("scatter layouts must be 2-D or 3-D"));
    }
    let pairs: &[(usize, usize)] = if dims == 2 { &[(0, 1)] } else { &[(0, 1), (0, 2), (1, 2)] };
    let ranges: Vec<(f64, f64)> = (0..dims).map(|d| axis_range(layout.iter().map(|r| r[d]))).collect();
    let width = PANEL * pairs.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{PANEL:.0}" viewBox="0 0 {width:.0} {PANEL:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let span = PANEL - 2.0 * MARGIN;
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let ox = k as f64 * PANEL;
        panel_frame(&mut svg, ox, &format!("dim {} vs dim {}", a + 1, b + 1));
        for ((row, &label), &source) in layout.iter().zip(labels).zip(sources) {
            let px = ox + MARGIN + (row[a] - ranges[a].0) / (ranges[a].1 - ranges[a].0) * span;
            let py = PANEL - MARGIN - (row[b] - ranges[b].0) / (ranges[b].1 - ranges[b].0) * span;
            let color = class_color(label);
            match source {
                Source::Real => {
                    let _ = writeln!(svg, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{color}"/>"#);
                }
                Source::Synthetic => {
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="{color}"/>"#,
                        px - 3.0,
                        py - 3.0
                    );
                }
            }
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Small multiples of a latent sweep: one row per direction, one column
/// per alpha; each panel plots the synthesized sample's components.
pub fn sweep_svg(cells: &[SweepCell]) -> Result<String> {
    let mut indices: Vec<usize> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    for c in cells {
        if !indices.contains(&c.index) {
            indices.push(c.index);
        }
        if !alphas.contains(&c.alpha) {
            alphas.push(c.alpha);
        }
    }
    if cells.len() != indices.len() * alphas.len() {
        return Err(Error::validation("sweep cells do not form a full grid"));
    }
    let cell = 120.0;
    let (w, h) = (cell * alphas.len() as f64, cell * indices.len() as f64);
    let (lo, hi) = axis_range(cells.iter().flat_map(|c| c.sample.iter().copied()));
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, c) in cells.iter().enumerate() {
        let (row, col) = (k / alphas.len(), k % alphas.len());
        let (ox, oy) = (col as f64 * cell, row as f64 * cell);
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="gray"/><text x="{:.2}" y="{:.2}" font-size="9">dir {} alpha {}</text>"#,
            ox + 4.0,
            oy + 14.0,
            cell - 8.0,
            cell - 18.0,
            ox + 6.0,
            oy + 11.0,
            c.index,
            c.alpha
        );
        let n = c.sample.len().max(2) as f64 - 1.0;
        for (j, v) in c.sample.iter().enumerate() {
            let px = ox + 8.0 + j as f64 / n * (cell - 16.0);
            let py = oy + cell - 8.0 - (v - lo) / (hi - lo) * (cell - 26.0);
            let _ = writeln!(svg, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5" fill="{MALIGNANT}"/>"#);
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_text(text: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn emit_scatter(
    layout: &[Vec<f64>],
    labels: &[u8],
    sources: &[Source],
    path: impl AsRef<Path>,
) -> Result<()> {
    write_text(&scatter_svg(layout, labels, sources)?, path)
}

/// RFC 4180 CSV with a header row.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    if rows.iter().any(|r| r.len() != header.len()) {
        return Err(Error::validation("CSV rows must match the header width"));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::validation(e.to_string()))
}

pub fn emit_csv(header: &[&str], rows: &[Vec<String>], path: impl AsRef<Path>) -> Result<()> {
    write_text(&csv_string(header, rows)?, path)
}

/// Shortest round-tripping decimal form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
