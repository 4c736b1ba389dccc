//! Gaussian draws of B_n and of nested-design sum-of-squares matrices,
//! empirical linear spectral statistics and the Monte Carlo harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::contour::CltSummary;
use crate::error::{Error, Result};
use crate::fixed_point::{esd_density, SolverOptions};
use crate::functions::TestFunction;
use crate::linalg::sym_inv_sqrt;
use crate::model::{psd_sqrt, support_bound, Covariance, NestedDesign, SigmaRepr, VarianceModel};
use crate::provenance::{config_hash, model_digest, Provenance};
use crate::rng::{derive_seed, rng_from_seed};

/// Clearance above the support bound beyond which a draw is flagged.
pub const EDGE_CLEARANCE: f64 = 0.5;

/// Condition number of Λ_n above which standardization is refused.
pub const MAX_LAMBDA_CONDITION: f64 = 1e12;

/// One realized matrix, summarized by its spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDraw {
    pub seed: u64,
    /// Eigenvalues in nonincreasing order.
    pub eigenvalues: Vec<f64>,
    /// Whether λ_max exceeds the support bound plus [`EDGE_CLEARANCE`].
    pub exceeds_bound: bool,
    /// Σ_i f(λ_i) keyed by the function descriptor.
    pub lss: BTreeMap<String, f64>,
}

impl SimDraw {
    fn from_matrix(seed: u64, m: DMatrix<f64>, edge: Option<f64>) -> Self {
        let mut eigenvalues: Vec<f64> = if m.nrows() == 0 {
            Vec::new()
        } else {
            m.symmetric_eigenvalues().iter().copied().collect()
        };
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let exceeds_bound = match (edge, eigenvalues.first()) {
            (Some(e), Some(&top)) => top > e + EDGE_CLEARANCE,
            _ => false,
        };
        SimDraw {
            seed,
            eigenvalues,
            exceeds_bound,
            lss: BTreeMap::new(),
        }
    }

    /// Fills `lss` for the given functions.
    pub fn with_lss(mut self, functions: &[TestFunction]) -> Result<Self> {
        let values = lss_values(&self, functions)?;
        for (f, v) in functions.iter().zip(values) {
            self.lss.insert(f.to_string(), v);
        }
        Ok(self)
    }
}

fn normal_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Filled row by row so the stream order does not depend on storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// The N x n factor W = Σ_r L_r X_r Σ_r^{1/2}, so that B_n = WᵀW / N.
pub fn sample_factor(model: &VarianceModel, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let (n, nn) = (model.n(), model.samples());
    let mut w = DMatrix::zeros(nn, n);
    for r in 0..model.levels() {
        let l = &model.scalings()[r];
        let x = normal_matrix(rng, nn, n);
        match model.repr() {
            SigmaRepr::Diagonal(d) => {
                let roots: Vec<f64> = d[r].iter().map(|v| v.sqrt()).collect();
                for j in 0..nn {
                    for i in 0..n {
                        w[(j, i)] += l[j] * x[(j, i)] * roots[i];
                    }
                }
            }
            SigmaRepr::Dense { roots, .. } => {
                let mut xr = x * &roots[r];
                for j in 0..nn {
                    xr.row_mut(j).scale_mut(l[j]);
                }
                w += xr;
            }
        }
    }
    w
}

/// One realization of B_n.
pub fn sample_matrix(model: &VarianceModel, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let w = sample_factor(model, &mut rng);
    w.tr_mul(&w) / model.samples() as f64
}

/// Draws B_n and returns its spectrum.
pub fn sample_bn(model: &VarianceModel, seed: u64) -> SimDraw {
    let edge = support_bound(model).1;
    SimDraw::from_matrix(seed, sample_matrix(model, seed), Some(edge))
}

/// Σ_i f(λ_i) for each function, summed in eigenvalue order.
pub fn lss_values(draw: &SimDraw, functions: &[TestFunction]) -> Result<Vec<f64>> {
    functions
        .iter()
        .map(|f| {
            draw.eigenvalues
                .iter()
                .map(|&x| f.eval_real(x))
                .sum::<Result<f64>>()
        })
        .collect()
}

/// Sum-of-squares matrices of one nested-design draw.
#[derive(Debug, Clone)]
pub struct NestedMatrices {
    /// F⁻¹ Yᵀ π Y with π the projection onto the top-level membership columns.
    pub between: DMatrix<f64>,
    /// (n_s - F)⁻¹ Yᵀ (I - π) Y; zero when every top-level group is a singleton.
    pub within: DMatrix<f64>,
}

/// Trace moments of one nested-design draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedTraces {
    pub tr_between: f64,
    pub tr_between_sq: f64,
    pub tr_within: f64,
}

fn covariance_root(s: &Covariance) -> Covariance {
    match s {
        Covariance::Diagonal(d) => {
            Covariance::Diagonal(d.iter().map(|v| v.max(0.0).sqrt()).collect())
        }
        Covariance::Dense(m) => Covariance::Dense(psd_sqrt(m)),
    }
}

/// Row-projected factors (Z, R) with Z = (U₁ᵀU₁)^{-1/2}U₁ᵀY and R = (I - π)Y.
fn nested_factors(
    design: &NestedDesign,
    sigmas: &[Covariance],
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if sigmas.len() != design.levels() {
        return Err(Error::Dimension(format!(
            "{} covariances for a {}-level design",
            sigmas.len(),
            design.levels()
        )));
    }
    let p = sigmas[0].dim();
    if sigmas.iter().any(|s| s.dim() != p) {
        return Err(Error::Dimension("covariances differ in dimension".into()));
    }
    let ns = design.total_samples();
    let mut rng = rng_from_seed(seed);
    let mut y = DMatrix::zeros(ns, p);
    for (r, s) in sigmas.iter().enumerate() {
        let groups = design.group_counts()[r];
        let a = normal_matrix(&mut rng, groups, p);
        let effects = match covariance_root(s) {
            Covariance::Diagonal(d) => {
                let mut e = a;
                for (i, v) in d.iter().enumerate() {
                    e.column_mut(i).scale_mut(*v);
                }
                e
            }
            Covariance::Dense(root) => a * root,
        };
        for (i, &g) in design.assignments()[r].iter().enumerate() {
            let mut row = y.row_mut(i);
            row += effects.row(g);
        }
    }
    let top = &design.assignments()[0];
    let sizes = design.group_sizes(0);
    let families = sizes.len();
    let mut sums = DMatrix::zeros(families, p);
    for (i, &f) in top.iter().enumerate() {
        let mut row = sums.row_mut(f);
        row += y.row(i);
    }
    let mut residual = y;
    for (i, &f) in top.iter().enumerate() {
        let mean = sums.row(f) / sizes[f] as f64;
        let mut row = residual.row_mut(i);
        row -= mean;
    }
    for (f, &s) in sizes.iter().enumerate() {
        sums.row_mut(f).scale_mut(1.0 / (s as f64).sqrt());
    }
    Ok((sums, residual))
}

fn within_dof(design: &NestedDesign) -> usize {
    design.total_samples() - design.group_counts()[0]
}

/// Draws the between- and within-group sum-of-squares matrices.
pub fn nested_matrices(
    design: &NestedDesign,
    sigmas: &[Covariance],
    seed: u64,
) -> Result<NestedMatrices> {
    let (z, r) = nested_factors(design, sigmas, seed)?;
    let families = z.nrows() as f64;
    let between = z.tr_mul(&z) / families;
    let dof = within_dof(design);
    let within = if dof == 0 {
        DMatrix::zeros(z.ncols(), z.ncols())
    } else {
        r.tr_mul(&r) / dof as f64
    };
    Ok(NestedMatrices { between, within })
}

/// Spectra of the between- and within-group matrices of one draw.
pub fn sample_nested(
    design: &NestedDesign,
    sigmas: &[Covariance],
    seed: u64,
) -> Result<(SimDraw, SimDraw)> {
    let m = nested_matrices(design, sigmas, seed)?;
    Ok((
        SimDraw::from_matrix(seed, m.between, None),
        SimDraw::from_matrix(seed, m.within, None),
    ))
}

/// Tr B_p, Tr B_p² and Tr D_p of one draw without forming eigenvalues.
pub fn nested_traces(
    design: &NestedDesign,
    sigmas: &[Covariance],
    seed: u64,
) -> Result<NestedTraces> {
    let (z, r) = nested_factors(design, sigmas, seed)?;
    let families = z.nrows() as f64;
    let gram = if z.nrows() <= z.ncols() {
        &z * z.transpose()
    } else {
        z.tr_mul(&z)
    };
    let dof = within_dof(design);
    Ok(NestedTraces {
        tr_between: z.norm_squared() / families,
        tr_between_sq: gram.norm_squared() / (families * families),
        tr_within: if dof == 0 {
            0.0
        } else {
            r.norm_squared() / dof as f64
        },
    })
}

/// Cumulative distribution of the deterministic-equivalent density on `grid`,
/// normalized to end at 1.
pub fn esd_cdf(
    model: &VarianceModel,
    grid: &[f64],
    eta: f64,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    check_grid(grid)?;
    let density = esd_density(model, grid, eta, opts)?;
    normalized_cumulative(grid, &density)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "CDF grid must be increasing with at least two points".into(),
        ));
    }
    Ok(())
}

/// Cumulative trapezoid of tabulated density values, scaled to end at 1.
pub fn normalized_cumulative(grid: &[f64], density: &[f64]) -> Result<Vec<f64>> {
    check_grid(grid)?;
    if density.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} density values for {} grid points",
            density.len(),
            grid.len()
        )));
    }
    let mut cdf = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
    }
    let total = *cdf.last().unwrap();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter(
            "density has no mass on the grid".into(),
        ));
    }
    Ok(cdf.into_iter().map(|v| v / total).collect())
}

/// Kolmogorov distance between the empirical law of `samples` and a CDF given
/// by linear interpolation of `cdf` on `grid` (0 left of the grid, 1 right).
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Piecewise-linear interpolation of tabulated CDF values.
pub fn interpolate_cdf(grid: &[f64], cdf: &[f64], x: f64) -> f64 {
    match grid.partition_point(|g| *g <= x) {
        0 => 0.0,
        i if i == grid.len() => 1.0,
        i => {
            let t = (x - grid[i - 1]) / (grid[i] - grid[i - 1]);
            cdf[i - 1] + t * (cdf[i] - cdf[i - 1])
        }
    }
}

/// One Monte Carlo replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub replicate: usize,
    pub seed: u64,
    pub lss: Vec<f64>,
    /// Λ_n^{-1/2}(lss - centering - Γ_n).
    pub standardized: Vec<f64>,
    pub exceeds_bound: bool,
}

/// Per-coordinate moments of the standardized statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityDiagnostics {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Kolmogorov distance to the standard normal law.
    pub ks_normal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    /// Mean of the standardized vectors.
    pub mean: Vec<f64>,
    /// Covariance of the standardized vectors; absent below two replicates.
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Mean of lss - centering, to compare with Γ_n.
    pub empirical_bias: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Covariance of the raw statistics, to compare with Λ_n.
    pub lss_covariance: Option<Vec<Vec<f64>>>,
    pub diagnostics: Vec<NormalityDiagnostics>,
    /// Draws whose largest eigenvalue exceeded the support bound plus clearance.
    pub edge_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub provenance: Provenance,
    pub functions: Vec<String>,
    pub replicates: usize,
    pub master_seed: u64,
    pub records: Vec<McRecord>,
    pub summary: McSummary,
}

#[derive(Serialize)]
struct McFingerprint<'a> {
    model: String,
    functions: &'a [TestFunction],
    replicates: usize,
    master_seed: u64,
    centering: &'a [f64],
    gamma: &'a [f64],
    lambda: &'a [Vec<f64>],
}

fn mean_of(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let count = rows.len().max(1) as f64;
    mean.iter().map(|m| m / count).collect()
}

fn covariance_of(rows: &[Vec<f64>], mean: &[f64]) -> Option<Vec<Vec<f64>>> {
    if rows.len() < 2 {
        return None;
    }
    let d = mean.len();
    let mut cov = vec![vec![0.0; d]; d];
    for row in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (row[a] - mean[a]) * (row[b] - mean[b]);
            }
        }
    }
    let denom = (rows.len() - 1) as f64;
    Some(
        cov.into_iter()
            .map(|r| r.into_iter().map(|v| v / denom).collect())
            .collect(),
    )
}

fn normality(values: &[f64]) -> NormalityDiagnostics {
    let n = values.len() as f64;
    if values.len() < 2 {
        return NormalityDiagnostics {
            skewness: f64::NAN,
            excess_kurtosis: f64::NAN,
            ks_normal: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    NormalityDiagnostics {
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        ks_normal: ks_distance(values, |x| std_normal.cdf(x)),
    }
}

/// Runs `replicates` seeded draws of B_n and standardizes their statistics
/// with the deterministic CLT summary of the same model and functions.
pub fn mc_experiment(
    model: &VarianceModel,
    functions: &[TestFunction],
    replicates: usize,
    master_seed: u64,
    summary: &CltSummary,
) -> Result<McResult> {
    if summary.functions != functions {
        return Err(Error::InvalidParameter(
            "CLT summary was computed for different functions".into(),
        ));
    }
    let l = functions.len();
    let (root_inv, cond) = sym_inv_sqrt(&summary.lambda_matrix());
    if !(cond <= MAX_LAMBDA_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    let shift: Vec<f64> = (0..l)
        .map(|i| summary.centering[i] + summary.gamma[i])
        .collect();
    let records = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, i as u64);
            let draw = sample_bn(model, seed);
            let lss = lss_values(&draw, functions)?;
            let centered = DVector::from_iterator(l, lss.iter().zip(&shift).map(|(v, s)| v - s));
            let standardized = (&root_inv * centered).iter().copied().collect();
            Ok(McRecord {
                replicate: i,
                seed,
                lss,
                standardized,
                exceeds_bound: draw.exceeds_bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let std_rows: Vec<Vec<f64>> = records.iter().map(|r| r.standardized.clone()).collect();
    let raw_rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            r.lss
                .iter()
                .zip(&summary.centering)
                .map(|(v, c)| v - c)
                .collect()
        })
        .collect();
    let mean = mean_of(&std_rows, l);
    let empirical_bias = mean_of(&raw_rows, l);
    let diagnostics = (0..l)
        .map(|a| normality(&std_rows.iter().map(|r| r[a]).collect::<Vec<_>>()))
        .collect();
    let fingerprint = McFingerprint {
        model: model_digest(model),
        functions,
        replicates,
        master_seed,
        centering: &summary.centering,
        gamma: &summary.gamma,
        lambda: &summary.lambda,
    };
    Ok(McResult {
        provenance: Provenance::new(config_hash(&fingerprint)?, Some(master_seed)),
        functions: functions.iter().map(|f| f.to_string()).collect(),
        replicates,
        master_seed,
        summary: McSummary {
            covariance: covariance_of(&std_rows, &mean),
            lss_covariance: covariance_of(&raw_rows, &empirical_bias),
            mean,
            empirical_bias,
            gamma: summary.gamma.clone(),
            diagnostics,
            edge_violations: records.iter().filter(|r| r.exceeds_bound).count(),
        },
        records,
    })
}

impl McResult {
    /// Per-replicate table: replicate, seed, lss_1..l, std_1..l.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.provenance.header_lines().as_bytes())?;
        let mut w = csv::Writer::from_writer(out);
        let l = self.functions.len();
        let mut header = vec!["replicate".to_string(), "seed".to_string()];
        header.extend((1..=l).map(|i| format!("lss_{i}")));
        header.extend((1..=l).map(|i| format!("std_{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.replicate.to_string(), r.seed.to_string()];
            row.extend(r.lss.iter().map(|v| format!("{v:e}")));
            row.extend(r.standardized.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(format!("{stem}_summary.json")), json + "\n")?;
        Ok(())
    }
}

/// Freedman–Diaconis bin count for `values`; falls back to √n bins when the
/// interquartile range vanishes.
pub fn freedman_diaconis_bins(values: &[f64]) -> usize {
    let n = values.len();
    if n < 2 {
        return 1;
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let (i, t) = (pos.floor() as usize, pos.fract());
        xs[i] + t * (xs[(i + 1).min(n - 1)] - xs[i])
    };
    let iqr = q(0.75) - q(0.25);
    let range = xs[n - 1] - xs[0];
    if !(iqr > 0.0) || !(range > 0.0) {
        return ((n as f64).sqrt().ceil() as usize).max(1);
    }
    let width = 2.0 * iqr / (n as f64).cbrt();
    ((range / width).ceil() as usize).clamp(1, 200)
}

/// Standalone SVG histogram with Freedman–Diaconis bins. The bin rule is a
/// presentation choice, stated in the caption.
pub fn histogram_svg(values: &[f64], title: &str) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if !finite.is_empty() {
        let bins = freedman_diaconis_bins(&finite);
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for v in &finite {
            let b = (((v - lo) / span) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let top = *counts.iter().max().unwrap() as f64;
        let bw = (w - 2.0 * pad) / bins as f64;
        for (i, c) in counts.iter().enumerate() {
            let bh = (h - 2.0 * pad) * *c as f64 / top;
            let _ = writeln!(
                svg,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab5" stroke="white"/>"##,
                pad + i as f64 * bw,
                h - pad - bh,
                bw,
                bh
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{pad}" y="{}" font-size="11">{lo:.4}</text>"#,
            h - pad + 15.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{hi:.4}</text>"#,
            w - pad,
            h - pad + 15.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">n = {}, {bins} Freedman–Diaconis bins</text>"#,
            w / 2.0,
            h - 8.0,
            finite.len()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
