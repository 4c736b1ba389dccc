//! Method-of-moments estimation for the full-sib design with an
//! exponentially decaying family-effect spectrum, its delta-method bias and
//! spread, and the replicated estimation experiment.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour::{clt_summary, CltSummary, ContourOptions};
use crate::error::{Error, Result};
use crate::functions::TestFunction;
use crate::model::{
    exponential_decay, scalings_from_design, Covariance, ModelOptions, NestedDesign, VarianceModel,
};
use crate::provenance::{config_hash, Provenance};
use crate::rng::derive_seed;
use crate::simulate::{histogram_svg, nested_traces, NestedTraces};

/// Smallest accepted decay rate.
pub const MIN_DECAY: f64 = 1e-6;
/// Floor applied to the scale parameters when an iterate leaves the domain.
pub const MIN_SCALE: f64 = 1e-12;
pub const MAX_NEWTON_ITERATIONS: usize = 200;
pub const INVERSION_TOL: f64 = 1e-10;
/// Relative finite-difference step of the moment Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-6;
/// Decay rate used to start Newton.
pub const INITIAL_DECAY: f64 = 0.3;

/// Family-effect eigenvalues `tau1 e^{-tau2 i}` and individual variance `tau_e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauParams {
    pub tau1: f64,
    pub tau2: f64,
    pub tau_e: f64,
}

impl TauParams {
    pub fn new(tau1: f64, tau2: f64, tau_e: f64) -> Result<Self> {
        let t = TauParams { tau1, tau2, tau_e };
        if !(tau1 > 0.0 && tau_e > 0.0 && tau2 >= MIN_DECAY)
            || !t.to_vector().iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "tau needs tau1 > 0, tau2 >= {MIN_DECAY}, tau_e > 0; got ({tau1}, {tau2}, {tau_e})"
            )));
        }
        Ok(t)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.tau1, self.tau2, self.tau_e)
    }

    fn from_vector(v: &Vector3<f64>) -> Self {
        TauParams {
            tau1: v[0],
            tau2: v[1],
            tau_e: v[2],
        }
    }

    /// Σ_A and Σ_E in dimension `p`.
    pub fn covariances(&self, p: usize) -> [Covariance; 2] {
        [
            Covariance::Diagonal(exponential_decay(self.tau1, self.tau2, p)),
            Covariance::Diagonal(vec![self.tau_e; p]),
        ]
    }
}

/// Observed or expected (Tr B_p, Tr B_p², Tr D_p).
pub type Moments = [f64; 3];

impl From<NestedTraces> for [f64; 3] {
    fn from(t: NestedTraces) -> Self {
        [t.tr_between, t.tr_between_sq, t.tr_within]
    }
}

/// Exact Gaussian moment map of a full-sib design.
///
/// With T_f = S_f Σ_A + Σ_E:
/// E Tr B_p = F⁻¹ Σ_f Tr T_f,
/// E Tr B_p² = F⁻² [Σ_f ((Tr T_f)² + 2 Tr T_f²) + Σ_{f≠g} Tr T_f T_g],
/// E Tr D_p = Tr Σ_E.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentMap {
    pub families: usize,
    pub traits: usize,
    pub within_dof: usize,
    /// Σ_f S_f.
    size_sum: f64,
    /// Σ_f S_f².
    size_sq_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub tau: TauParams,
    /// ‖m(τ̂) - observed‖ / ‖observed‖.
    pub residual: f64,
    pub iterations: usize,
    /// Whether some iterate was projected back onto the parameter domain.
    pub projected: bool,
}

impl MomentMap {
    pub fn new(design: &NestedDesign, traits: usize) -> Result<Self> {
        if !design.is_full_sib() {
            return Err(Error::InvalidParameter(
                "moment map needs a two-level full-sib design".into(),
            ));
        }
        if traits == 0 {
            return Err(Error::Dimension("need at least one trait".into()));
        }
        let sizes = design.group_sizes(0);
        Ok(MomentMap {
            families: sizes.len(),
            traits,
            within_dof: design.total_samples() - sizes.len(),
            size_sum: sizes.iter().map(|&s| s as f64).sum(),
            size_sq_sum: sizes.iter().map(|&s| (s * s) as f64).sum(),
        })
    }

    /// (m1, m2, mD) at `tau`. Accepts zero scales.
    pub fn expected(&self, tau: &TauParams) -> Moments {
        let p = self.traits as f64;
        let f = self.families as f64;
        let (s1, s2) = (self.size_sum, self.size_sq_sum);
        let (h1, h2) = decay_sums(tau.tau2, self.traits);
        let a1 = tau.tau1 * h1;
        let a2 = tau.tau1 * tau.tau1 * h2;
        let e = tau.tau_e;
        let m1 = (s1 * a1 + f * p * e) / f;
        let sq_traces = s2 * a1 * a1 + 2.0 * s1 * a1 * p * e + f * p * p * e * e;
        let trace_sq = s2 * a2 + 2.0 * s1 * e * a1 + f * p * e * e;
        let cross = s1 * s1 * a2 + 2.0 * f * s1 * e * a1 + f * f * p * e * e;
        let m2 = (sq_traces + trace_sq + cross) / (f * f);
        [m1, m2, p * e]
    }

    /// Central-difference Jacobian ∂m/∂τ with relative step [`JACOBIAN_STEP`].
    pub fn jacobian(&self, tau: &TauParams) -> Matrix3<f64> {
        let base = tau.to_vector();
        let mut jac = Matrix3::zeros();
        for c in 0..3 {
            let h = JACOBIAN_STEP * base[c].abs().max(MIN_DECAY);
            let mut up = base;
            let mut down = base;
            up[c] += h;
            down[c] -= h;
            let mu = self.expected(&TauParams::from_vector(&up));
            let md = self.expected(&TauParams::from_vector(&down));
            for r in 0..3 {
                jac[(r, c)] = (mu[r] - md[r]) / (2.0 * h);
            }
        }
        jac
    }

    /// Starting point: τ_e from mD, the default decay, then τ1 from m1.
    fn initial(&self, observed: &Moments) -> TauParams {
        let p = self.traits as f64;
        let tau_e = (observed[2] / p).max(MIN_SCALE);
        let tau2 = INITIAL_DECAY;
        let (h1, _) = decay_sums(tau2, self.traits);
        let f = self.families as f64;
        let tau1 = ((observed[0] - p * tau_e) * f / (self.size_sum * h1)).max(MIN_SCALE);
        TauParams { tau1, tau2, tau_e }
    }

    /// Damped Newton solve of m(τ) = observed.
    pub fn invert(&self, observed: &Moments) -> Result<TauEstimate> {
        if self.within_dof == 0 {
            return Err(Error::InvalidParameter(
                "within-family moments need a family with two or more members".into(),
            ));
        }
        if observed.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "observed moments not finite: {observed:?}"
            )));
        }
        let target = Vector3::from_column_slice(observed);
        let scale = target.norm().max(f64::MIN_POSITIVE);
        let defect = |t: &TauParams| (Vector3::from(self.expected(t)) - target).norm() / scale;
        let mut tau = self.initial(observed);
        let mut res = defect(&tau);
        let mut projected = false;
        for it in 0..=MAX_NEWTON_ITERATIONS {
            if res <= INVERSION_TOL {
                return Ok(TauEstimate {
                    tau,
                    residual: res,
                    iterations: it,
                    projected,
                });
            }
            if it == MAX_NEWTON_ITERATIONS {
                break;
            }
            let r = Vector3::from(self.expected(&tau)) - target;
            let step = match self.jacobian(&tau).lu().solve(&r) {
                Some(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => return Err(Error::MomentInversion(res)),
            };
            let mut t = 1.0;
            let mut accepted = None;
            while t > 1e-10 {
                let (cand, clipped) = project(&(tau.to_vector() - step * t));
                let r_new = defect(&cand);
                if r_new < res {
                    accepted = Some((cand, r_new, clipped));
                    break;
                }
                t *= 0.5;
            }
            let Some((cand, r_new, clipped)) = accepted else {
                return Err(Error::MomentInversion(res));
            };
            tau = cand;
            res = r_new;
            projected |= clipped;
        }
        Err(Error::MomentInversion(res))
    }
}

fn project(v: &Vector3<f64>) -> (TauParams, bool) {
    let floors = [MIN_SCALE, MIN_DECAY, MIN_SCALE];
    let mut out = *v;
    let mut clipped = false;
    for i in 0..3 {
        if !(out[i] >= floors[i]) {
            out[i] = floors[i];
            clipped = true;
        }
    }
    (TauParams::from_vector(&out), clipped)
}

/// (Σ_i e^{-τ2 i}, Σ_i e^{-2 τ2 i}) for i = 1..=p.
fn decay_sums(tau2: f64, p: usize) -> (f64, f64) {
    let mut h1 = 0.0;
    let mut h2 = 0.0;
    for i in (1..=p).rev() {
        let v = (-tau2 * i as f64).exp();
        h1 += v;
        h2 += v * v;
    }
    (h1, h2)
}

pub fn expected_moments(tau: &TauParams, design: &NestedDesign, traits: usize) -> Result<Moments> {
    Ok(MomentMap::new(design, traits)?.expected(tau))
}

pub fn estimate_tau(
    observed: &Moments,
    design: &NestedDesign,
    traits: usize,
) -> Result<TauEstimate> {
    MomentMap::new(design, traits)?.invert(observed)
}

/// Between-family model (N = F, levels Σ_A and Σ_E) and within-family model
/// (N = n_s - F, Σ_E only) of a full-sib design.
pub fn full_sib_models(
    design: &NestedDesign,
    traits: usize,
    tau: &TauParams,
) -> Result<(VarianceModel, VarianceModel)> {
    let map = MomentMap::new(design, traits)?;
    if map.within_dof == 0 {
        return Err(Error::InvalidParameter(
            "within-family model needs a family with two or more members".into(),
        ));
    }
    let [sa, se] = tau.covariances(traits);
    let between = VarianceModel::new(
        traits,
        map.families,
        vec![sa, se.clone()],
        scalings_from_design(design),
        &ModelOptions::default(),
    )?;
    let within = VarianceModel::new(
        traits,
        map.within_dof,
        vec![se],
        vec![vec![1.0; map.within_dof]],
        &ModelOptions::default(),
    )?;
    Ok((between, within))
}

/// Functions whose statistics feed the estimator: {x, x²} on B_p, {x} on D_p.
pub fn between_functions() -> Vec<TestFunction> {
    vec![TestFunction::monomial(1), TestFunction::monomial(2)]
}

pub fn within_functions() -> Vec<TestFunction> {
    vec![TestFunction::monomial(1)]
}

/// CLT summaries of the between- and within-family statistics.
pub fn full_sib_summaries(
    design: &NestedDesign,
    traits: usize,
    tau: &TauParams,
    copts: &ContourOptions,
) -> Result<(CltSummary, CltSummary)> {
    let (between, within) = full_sib_models(design, traits, tau)?;
    Ok((
        clt_summary(&between, &between_functions(), copts)?,
        clt_summary(&within, &within_functions(), copts)?,
    ))
}

/// Delta-method bias and two standard deviations of τ̂.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalRow {
    pub bias: [f64; 3],
    pub two_sd: [f64; 3],
    /// Deterministic-equivalent moments ᾱ.
    pub alpha_bar: Moments,
    /// Γ of (Tr B_p, Tr B_p², Tr D_p).
    pub gamma: Moments,
    /// Block-diagonal covariance of the three statistics.
    pub lambda: [[f64; 3]; 3],
    /// F(ᾱ).
    pub tau_at_alpha_bar: [f64; 3],
}

/// bias = F(ᾱ) - τ + J Γ and two_sd = 2 √diag(J Λ Jᵀ), where J is the
/// inverse of the moment Jacobian at F(ᾱ). B_p and D_p are independent, so
/// Λ is block diagonal.
pub fn theoretical_bias_sd(
    design: &NestedDesign,
    traits: usize,
    tau: &TauParams,
    between: &CltSummary,
    within: &CltSummary,
) -> Result<TheoreticalRow> {
    if between.functions != between_functions() || within.functions != within_functions() {
        return Err(Error::InvalidParameter(
            "summaries must cover {x, x^2} on the between matrix and {x} on the within matrix"
                .into(),
        ));
    }
    let map = MomentMap::new(design, traits)?;
    let alpha_bar = [
        between.centering[0],
        between.centering[1],
        within.centering[0],
    ];
    let gamma = [between.gamma[0], between.gamma[1], within.gamma[0]];
    let mut lambda = [[0.0; 3]; 3];
    for a in 0..2 {
        for b in 0..2 {
            lambda[a][b] = between.lambda[a][b];
        }
    }
    lambda[2][2] = within.lambda[0][0];

    let exact = map.expected(tau);
    let scale = exact.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let deterministic = lambda.iter().flatten().all(|v| *v == 0.0)
        && gamma.iter().all(|v| *v == 0.0)
        && alpha_bar
            .iter()
            .zip(&exact)
            .all(|(a, e)| (a - e).abs() <= 1e-12 * scale);
    if deterministic {
        return Ok(TheoreticalRow {
            bias: [0.0; 3],
            two_sd: [0.0; 3],
            alpha_bar,
            gamma,
            lambda,
            tau_at_alpha_bar: [tau.tau1, tau.tau2, tau.tau_e],
        });
    }

    let centre = map.invert(&alpha_bar)?.tau;
    let jac_inv = map.jacobian(&centre).try_inverse().ok_or(Error::Singular {
        what: "moment Jacobian",
        z: num_complex::Complex64::new(0.0, 0.0),
    })?;
    let lam = Matrix3::from_fn(|i, j| lambda[i][j]);
    let cov = jac_inv * lam * jac_inv.transpose();
    let shift = jac_inv * Vector3::from(gamma);
    let truth = tau.to_vector();
    let centre_v = centre.to_vector();
    Ok(TheoreticalRow {
        bias: std::array::from_fn(|i| centre_v[i] - truth[i] + shift[i]),
        two_sd: std::array::from_fn(|i| 2.0 * cov[(i, i)].max(0.0).sqrt()),
        alpha_bar,
        gamma,
        lambda,
        tau_at_alpha_bar: [centre.tau1, centre.tau2, centre.tau_e],
    })
}

/// Settings of the replicated estimation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table1Config {
    /// Number of families F.
    #[serde(rename = "F")]
    pub families: usize,
    /// Number of traits p.
    pub p: usize,
    /// `sibling_probs[i]` is the probability of a family of size `i + 1`.
    pub sibling_probs: Vec<f64>,
    /// Seed of the family-size draw, frozen for all replicates.
    pub design_seed: u64,
    pub tau: TauParams,
    pub replicates: usize,
    pub contour: ContourOptions,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            families: 500,
            p: 500,
            sibling_probs: vec![0.5, 0.5],
            design_seed: 7,
            tau: TauParams {
                tau1: 1.0,
                tau2: 0.3,
                tau_e: 1.0,
            },
            replicates: 1000,
            contour: ContourOptions::default(),
        }
    }
}

impl Table1Config {
    pub fn design(&self) -> Result<NestedDesign> {
        NestedDesign::random_full_sib(self.families, &self.sibling_probs, self.design_seed)
    }
}

/// One replicate: observed traces and, when the inversion succeeds, τ̂.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Replicate {
    pub replicate: usize,
    pub seed: u64,
    pub moments: Moments,
    pub estimate: Option<TauEstimate>,
    /// `ok`, `projected` or the inversion failure.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRow {
    /// Mean of τ̂ - τ over successful replicates.
    pub bias: [f64; 3],
    /// Two sample standard deviations, (R-1) normalization; absent below two.
    pub two_sd: Option<[f64; 3]>,
    /// Monte Carlo standard error of `bias`.
    pub bias_se: Option<[f64; 3]>,
    pub successes: usize,
    pub failures: usize,
    pub projected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Report {
    pub provenance: Provenance,
    pub config: Table1Config,
    pub family_sizes: Vec<usize>,
    pub empirical: EmpiricalRow,
    pub theoretical: TheoreticalRow,
    pub replicates: Vec<Table1Replicate>,
}

fn empirical_row(tau: &TauParams, reps: &[Table1Replicate]) -> EmpiricalRow {
    let ests: Vec<Vector3<f64>> = reps
        .iter()
        .filter_map(|r| r.estimate.map(|e| e.tau.to_vector()))
        .collect();
    let k = ests.len();
    let truth = tau.to_vector();
    let mean = if k == 0 {
        Vector3::repeat(f64::NAN)
    } else {
        ests.iter().sum::<Vector3<f64>>() / k as f64
    };
    let (two_sd, bias_se) = if k >= 2 {
        let var = ests
            .iter()
            .map(|e| (e - mean).component_mul(&(e - mean)))
            .sum::<Vector3<f64>>()
            / (k - 1) as f64;
        (
            Some(std::array::from_fn(|i| 2.0 * var[i].sqrt())),
            Some(std::array::from_fn(|i| (var[i] / k as f64).sqrt())),
        )
    } else {
        (None, None)
    };
    EmpiricalRow {
        bias: std::array::from_fn(|i| mean[i] - truth[i]),
        two_sd,
        bias_se,
        successes: k,
        failures: reps.len() - k,
        projected: reps
            .iter()
            .filter(|r| r.estimate.is_some_and(|e| e.projected))
            .count(),
    }
}

/// Runs the replicated estimation with precomputed CLT summaries.
pub fn table1_with_summaries(
    config: &Table1Config,
    master_seed: u64,
    between: &CltSummary,
    within: &CltSummary,
) -> Result<Table1Report> {
    let design = config.design()?;
    let map = MomentMap::new(&design, config.p)?;
    let theoretical = theoretical_bias_sd(&design, config.p, &config.tau, between, within)?;
    let sigmas = config.tau.covariances(config.p);
    let replicates = (0..config.replicates)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, i as u64);
            let moments: Moments = nested_traces(&design, &sigmas, seed)?.into();
            let (estimate, status) = match map.invert(&moments) {
                Ok(e) => (
                    Some(e),
                    if e.projected {
                        "projected".to_string()
                    } else {
                        "ok".to_string()
                    },
                ),
                Err(err) => (None, err.to_string()),
            };
            Ok(Table1Replicate {
                replicate: i,
                seed,
                moments,
                estimate,
                status,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let empirical = empirical_row(&config.tau, &replicates);
    Ok(Table1Report {
        provenance: Provenance::new(config_hash(config)?, Some(master_seed)),
        config: config.clone(),
        family_sizes: design.group_sizes(0),
        empirical,
        theoretical,
        replicates,
    })
}

pub fn table1_experiment(config: &Table1Config, master_seed: u64) -> Result<Table1Report> {
    let design = config.design()?;
    let (between, within) = full_sib_summaries(&design, config.p, &config.tau, &config.contour)?;
    table1_with_summaries(config, master_seed, &between, &within)
}

const PARAM_NAMES: [&str; 3] = ["tau1", "tau2", "tau_e"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// Row label, bias and 2SD; spreads may be undefined.
type ReportRow = (&'static str, [Option<f64>; 3], [Option<f64>; 3]);

impl Table1Report {
    fn rows(&self) -> [ReportRow; 2] {
        let e = &self.empirical;
        let t = &self.theoretical;
        [
            (
                "Empirical",
                e.bias.map(Some),
                e.two_sd.map_or([None; 3], |s| s.map(Some)),
            ),
            ("Theoretical", t.bias.map(Some), t.two_sd.map(Some)),
        ]
    }

    /// Two-row table: bias then 2SD for τ1, τ2, τ_e.
    pub fn write_table_csv<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.provenance.header_lines().as_bytes())?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend(PARAM_NAMES.iter().map(|p| format!("bias_{p}")));
        header.extend(PARAM_NAMES.iter().map(|p| format!("two_sd_{p}")));
        w.write_record(&header)?;
        for (name, bias, sd) in self.rows() {
            let mut row = vec![name.to_string()];
            row.extend(bias.iter().chain(&sd).map(|v| fmt_opt(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned text version of the two-row table.
    pub fn table_text(&self) -> String {
        let mut s = self.provenance.header_lines();
        let _ = writeln!(
            s,
            "{:<12} {:>12} {:>12} {:>12} | {:>12} {:>12} {:>12}",
            "", "bias tau1", "bias tau2", "bias tau_e", "2SD tau1", "2SD tau2", "2SD tau_e"
        );
        for (name, bias, sd) in self.rows() {
            let cells: Vec<String> = bias.iter().chain(&sd).map(|v| fmt_opt(*v)).collect();
            let _ = writeln!(
                s,
                "{:<12} {:>12} {:>12} {:>12} | {:>12} {:>12} {:>12}",
                name, cells[0], cells[1], cells[2], cells[3], cells[4], cells[5]
            );
        }
        let e = &self.empirical;
        let _ = writeln!(
            s,
            "# replicates: {} ok, {} failed inversion, {} projected",
            e.successes, e.failures, e.projected
        );
        s
    }

    /// Per-replicate table of moments and estimates.
    pub fn write_replicates_csv<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.provenance.header_lines().as_bytes())?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "replicate",
            "seed",
            "tr_b",
            "tr_b2",
            "tr_d",
            "tau1_hat",
            "tau2_hat",
            "tau_e_hat",
            "status",
        ])?;
        for r in &self.replicates {
            let mut row = vec![r.replicate.to_string(), r.seed.to_string()];
            row.extend(r.moments.iter().map(|v| format!("{v:e}")));
            match r.estimate {
                Some(e) => row.extend(e.tau.to_vector().iter().map(|v| format!("{v:e}"))),
                None => row.extend(std::iter::repeat_n(String::new(), 3)),
            }
            row.push(r.status.clone());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Histogram of each estimator over the successful replicates.
    pub fn histograms(&self) -> Vec<(String, String)> {
        (0..3)
            .map(|i| {
                let values: Vec<f64> = self
                    .replicates
                    .iter()
                    .filter_map(|r| r.estimate.map(|e| e.tau.to_vector()[i]))
                    .collect();
                let name = PARAM_NAMES[i];
                (
                    format!("hist_{name}.svg"),
                    histogram_svg(&values, &format!("{name} estimates")),
                )
            })
            .collect()
    }

    /// Writes the table (CSV and text), the replicate CSV, the JSON report
    /// and optionally the histograms into `dir`.
    pub fn save(&self, dir: &Path, svg: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_table_csv(std::fs::File::create(dir.join("table1.csv"))?)?;
        std::fs::write(dir.join("table1.txt"), self.table_text())?;
        self.write_replicates_csv(std::fs::File::create(dir.join("table1_replicates.csv"))?)?;
        std::fs::write(
            dir.join("table1_report.json"),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        if svg {
            for (name, body) in self.histograms() {
                std::fs::write(dir.join(name), body)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> TauParams {
        TauParams::new(1.0, 0.3, 1.0).unwrap()
    }

    fn design(f: usize, seed: u64) -> NestedDesign {
        NestedDesign::random_full_sib(f, &[0.5, 0.5], seed).unwrap()
    }

    #[test]
    fn tau_validation() {
        assert!(TauParams::new(1.0, 0.0, 1.0).is_err());
        assert!(TauParams::new(-1.0, 0.3, 1.0).is_err());
        assert!(TauParams::new(1.0, 1e-6, 1.0).is_ok());
    }

    #[test]
    fn moments_match_direct_trace_sums() {
        let d = NestedDesign::full_sib(&[1, 2, 2, 1, 1]).unwrap();
        let p = 6;
        let tau = TauParams::new(0.8, 0.4, 1.3).unwrap();
        let m = expected_moments(&tau, &d, p).unwrap();
        let sa = exponential_decay(0.8, 0.4, p);
        let sizes = d.group_sizes(0);
        let t: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&s| sa.iter().map(|a| s as f64 * a + 1.3).collect())
            .collect();
        let f = sizes.len() as f64;
        let tr = |x: &Vec<f64>| x.iter().sum::<f64>();
        let tr_prod = |x: &Vec<f64>, y: &Vec<f64>| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let m1 = t.iter().map(tr).sum::<f64>() / f;
        let mut m2 = 0.0;
        for (a, ta) in t.iter().enumerate() {
            m2 += tr(ta).powi(2) + 2.0 * tr_prod(ta, ta);
            for (b, tb) in t.iter().enumerate() {
                if a != b {
                    m2 += tr_prod(ta, tb);
                }
            }
        }
        m2 /= f * f;
        assert!((m[0] - m1).abs() < 1e-12 * m1);
        assert!((m[1] - m2).abs() < 1e-12 * m2);
        assert!((m[2] - 6.0 * 1.3).abs() < 1e-12);
    }

    #[test]
    fn vanishing_family_effect() {
        let d = design(40, 7);
        let m = expected_moments(
            &TauParams {
                tau1: 0.0,
                tau2: 0.3,
                tau_e: 1.0,
            },
            &d,
            50,
        )
        .unwrap();
        assert!((m[0] - 50.0).abs() < 1e-12);
        assert!((m[2] - 50.0).abs() < 1e-12);
        let m2 = expected_moments(
            &TauParams {
                tau1: 0.0,
                tau2: 0.3,
                tau_e: 2.0,
            },
            &d,
            50,
        )
        .unwrap();
        assert_eq!(m2[0], 2.0 * m[0]);
        assert_eq!(m2[2], 2.0 * m[2]);
    }

    #[test]
    fn noiseless_inversion() {
        let d = design(40, 7);
        let m = expected_moments(&truth(), &d, 50).unwrap();
        let e = estimate_tau(&m, &d, 50).unwrap();
        assert!(
            (e.tau.to_vector() - truth().to_vector()).amax() < 1e-8,
            "{:?}",
            e
        );
        assert!(e.residual <= INVERSION_TOL);
    }

    #[test]
    fn perturbed_inversion_is_continuous() {
        let d = design(40, 7);
        let map = MomentMap::new(&d, 50).unwrap();
        let m = map.expected(&truth());
        let mut pert = m;
        pert[1] *= 1.0 + 1e-3;
        let e = map.invert(&pert).unwrap();
        assert!(e.residual <= INVERSION_TOL);
        let back = map.expected(&e.tau);
        let rel = (Vector3::from(back) - Vector3::from(pert)).norm() / Vector3::from(pert).norm();
        assert!(rel <= 1e-10);
        assert!((e.tau.to_vector() - truth().to_vector()).amax() < 0.5);
    }

    #[test]
    fn singleton_families_cannot_identify_noise() {
        let d = NestedDesign::full_sib(&[1, 1, 1]).unwrap();
        let map = MomentMap::new(&d, 4).unwrap();
        assert!(map.invert(&[1.0, 2.0, 0.0]).is_err());
    }

    #[test]
    fn report_with_one_replicate_has_undefined_spread() {
        let reps = vec![Table1Replicate {
            replicate: 0,
            seed: 1,
            moments: [0.0; 3],
            estimate: Some(TauEstimate {
                tau: truth(),
                residual: 0.0,
                iterations: 0,
                projected: false,
            }),
            status: "ok".into(),
        }];
        let row = empirical_row(&truth(), &reps);
        assert!(row.two_sd.is_none());
        assert_eq!(row.bias, [0.0; 3]);
    }
}
