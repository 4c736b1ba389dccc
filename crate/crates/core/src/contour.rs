//! Circular trapezoidal quadrature and assembly of the CLT summary.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clt::{build_kernel, cov_nodes, default_fd_step, mixed_difference, CovMode, CovNode};
use crate::error::{Error, Result};
use crate::fixed_point::{centering_from_stieltjes, solve_along_contour, SolverOptions};
use crate::functions::TestFunction;
use crate::linalg::min_eigenvalue;
use crate::model::{support_bound, VarianceModel};

type C = Complex64;

/// Circle `center + radius e^{iθ_k}` with `θ_k = 2π(k + 1/2)/R`.
///
/// The half-step offset keeps every node off the real axis and makes nodes
/// `k` and `R - 1 - k` complex conjugates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub center: f64,
    pub radius: f64,
    pub nodes: usize,
}

impl Contour {
    pub fn new(center: f64, radius: f64, nodes: usize) -> Result<Self> {
        if !(radius > 0.0) || !center.is_finite() || nodes == 0 {
            return Err(Error::InvalidParameter(format!(
                "contour needs positive radius and nodes, got r={radius}, R={nodes}"
            )));
        }
        Ok(Contour {
            center,
            radius,
            nodes,
        })
    }

    /// Circle around `support_bound` with the given clearance.
    pub fn enclosing(model: &VarianceModel, margin: f64, nodes: usize) -> Result<Self> {
        let (lo, hi) = support_bound(model);
        Contour::new(0.5 * (lo + hi), 0.5 * (hi - lo) + margin, nodes)
    }

    pub fn scaled(&self, ratio: f64) -> Result<Self> {
        Contour::new(self.center, self.radius * ratio, self.nodes)
    }

    pub fn with_nodes(&self, nodes: usize) -> Result<Self> {
        Contour::new(self.center, self.radius, nodes)
    }

    pub fn angle(&self, k: usize) -> f64 {
        2.0 * PI * (k as f64 + 0.5) / self.nodes as f64
    }

    pub fn node(&self, k: usize) -> C {
        C::new(self.center, 0.0) + C::from_polar(self.radius, self.angle(k))
    }

    pub fn all_nodes(&self) -> Vec<C> {
        (0..self.nodes).map(|k| self.node(k)).collect()
    }

    /// Nodes strictly above the real axis, in angular order.
    pub fn upper_nodes(&self) -> Vec<C> {
        (0..self.nodes / 2).map(|k| self.node(k)).collect()
    }

    /// Trapezoid weight `(2πi/R)(z_k - center)`.
    pub fn weight(&self, k: usize) -> C {
        C::new(0.0, 2.0 * PI / self.nodes as f64) * (self.node(k) - self.center)
    }

    /// Whether the closed disc contains `[lo, hi]` with clearance `margin`.
    pub fn encloses(&self, lo: f64, hi: f64, margin: f64) -> bool {
        self.center - self.radius <= lo - margin && self.center + self.radius >= hi + margin
    }

    /// Index of the conjugate partner of node `k`.
    fn partner(&self, k: usize) -> usize {
        self.nodes - 1 - k
    }

    /// Expands values on the upper nodes to all nodes using `u(z̄) = conj u(z)`.
    fn unfold(&self, upper: &[C]) -> Vec<C> {
        (0..self.nodes)
            .map(|k| {
                if k < self.nodes / 2 {
                    upper[k]
                } else {
                    upper[self.partner(k)].conj()
                }
            })
            .collect()
    }

    /// ∮u dz for an integrand with `u(z̄) = conj u(z)`, evaluated on the
    /// upper nodes only. Requires an even node count.
    pub fn integrate_conjugate<F>(&self, mut u: F) -> Result<C>
    where
        F: FnMut(usize, C) -> C,
    {
        self.require_even()?;
        let upper: Vec<C> = self
            .upper_nodes()
            .iter()
            .enumerate()
            .map(|(i, &z)| u(i, z))
            .collect();
        let all = self.unfold(&upper);
        Ok((0..self.nodes).map(|k| self.weight(k) * all[k]).sum())
    }

    /// Same as [`Contour::integrate_conjugate`] plus the value of the rule on
    /// every second node, which quadruples the error of an analytic integrand.
    fn integrate_with_coarse(&self, upper: &[C]) -> (C, C) {
        let all = self.unfold(upper);
        let full = (0..self.nodes).map(|k| self.weight(k) * all[k]).sum();
        let coarse = (0..self.nodes)
            .step_by(2)
            .map(|k| self.weight(k) * all[k] * 2.0)
            .sum();
        (full, coarse)
    }

    fn require_even(&self) -> Result<()> {
        if !self.nodes.is_multiple_of(2) || self.nodes < 2 {
            return Err(Error::InvalidParameter(format!(
                "conjugate-symmetric quadrature needs an even node count, got {}",
                self.nodes
            )));
        }
        Ok(())
    }
}

/// `(2πi/R) Σ_k (z_k - center) u(z_k)`; evaluation errors carry the node index.
pub fn trapezoid<F>(c: &Contour, mut u: F) -> Result<C>
where
    F: FnMut(C) -> Result<C>,
{
    let mut total = C::new(0.0, 0.0);
    for k in 0..c.nodes {
        let v = u(c.node(k)).map_err(|e| Error::at_node(k, e))?;
        total += c.weight(k) * v;
    }
    Ok(total)
}

/// Real part of `value` after checking `|Im| ≤ 1e-6 (1 + |Re|)`.
pub fn real_part(value: C, what: &str) -> Result<f64> {
    if value.im.abs() > 1e-6 * (1.0 + value.re.abs()) || !value.re.is_finite() {
        return Err(Error::ImaginaryResidue {
            what: what.to_string(),
            real: value.re,
            imag: value.im,
        });
    }
    Ok(value.re)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContourOptions {
    pub nodes: usize,
    /// Minimum clearance between the support bound and the first contour.
    pub margin: f64,
    /// Clearance as a fraction of the support half-width; the larger of the
    /// two clearances is used.
    pub relative_margin: f64,
    /// Radius ratio of the second contour to the first.
    pub radius_ratio: f64,
    /// Covariance table mode; chosen from N when absent.
    pub cov_mode: Option<CovMode>,
    /// Finite-difference step; `1e-3 (1 + |z|)` when absent.
    pub fd_step: Option<f64>,
    /// Largest accepted relative gap between the R and R/2 rules.
    pub quadrature_tol: f64,
    pub solver: SolverOptions,
}

impl Default for ContourOptions {
    fn default() -> Self {
        ContourOptions {
            nodes: 128,
            margin: 0.5,
            relative_margin: 0.3,
            radius_ratio: 1.1,
            cov_mode: None,
            fd_step: None,
            quadrature_tol: 1e-6,
            solver: SolverOptions::default(),
        }
    }
}

impl ContourOptions {
    pub fn contours(&self, model: &VarianceModel) -> Result<(Contour, Contour)> {
        if !(self.radius_ratio >= 1.05) {
            return Err(Error::InvalidParameter(format!(
                "paired contours need radius ratio >= 1.05, got {}",
                self.radius_ratio
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.relative_margin >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "relative margin must be nonnegative, got {}",
                self.relative_margin
            )));
        }
        let c1 = Contour::enclosing(model, self.clearance(model), self.nodes)?;
        Ok((c1, c1.scaled(self.radius_ratio)?))
    }

    /// Clearance actually used for `model`.
    pub fn clearance(&self, model: &VarianceModel) -> f64 {
        let (lo, hi) = support_bound(model);
        self.margin.max(self.relative_margin * 0.5 * (hi - lo))
    }
}

fn check_analytic(functions: &[TestFunction], contours: &[&Contour]) -> Result<()> {
    for f in functions {
        if let Some(s) = f.singularity() {
            for c in contours {
                if s >= c.center - c.radius {
                    return Err(Error::InvalidParameter(format!(
                        "{f} is singular at {s}, inside the contour (left crossing {})",
                        c.center - c.radius
                    )));
                }
            }
        }
    }
    Ok(())
}

fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().map(|v| v.abs()).fold(1.0, f64::max);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Γ values with the R/2-rule gap.
fn gamma_with_gap(
    model: &VarianceModel,
    functions: &[TestFunction],
    c: &Contour,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, f64)> {
    c.require_even()?;
    check_analytic(functions, &[c])?;
    let nodes = c.upper_nodes();
    let sols = solve_along_contour(model, &nodes, opts)?;
    let mus = sols
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            build_kernel(model, s)
                .map(|k| k.mu)
                .map_err(|e| Error::at_node(i, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = C::new(0.0, 1.0 / (2.0 * PI));
    let mut full = Vec::new();
    let mut coarse = Vec::new();
    for f in functions {
        let upper: Vec<C> = nodes
            .iter()
            .zip(&mus)
            .map(|(z, m)| f.eval(*z) * m)
            .collect();
        let (a, b) = c.integrate_with_coarse(&upper);
        full.push(real_part(a * scale, &format!("bias of {f}"))?);
        coarse.push((b * scale).re);
    }
    let gap = relative_gap(&full, &coarse);
    Ok((full, gap))
}

/// Γ[i] = -(1/2πi) ∮ f_i(z) μ(z) dz.
pub fn gamma_vector(
    model: &VarianceModel,
    functions: &[TestFunction],
    c: &Contour,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    gamma_with_gap(model, functions, c, opts).map(|(g, _)| g)
}

/// Shifted covariance nodes `z ± h` for the upper nodes of a contour.
fn shifted_nodes(
    model: &VarianceModel,
    c: &Contour,
    mode: CovMode,
    fd_step: Option<f64>,
    opts: &SolverOptions,
) -> Result<(Vec<[CovNode; 2]>, Vec<f64>)> {
    let upper = c.upper_nodes();
    let steps: Vec<f64> = upper
        .iter()
        .map(|z| fd_step.unwrap_or_else(|| default_fd_step(*z)))
        .collect();
    let points: Vec<C> = upper
        .iter()
        .zip(&steps)
        .flat_map(|(z, h)| [z + h, z - h])
        .collect();
    let mut nodes = cov_nodes(model, &points, mode, opts)?.into_iter();
    let mut pairs = Vec::with_capacity(upper.len());
    for _ in 0..upper.len() {
        let a = nodes.next().unwrap();
        let b = nodes.next().unwrap();
        pairs.push([a, b]);
    }
    Ok((pairs, steps))
}

struct LambdaParts {
    full: DMatrix<f64>,
    coarse: DMatrix<f64>,
}

fn lambda_parts(
    model: &VarianceModel,
    functions: &[TestFunction],
    c1: &Contour,
    c2: &Contour,
    copts: &ContourOptions,
) -> Result<LambdaParts> {
    c1.require_even()?;
    c2.require_even()?;
    check_analytic(functions, &[c1, c2])?;
    let mode = copts
        .cov_mode
        .unwrap_or_else(|| CovMode::default_for(model));
    let (n1, h1) = shifted_nodes(model, c1, mode, copts.fd_step, &copts.solver)?;
    let (n2_upper, h2_upper) = shifted_nodes(model, c2, mode, copts.fd_step, &copts.solver)?;
    let r1 = c1.nodes;
    let r2 = c2.nodes;
    // Nodes of the second contour below the axis are conjugates.
    let n2_lower: Vec<[CovNode; 2]> = n2_upper.iter().map(|[a, b]| [a.conj(), b.conj()]).collect();
    let node2 = |l: usize| -> (&[CovNode; 2], f64) {
        if l < r2 / 2 {
            (&n2_upper[l], h2_upper[l])
        } else {
            let p = r2 - 1 - l;
            (&n2_lower[p], h2_upper[p])
        }
    };

    // σ² on (upper nodes of c1) x (all nodes of c2).
    let rows: Vec<Vec<C>> = (0..r1 / 2)
        .into_par_iter()
        .map(|k| {
            (0..r2)
                .map(|l| {
                    let (b, hb) = node2(l);
                    mixed_difference(model, [&n1[k][0], &n1[k][1]], [&b[0], &b[1]], h1[k], hb)
                        .map_err(|e| Error::at_node(k, e))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let sigma = |k: usize, l: usize| -> C {
        if k < r1 / 2 {
            rows[k][l]
        } else {
            rows[r1 - 1 - k][r2 - 1 - l].conj()
        }
    };

    let z1 = c1.all_nodes();
    let z2 = c2.all_nodes();
    let f1: Vec<Vec<C>> = functions
        .iter()
        .map(|f| z1.iter().map(|z| f.eval(*z)).collect())
        .collect();
    let f2: Vec<Vec<C>> = functions
        .iter()
        .map(|f| z2.iter().map(|z| f.eval(*z)).collect())
        .collect();
    let l = functions.len();
    let scale = -1.0 / (2.0 * PI * PI);
    let mut full = DMatrix::<f64>::zeros(l, l);
    let mut coarse = DMatrix::<f64>::zeros(l, l);
    for i in 0..l {
        for j in 0..l {
            let mut acc = C::new(0.0, 0.0);
            let mut acc_coarse = C::new(0.0, 0.0);
            for k in 0..r1 {
                let wk = c1.weight(k) * f1[i][k];
                let mut inner = C::new(0.0, 0.0);
                let mut inner_coarse = C::new(0.0, 0.0);
                for q in 0..r2 {
                    let t = c2.weight(q) * f2[j][q] * sigma(k, q);
                    inner += t;
                    if q % 2 == 0 {
                        inner_coarse += t * 2.0;
                    }
                }
                acc += wk * inner;
                if k % 2 == 0 {
                    acc_coarse += wk * inner_coarse * 2.0;
                }
            }
            full[(i, j)] = real_part(
                acc * scale,
                &format!("covariance of ({}, {})", functions[i], functions[j]),
            )?;
            coarse[(i, j)] = (acc_coarse * scale).re;
        }
    }
    Ok(LambdaParts { full, coarse })
}

/// Λ[i,j] = -(1/2π²) ∮∮ f_i(z1) f_j(z2) σ²(z1, z2) dz1 dz2, symmetrized.
pub fn lambda_matrix(
    model: &VarianceModel,
    functions: &[TestFunction],
    c1: &Contour,
    c2: &Contour,
    copts: &ContourOptions,
) -> Result<DMatrix<f64>> {
    let parts = lambda_parts(model, functions, c1, c2, copts)?;
    finalize_lambda(parts.full)
}

fn finalize_lambda(raw: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (&raw + raw.transpose()) * 0.5;
    let scale = sym.amax().max(1.0);
    if (&raw - raw.transpose()).amax() > 1e-6 * scale {
        return Err(Error::Quadrature(format!(
            "covariance asymmetry {:.3e}",
            (&raw - raw.transpose()).amax()
        )));
    }
    let min = min_eigenvalue(&sym);
    if min < -1e-6 * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(sym)
}

/// Everything needed to center and standardize the LSS vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltSummary {
    pub functions: Vec<TestFunction>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    /// n ∫ f dF^{B̃} for each function.
    pub centering: Vec<f64>,
    pub contours: [Contour; 2],
    pub cov_mode: CovMode,
    pub options: ContourOptions,
    /// Relative change of (Γ, Λ) when every second node is dropped.
    pub quadrature_gap: f64,
    pub lambda_min_eigenvalue: f64,
}

impl CltSummary {
    pub fn lambda_matrix(&self) -> DMatrix<f64> {
        let l = self.functions.len();
        DMatrix::from_fn(l, l, |i, j| self.lambda[i][j])
    }

    /// Summary of the functions selected by `index`, in that order.
    pub fn select(&self, index: &[usize]) -> CltSummary {
        CltSummary {
            functions: index.iter().map(|&i| self.functions[i].clone()).collect(),
            gamma: index.iter().map(|&i| self.gamma[i]).collect(),
            lambda: index
                .iter()
                .map(|&i| index.iter().map(|&j| self.lambda[i][j]).collect())
                .collect(),
            centering: index.iter().map(|&i| self.centering[i]).collect(),
            ..self.clone()
        }
    }
}

pub fn clt_summary(
    model: &VarianceModel,
    functions: &[TestFunction],
    copts: &ContourOptions,
) -> Result<CltSummary> {
    let (c1, c2) = copts.contours(model)?;
    clt_summary_on(model, functions, &c1, &c2, copts)
}

/// Summary on explicit contours.
pub fn clt_summary_on(
    model: &VarianceModel,
    functions: &[TestFunction],
    c1: &Contour,
    c2: &Contour,
    copts: &ContourOptions,
) -> Result<CltSummary> {
    let (lo, hi) = support_bound(model);
    for c in [c1, c2] {
        if !c.encloses(lo, hi, 0.0) {
            return Err(Error::InvalidParameter(format!(
                "contour (center {}, radius {}) does not enclose [{lo}, {hi}]",
                c.center, c.radius
            )));
        }
    }
    check_analytic(functions, &[c1, c2])?;
    c1.require_even()?;
    let mode = copts
        .cov_mode
        .unwrap_or_else(|| CovMode::default_for(model));
    let opts = &copts.solver;

    let sols = solve_along_contour(model, &c1.upper_nodes(), opts)?;
    let stieltjes: Vec<C> = sols.iter().map(|s| s.stieltjes(model)).collect();
    let centering = functions
        .iter()
        .map(|f| centering_from_stieltjes(model, f, c1, &stieltjes))
        .collect::<Result<Vec<_>>>()?;
    let (gamma, gamma_gap) = gamma_with_gap(model, functions, c1, opts)?;
    let parts = lambda_parts(model, functions, c1, c2, copts)?;
    let lambda_gap = {
        let a: Vec<f64> = parts.full.iter().copied().collect();
        let b: Vec<f64> = parts.coarse.iter().copied().collect();
        relative_gap(&a, &b)
    };
    let quadrature_gap = gamma_gap.max(lambda_gap);
    if quadrature_gap > copts.quadrature_tol {
        return Err(Error::Quadrature(format!(
            "R = {} and R/2 rules differ by {quadrature_gap:.3e} (tolerance {:.1e})",
            c1.nodes, copts.quadrature_tol
        )));
    }
    let lambda = finalize_lambda(parts.full)?;
    let lambda_min_eigenvalue = min_eigenvalue(&lambda);
    let l = functions.len();
    Ok(CltSummary {
        functions: functions.to_vec(),
        gamma,
        lambda: (0..l)
            .map(|i| (0..l).map(|j| lambda[(i, j)]).collect())
            .collect(),
        centering,
        contours: [*c1, *c2],
        cov_mode: mode,
        options: ContourOptions {
            cov_mode: Some(mode),
            ..copts.clone()
        },
        quadrature_gap,
        lambda_min_eigenvalue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, SpectrumSpec};

    #[test]
    fn pole_at_center_is_exact() {
        for r in [0.3, 1.0, 7.5] {
            let c = Contour::new(2.0, r, 8).unwrap();
            let v = trapezoid(&c, |z| Ok(1.0 / (z - 2.0))).unwrap();
            assert!((v - C::new(0.0, 2.0 * PI)).norm() < 1e-14);
        }
    }

    #[test]
    fn analytic_monomials_vanish() {
        let c = Contour::new(-1.0, 2.0, 16).unwrap();
        for m in 0..3 {
            let v = trapezoid(&c, |z| Ok((z + 1.0).powu(m))).unwrap();
            assert!(v.norm() < 1e-13, "m={m}: {v}");
        }
    }

    #[test]
    fn interior_pole_converges_geometrically() {
        let c16 = Contour::new(0.0, 1.0, 16).unwrap();
        let c32 = c16.with_nodes(32).unwrap();
        let a = C::new(0.5, 0.0);
        let exact = C::new(0.0, 2.0 * PI);
        let e16 = (trapezoid(&c16, |z| Ok(1.0 / (z - a))).unwrap() - exact).norm();
        let e32 = (trapezoid(&c32, |z| Ok(1.0 / (z - a))).unwrap() - exact).norm();
        assert!(e16 / e32 >= 100.0, "{e16} / {e32}");
        // Error bound 4πM/(r^R - 1) with r = 2 (pole at distance 0.5).
        let bound = |n: i32| 4.0 * PI * 2.0 / (2f64.powi(n) - 1.0);
        assert!(e16 <= bound(16) * 10.0 && e32 <= bound(32) * 10.0);
    }

    #[test]
    fn node_errors_carry_index() {
        let c = Contour::new(0.0, 1.0, 8).unwrap();
        let err = trapezoid(&c, |z| {
            if z.im < 0.0 {
                Err(Error::Singular { what: "test", z })
            } else {
                Ok(z)
            }
        })
        .unwrap_err();
        match err {
            Error::AtNode { index, .. } => assert_eq!(index, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nodes_avoid_axis_and_pair_up() {
        let c = Contour::new(1.0, 2.0, 10).unwrap();
        for k in 0..10 {
            assert!(c.node(k).im.abs() > 0.0);
            assert!((c.node(k).conj() - c.node(9 - k)).norm() < 1e-14);
        }
        assert!(c.upper_nodes().iter().all(|z| z.im > 0.0));
        assert!(Contour::new(0.0, 1.0, 7)
            .unwrap()
            .integrate_conjugate(|_, z| z)
            .is_err());
    }

    #[test]
    fn conjugate_integration_matches_full_rule() {
        let c = Contour::new(0.5, 1.5, 24).unwrap();
        let u = |z: C| (z * z + 1.0) / (z - 0.3);
        let full = trapezoid(&c, |z| Ok(u(z))).unwrap();
        let half = c.integrate_conjugate(|_, z| u(z)).unwrap();
        assert!((full - half).norm() < 1e-13);
    }

    #[test]
    fn zero_model_summary() {
        let m = build_model(
            10,
            12,
            &[SpectrumSpec::ScaledIdentity { tau_e: 0.0 }],
            vec![vec![1.0; 12]],
        )
        .unwrap();
        let fs = [TestFunction::monomial(1), TestFunction::monomial(2)];
        let s = clt_summary(
            &m,
            &fs,
            &ContourOptions {
                nodes: 32,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(s.gamma.iter().all(|g| g.abs() < 1e-12));
        assert!(s.lambda.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(s.centering.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn constant_function_summary() {
        let m = build_model(40, 50, &[SpectrumSpec::identity()], vec![vec![1.0; 50]]).unwrap();
        let fs = [TestFunction::monomial(0)];
        let s = clt_summary(&m, &fs, &ContourOptions::default()).unwrap();
        assert!(
            (s.centering[0] - 40.0).abs() < 1e-8 * 40.0,
            "{}",
            s.centering[0]
        );
        assert!(s.gamma[0].abs() < 1e-8);
        assert!(s.lambda[0][0].abs() < 1e-8);
    }

    #[test]
    fn log_singularity_inside_contour_rejected() {
        let m = build_model(20, 20, &[SpectrumSpec::identity()], vec![vec![1.0; 20]]).unwrap();
        let fs = [TestFunction::ShiftedLog { offset: 0.2 }];
        assert!(matches!(
            clt_summary(&m, &fs, &ContourOptions::default()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn mp_moments() {
        let (n, nn) = (150, 200);
        let m = build_model(n, nn, &[SpectrumSpec::identity()], vec![vec![1.0; nn]]).unwrap();
        let fs = [TestFunction::monomial(1), TestFunction::monomial(2)];
        let s = clt_summary(
            &m,
            &fs,
            &ContourOptions {
                nodes: 64,
                ..Default::default()
            },
        )
        .unwrap();
        let y = n as f64 / nn as f64;
        assert!((s.centering[0] - n as f64).abs() < 1e-6 * n as f64);
        assert!((s.centering[1] - n as f64 * (1.0 + y)).abs() < 1e-6 * n as f64);
        // Var Tr B = 2 N^{-2} Σ_j Tr T_j² = 2n/N.
        let var = 2.0 * n as f64 / nn as f64;
        assert!(
            (s.lambda[0][0] - var).abs() < 0.02 * var,
            "{} vs {var}",
            s.lambda[0][0]
        );
        assert!(s.gamma[0].abs() < 1e-6);
        // E Tr B² - n(1 + y) = n/N exactly for Gaussian entries.
        assert!((s.gamma[1] - y).abs() < 0.02 * y, "{} vs {y}", s.gamma[1]);
    }
}
