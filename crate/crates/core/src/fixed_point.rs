//! Fixed-point system for the deterministic equivalent.
//!
//! At each `z` in the upper half plane the unknowns are `g1[r]`, `g2[r]`,
//! `r = 1..k`, satisfying
//!
//! ```text
//! z g1[r] = -(1/N) Tr((Σ_s g2[s] L_s² + I)^{-1} L_r²)
//! z g2[r] = -(1/N) Tr((Σ_s g1[s] Σ_s + I)^{-1} Σ_r)
//! ```

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::contour::Contour;
use crate::error::{Error, Result};
use crate::functions::TestFunction;
use crate::model::{SigmaRepr, VarianceModel};

type C = Complex64;

const BRANCH_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Convergence threshold on the max entrywise update of `g1`.
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation factor switched on once the update stops shrinking.
    pub damping: Option<f64>,
    /// Polish with Newton steps once the plain iteration is close.
    pub newton: bool,
    /// Cold starts below this imaginary part walk down from it.
    pub continuation_start: f64,
    pub continuation_ratio: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-12,
            max_iter: 10_000,
            damping: Some(0.5),
            newton: true,
            continuation_start: 1.0,
            continuation_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSolution {
    pub z: C,
    pub g1: Vec<C>,
    pub g2: Vec<C>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FixedPointSolution {
    /// m̃(z) through z m̃ = -1 - (N/n) z Σ_r g1[r] g2[r].
    pub fn stieltjes(&self, model: &VarianceModel) -> C {
        let s: C = self.g1.iter().zip(&self.g2).map(|(a, b)| a * b).sum();
        (-1.0 - model.samples() as f64 / model.n() as f64 * self.z * s) / self.z
    }

    pub fn conj(&self) -> Self {
        FixedPointSolution {
            z: self.z.conj(),
            g1: self.g1.iter().map(|v| v.conj()).collect(),
            g2: self.g2.iter().map(|v| v.conj()).collect(),
            ..self.clone()
        }
    }
}

/// Traces of a diagonal-pencil resolvent against the k fixed matrices.
pub(crate) struct SideEval {
    /// Tr(A^{-1} M_r).
    pub traces: Vec<C>,
    /// Tr(A^{-1}).
    pub trace_inv: C,
    /// Tr(A^{-1} M_t A^{-1} M_r).
    pub jac: Option<DMatrix<C>>,
}

/// Σ-side operator `A(g1) = I + Σ_s g1[s] Σ_s`.
pub(crate) enum SigmaOps<'a> {
    Diagonal(&'a [Vec<f64>]),
    Dense(Vec<DMatrix<C>>),
}

impl<'a> SigmaOps<'a> {
    pub fn new(model: &'a VarianceModel) -> Self {
        match model.repr() {
            SigmaRepr::Diagonal(d) => SigmaOps::Diagonal(d),
            SigmaRepr::Dense { mats, .. } => {
                SigmaOps::Dense(mats.iter().map(|m| m.map(|v| C::new(v, 0.0))).collect())
            }
        }
    }

    pub fn eval(&self, g1: &[C], with_jac: bool, z: C) -> Result<SideEval> {
        let k = g1.len();
        match self {
            SigmaOps::Diagonal(d) => {
                let n = d[0].len();
                let mut traces = vec![C::new(0.0, 0.0); k];
                let mut trace_inv = C::new(0.0, 0.0);
                let mut jac = with_jac.then(|| DMatrix::zeros(k, k));
                for i in 0..n {
                    let mut a = C::new(1.0, 0.0);
                    for s in 0..k {
                        a += g1[s] * d[s][i];
                    }
                    if a.norm_sqr() == 0.0 {
                        return Err(Error::Singular {
                            what: "resolvent",
                            z,
                        });
                    }
                    let inv = a.inv();
                    trace_inv += inv;
                    for r in 0..k {
                        traces[r] += inv * d[r][i];
                    }
                    if let Some(j) = jac.as_mut() {
                        let inv2 = inv * inv;
                        for t in 0..k {
                            for r in 0..k {
                                j[(t, r)] += inv2 * (d[t][i] * d[r][i]);
                            }
                        }
                    }
                }
                Ok(SideEval {
                    traces,
                    trace_inv,
                    jac,
                })
            }
            SigmaOps::Dense(mats) => {
                let n = mats[0].nrows();
                let mut a = DMatrix::<C>::identity(n, n);
                for s in 0..k {
                    a += &mats[s] * g1[s];
                }
                let inv = a.try_inverse().ok_or(Error::Singular {
                    what: "resolvent",
                    z,
                })?;
                let trace_inv = inv.trace();
                let x: Vec<DMatrix<C>> = mats.iter().map(|m| &inv * m).collect();
                let traces = x.iter().map(|m| m.trace()).collect();
                let jac =
                    with_jac.then(|| DMatrix::from_fn(k, k, |t, r| trace_of_product(&x[t], &x[r])));
                Ok(SideEval {
                    traces,
                    trace_inv,
                    jac,
                })
            }
        }
    }
}

/// Tr(XY) without forming the product.
pub(crate) fn trace_of_product(x: &DMatrix<C>, y: &DMatrix<C>) -> C {
    let n = x.nrows();
    let mut acc = C::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += x[(i, j)] * y[(j, i)];
        }
    }
    acc
}

/// Scaling-side traces for `I + Σ_s g2[s] L_s²`, summed over sample groups.
pub(crate) fn scaling_side(
    model: &VarianceModel,
    g2: &[C],
    with_jac: bool,
    z: C,
) -> Result<SideEval> {
    let k = g2.len();
    let l2 = model.sq_scalings();
    let groups = model.groups();
    let mut traces = vec![C::new(0.0, 0.0); k];
    let mut trace_inv = C::new(0.0, 0.0);
    let mut jac = with_jac.then(|| DMatrix::zeros(k, k));
    for (g, &j) in groups.representative.iter().enumerate() {
        let mult = groups.size[g] as f64;
        let mut a = C::new(1.0, 0.0);
        for s in 0..k {
            a += g2[s] * l2[s][j];
        }
        if a.norm_sqr() == 0.0 {
            return Err(Error::Singular {
                what: "scaling resolvent",
                z,
            });
        }
        let inv = a.inv();
        trace_inv += inv * mult;
        for r in 0..k {
            traces[r] += inv * (l2[r][j] * mult);
        }
        if let Some(m) = jac.as_mut() {
            let inv2 = inv * inv * mult;
            for t in 0..k {
                for r in 0..k {
                    m[(t, r)] += inv2 * (l2[t][j] * l2[r][j]);
                }
            }
        }
    }
    Ok(SideEval {
        traces,
        trace_inv,
        jac,
    })
}

/// `b̃_j = (1 + Σ_r l_{rj}² g2[r])^{-1}` for every sample.
pub fn sample_weights(model: &VarianceModel, g2: &[C]) -> Vec<C> {
    let l2 = model.sq_scalings();
    (0..model.samples())
        .map(|j| {
            let mut a = C::new(1.0, 0.0);
            for (s, g) in g2.iter().enumerate() {
                a += g * l2[s][j];
            }
            a.inv()
        })
        .collect()
}

struct System<'a> {
    model: &'a VarianceModel,
    sigma: SigmaOps<'a>,
    z: C,
    scale: C,
}

impl<'a> System<'a> {
    fn new(model: &'a VarianceModel, z: C) -> Self {
        System {
            model,
            sigma: SigmaOps::new(model),
            z,
            scale: -1.0 / (z * model.samples() as f64),
        }
    }

    fn g2_from(&self, g1: &[C]) -> Result<Vec<C>> {
        let e = self.sigma.eval(g1, false, self.z)?;
        Ok(e.traces.iter().map(|t| t * self.scale).collect())
    }

    fn g1_from(&self, g2: &[C]) -> Result<Vec<C>> {
        let e = scaling_side(self.model, g2, false, self.z)?;
        Ok(e.traces.iter().map(|t| t * self.scale).collect())
    }

    /// Max defect of both families, evaluated from scratch.
    fn residual(&self, g1: &[C], g2: &[C]) -> Result<f64> {
        let nn = self.model.samples() as f64;
        let s = self.sigma.eval(g1, false, self.z)?;
        let l = scaling_side(self.model, g2, false, self.z)?;
        let mut worst = 0.0f64;
        for r in 0..g1.len() {
            worst = worst.max((self.z * g1[r] + l.traces[r] / nn).norm());
            worst = worst.max((self.z * g2[r] + s.traces[r] / nn).norm());
        }
        Ok(worst)
    }

    /// One Newton step on `Φ(g1) = g1 - G(F(g1))`; returns the step size.
    fn newton_step(&self, g1: &mut [C]) -> Result<f64> {
        let k = g1.len();
        let s = self.sigma.eval(g1, true, self.z)?;
        let g2: Vec<C> = s.traces.iter().map(|t| t * self.scale).collect();
        let l = scaling_side(self.model, &g2, true, self.z)?;
        let phi: Vec<C> = (0..k).map(|r| g1[r] - l.traces[r] * self.scale).collect();
        // dF[r,t] = -scale * Tr(A⁻¹Σ_tA⁻¹Σ_r), dG likewise on the scaling side.
        let df = s.jac.unwrap() * (-self.scale);
        let dg = l.jac.unwrap() * (-self.scale);
        let jac = DMatrix::<C>::identity(k, k) - dg * df;
        let rhs = nalgebra::DVector::from_iterator(k, phi.iter().map(|v| -v));
        let delta = jac.lu().solve(&rhs).ok_or(Error::Singular {
            what: "Newton",
            z: self.z,
        })?;
        let mut step = 0.0f64;
        for r in 0..k {
            g1[r] += delta[r];
            step = step.max(delta[r].norm());
        }
        Ok(step)
    }
}

fn on_branch(g1: &[C], g2: &[C]) -> bool {
    g1.iter()
        .chain(g2)
        .all(|g| g.im >= -BRANCH_SLACK * (1.0 + g.norm()) && g.is_finite())
}

fn iterate(
    model: &VarianceModel,
    z: C,
    init: &[C],
    opts: &SolverOptions,
) -> Result<FixedPointSolution> {
    let sys = System::new(model, z);
    let k = model.levels();
    let mut g1 = init.to_vec();
    let mut trajectory = Vec::new();
    let mut damped = false;
    let mut prev_update = f64::INFINITY;
    let mut newton_tried_at = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let g2 = sys.g2_from(&g1)?;
        let next = sys.g1_from(&g2)?;
        let update = (0..k).map(|r| (next[r] - g1[r]).norm()).fold(0.0, f64::max);
        trajectory.push(update);
        if !update.is_finite() {
            break;
        }
        if opts.damping.is_some() && update >= prev_update && iterations > 2 {
            damped = true;
        }
        match (damped, opts.damping) {
            (true, Some(w)) => {
                for r in 0..k {
                    let d = next[r] - g1[r];
                    g1[r] += d * w;
                }
            }
            _ => g1 = next,
        }
        if update <= opts.tol {
            converged = true;
            break;
        }
        // Newton from a nearby point converges quadratically; one attempt per
        // decade of progress keeps a failed attempt from repeating.
        if opts.newton && update < 1e-4 && update < 0.1 * newton_tried_at {
            newton_tried_at = update;
            if let Some(polished) = polish(&sys, &g1, opts.tol) {
                g1 = polished;
                converged = true;
                break;
            }
        }
        prev_update = update;
    }

    let g2 = sys.g2_from(&g1)?;
    let residual = sys.residual(&g1, &g2)?;
    if !converged || !on_branch(&g1, &g2) {
        return Err(Error::NonConvergence {
            z,
            iterations,
            residual,
            trajectory: tail(trajectory, 64),
        });
    }
    Ok(FixedPointSolution {
        z,
        g1,
        g2,
        residual,
        iterations,
        converged: true,
    })
}

fn polish(sys: &System<'_>, start: &[C], tol: f64) -> Option<Vec<C>> {
    let mut g1 = start.to_vec();
    let mut prev_step = f64::INFINITY;
    for _ in 0..30 {
        let step = sys.newton_step(&mut g1).ok()?;
        if !step.is_finite() {
            return None;
        }
        let size = g1.iter().map(|v| v.norm()).fold(1.0, f64::max);
        // Quadratic convergence ends either below tolerance or in roundoff,
        // where the steps stop shrinking.
        let stalled = step <= 1e-10 * size && step > 0.5 * prev_step;
        if step <= 1e-15 * size || step <= 0.01 * tol || stalled {
            break;
        }
        prev_step = step;
    }
    let g2 = sys.g2_from(&g1).ok()?;
    let next = sys.g1_from(&g2).ok()?;
    let update = g1
        .iter()
        .zip(&next)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    (update <= tol && on_branch(&g1, &g2)).then_some(g1)
}

fn tail(v: Vec<f64>, keep: usize) -> Vec<f64> {
    let start = v.len().saturating_sub(keep);
    v[start..].to_vec()
}

/// Solves the system at `z` from the default start `g1 = i`.
pub fn solve_system(
    model: &VarianceModel,
    z: C,
    opts: &SolverOptions,
) -> Result<FixedPointSolution> {
    if !(z.im > 0.0) {
        return Err(Error::NotUpperHalfPlane { z });
    }
    let start = vec![C::new(0.0, 1.0); model.levels()];
    if z.im >= opts.continuation_start {
        return iterate(model, z, &start, opts);
    }
    // Walk down in Im z, warm-starting each leg.
    let mut im = opts.continuation_start;
    let mut g1 = start;
    let mut total = 0;
    while im > z.im {
        let sol = iterate(model, C::new(z.re, im), &g1, opts)?;
        total += sol.iterations;
        g1 = sol.g1;
        im *= opts.continuation_ratio;
    }
    let mut sol = iterate(model, z, &g1, opts)?;
    sol.iterations += total;
    Ok(sol)
}

/// Solves at `z` starting from `init`, falling back to a cold start.
pub fn solve_warm(
    model: &VarianceModel,
    z: C,
    init: &[C],
    opts: &SolverOptions,
) -> Result<FixedPointSolution> {
    if !(z.im > 0.0) {
        return Err(Error::NotUpperHalfPlane { z });
    }
    iterate(model, z, init, opts).or_else(|_| solve_system(model, z, opts))
}

/// Solves at every node; lower-half-plane nodes are served by conjugation.
pub fn solve_along_contour(
    model: &VarianceModel,
    nodes: &[C],
    opts: &SolverOptions,
) -> Result<Vec<FixedPointSolution>> {
    let mut upper: Vec<FixedPointSolution> = Vec::new();
    let mut out = Vec::with_capacity(nodes.len());
    for (idx, &z) in nodes.iter().enumerate() {
        let target = if z.im < 0.0 { z.conj() } else { z };
        if target.im == 0.0 {
            return Err(Error::at_node(idx, Error::NotUpperHalfPlane { z }));
        }
        let sol = match upper.iter().find(|s| s.z == target) {
            Some(s) => s.clone(),
            None => {
                let nearest = upper
                    .iter()
                    .min_by(|a, b| (a.z - target).norm().total_cmp(&(b.z - target).norm()));
                let sol = match nearest {
                    Some(s) => solve_warm(model, target, &s.g1, opts),
                    None => solve_system(model, target, opts),
                }
                .map_err(|e| Error::at_node(idx, e))?;
                upper.push(sol.clone());
                sol
            }
        };
        out.push(if z.im < 0.0 { sol.conj() } else { sol });
    }
    Ok(out)
}

/// B̃(z) = -z Σ_r g1[r] Σ_r together with its Stieltjes transform.
#[derive(Debug, Clone)]
pub struct DeterministicEquivalent {
    pub z: C,
    pub matrix: DMatrix<C>,
    pub stieltjes: C,
    /// The four equivalent expressions of m̃: resolvent trace, Σ-side trace,
    /// bilinear form and scaling-side trace.
    pub forms: [C; 4],
}

impl DeterministicEquivalent {
    pub fn max_discrepancy(&self) -> f64 {
        self.forms
            .iter()
            .map(|f| (f - self.forms[0]).norm())
            .fold(0.0, f64::max)
    }
}

pub fn deterministic_equivalent(
    model: &VarianceModel,
    sol: &FixedPointSolution,
) -> Result<DeterministicEquivalent> {
    if !sol.converged {
        return Err(Error::NotConverged(sol.z));
    }
    let z = sol.z;
    let n = model.n();
    let nf = n as f64;
    let ratio = model.samples() as f64 / nf;
    let mut matrix = DMatrix::<C>::zeros(n, n);
    for (r, s) in model.sigmas().iter().enumerate() {
        let w = -z * sol.g1[r];
        match s {
            crate::model::Covariance::Diagonal(d) => {
                for i in 0..n {
                    matrix[(i, i)] += w * d[i];
                }
            }
            crate::model::Covariance::Dense(m) => {
                matrix += m.map(|v| w * v);
            }
        }
    }

    let resolvent_trace = if model.is_diagonal() {
        (0..n).map(|i| (matrix[(i, i)] - z).inv()).sum::<C>()
    } else {
        let shifted = &matrix - DMatrix::<C>::identity(n, n) * z;
        shifted
            .try_inverse()
            .ok_or(Error::Singular {
                what: "deterministic equivalent",
                z,
            })?
            .trace()
    };
    let sigma = SigmaOps::new(model).eval(&sol.g1, false, z)?;
    let scaling = scaling_side(model, &sol.g2, false, z)?;
    let bilinear: C = sol.g1.iter().zip(&sol.g2).map(|(a, b)| a * b).sum();

    let forms = [
        resolvent_trace / nf,
        -sigma.trace_inv / (nf * z),
        (-1.0 - ratio * z * bilinear) / z,
        (-1.0 + ratio - scaling.trace_inv / nf) / z,
    ];
    let de = DeterministicEquivalent {
        z,
        matrix,
        stieltjes: forms[0],
        forms,
    };
    let gap = de.max_discrepancy();
    if gap > 1e-8 * (1.0 + forms[0].norm()) {
        return Err(Error::Inconsistent(gap));
    }
    Ok(de)
}

/// Spectral density by Stieltjes inversion, `ρ(x) ≈ Im m̃(x + iη) / π`.
pub fn esd_density(
    model: &VarianceModel,
    x_grid: &[f64],
    eta: f64,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eta must be positive, got {eta}"
        )));
    }
    let mut prev: Option<FixedPointSolution> = None;
    let mut out = Vec::with_capacity(x_grid.len());
    for (idx, &x) in x_grid.iter().enumerate() {
        let z = C::new(x, eta);
        let sol = match &prev {
            Some(p) => solve_warm(model, z, &p.g1, opts),
            None => solve_system(model, z, opts),
        }
        .map_err(|e| Error::at_node(idx, e))?;
        out.push((sol.stieltjes(model).im / std::f64::consts::PI).max(0.0));
        prev = Some(sol);
    }
    Ok(out)
}

/// n ∫ f dF^{B̃} = -(1/2πi) ∮ f(z) n m̃(z) dz.
pub fn lss_centering(
    model: &VarianceModel,
    f: &TestFunction,
    contour: &Contour,
    opts: &SolverOptions,
) -> Result<f64> {
    let sols = solve_along_contour(model, &contour.upper_nodes(), opts)?;
    let stieltjes: Vec<C> = sols.iter().map(|s| s.stieltjes(model)).collect();
    centering_from_stieltjes(model, f, contour, &stieltjes)
}

pub(crate) fn centering_from_stieltjes(
    model: &VarianceModel,
    f: &TestFunction,
    contour: &Contour,
    upper_stieltjes: &[C],
) -> Result<f64> {
    let nf = model.n() as f64;
    let integral = contour.integrate_conjugate(|i, z| f.eval(z) * upper_stieltjes[i] * nf)?;
    let value = integral / C::new(0.0, -2.0 * std::f64::consts::PI);
    crate::contour::real_part(value, &format!("centering of {f}"))
}
