//! Deterministic CLT ingredients: the bias kernel μ(z) and the covariance
//! kernel S(z1, z2) whose mixed derivative is σ²(z1, z2).

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::{sample_weights, solve_along_contour, FixedPointSolution, SolverOptions};
use crate::linalg::{solve_left, solve_row_identity_minus};
use crate::model::{SigmaRepr, VarianceModel};

type C = Complex64;

fn zero() -> C {
    C::new(0.0, 0.0)
}

/// A k x k x k complex table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table3 {
    k: usize,
    data: Vec<C>,
}

impl Table3 {
    pub fn zeros(k: usize) -> Self {
        Table3 {
            k,
            data: vec![zero(); k * k * k],
        }
    }

    pub fn get(&self, a: usize, b: usize, c: usize) -> C {
        self.data[(a * self.k + b) * self.k + c]
    }

    fn set(&mut self, a: usize, b: usize, c: usize, v: C) {
        self.data[(a * self.k + b) * self.k + c] = v;
    }
}

/// Factored R̃(z) = Σ_s β_s Σ_s - z I.
#[derive(Debug, Clone)]
pub(crate) enum Resolvent {
    /// Diagonal of R̃^{-1}.
    Diagonal(Vec<C>),
    /// R̃^{-1} and the products R̃^{-1} Σ_a.
    Dense {
        inv: DMatrix<C>,
        products: Vec<DMatrix<C>>,
    },
}

impl Resolvent {
    fn new(model: &VarianceModel, weights: &[C], z: C) -> Result<Self> {
        match model.repr() {
            SigmaRepr::Diagonal(d) => {
                let n = model.n();
                let mut inv = Vec::with_capacity(n);
                for i in 0..n {
                    let mut r = -z;
                    for (s, w) in weights.iter().enumerate() {
                        r += w * d[s][i];
                    }
                    if r.norm_sqr() == 0.0 {
                        return Err(Error::Singular { what: "R̃", z });
                    }
                    inv.push(r.inv());
                }
                Ok(Resolvent::Diagonal(inv))
            }
            SigmaRepr::Dense { mats, .. } => {
                let n = model.n();
                let mut r = DMatrix::<C>::identity(n, n) * (-z);
                for (s, w) in weights.iter().enumerate() {
                    r += mats[s].map(|v| w * v);
                }
                let inv = r.try_inverse().ok_or(Error::Singular { what: "R̃", z })?;
                let products = mats
                    .iter()
                    .map(|m| &inv * m.map(|v| C::new(v, 0.0)))
                    .collect();
                Ok(Resolvent::Dense { inv, products })
            }
        }
    }

    fn conj(&self) -> Self {
        match self {
            Resolvent::Diagonal(d) => Resolvent::Diagonal(d.iter().map(|v| v.conj()).collect()),
            Resolvent::Dense { inv, products } => Resolvent::Dense {
                inv: inv.map(|v| v.conj()),
                products: products.iter().map(|p| p.map(|v| v.conj())).collect(),
            },
        }
    }
}

fn trace_prod(x: &DMatrix<C>, y: &DMatrix<C>) -> C {
    crate::fixed_point::trace_of_product(x, y)
}

/// Deterministic bias tables at one point z.
#[derive(Debug, Clone)]
pub struct CltKernel {
    pub z: C,
    /// b̃_j(z) for each sample.
    pub bj: Vec<C>,
    /// β_s = (1/N) Σ_j l_{sj}² b̃_j.
    pub beta: Vec<C>,
    pub xi0: Vec<C>,
    pub xi1: DMatrix<C>,
    pub xi2: DMatrix<C>,
    pub xi3: Table3,
    pub h_n1: DMatrix<C>,
    pub h3: Table3,
    pub zeta1: DMatrix<C>,
    pub zeta2: DMatrix<C>,
    pub zeta3: Table3,
    /// d̃_0, d̃_1..d̃_k.
    pub dn: Vec<C>,
    pub nu: Vec<C>,
    pub mu: C,
    aspect: f64,
}

/// Re-substitution defects of the kernel's linear systems.
#[derive(Debug, Clone, Copy)]
pub struct KernelDefects {
    pub zeta1: f64,
    pub zeta2: f64,
    pub zeta3: f64,
    pub nu: f64,
}

impl KernelDefects {
    pub fn max(&self) -> f64 {
        self.zeta1.max(self.zeta2).max(self.zeta3).max(self.nu)
    }
}

pub fn build_kernel(model: &VarianceModel, sol: &FixedPointSolution) -> Result<CltKernel> {
    if !sol.converged {
        return Err(Error::NotConverged(sol.z));
    }
    let z = sol.z;
    let k = model.levels();
    let nn = model.samples() as f64;
    let l2 = model.sq_scalings();
    let groups = model.groups();
    let bj = sample_weights(model, &sol.g2);

    let mut beta = vec![zero(); k];
    let mut h_n1 = DMatrix::<C>::zeros(k, k);
    let mut h3 = Table3::zeros(k);
    for (g, &j) in groups.representative.iter().enumerate() {
        let mult = groups.size[g] as f64 / nn;
        let b = bj[j];
        let (b2, b3) = (b * b, b * b * b);
        for a in 0..k {
            beta[a] += b * (l2[a][j] * mult);
            for c in 0..k {
                let lac = l2[a][j] * l2[c][j] * mult;
                h_n1[(a, c)] += b2 * lac;
                for d in 0..k {
                    let v = h3.get(a, c, d) + b3 * (lac * l2[d][j]);
                    h3.set(a, c, d, v);
                }
            }
        }
    }

    let rt = Resolvent::new(model, &beta, z)?;
    let mut xi0 = vec![zero(); k];
    let mut xi1 = DMatrix::<C>::zeros(k, k);
    let mut xi2 = DMatrix::<C>::zeros(k, k);
    let mut xi3 = Table3::zeros(k);
    match (&rt, model.repr()) {
        (Resolvent::Diagonal(r), SigmaRepr::Diagonal(d)) => {
            for i in 0..model.n() {
                let r1 = r[i];
                let (r2, r3) = (r1 * r1, r1 * r1 * r1);
                for a in 0..k {
                    let sa = d[a][i];
                    xi0[a] += r2 * sa;
                    for b in 0..k {
                        let sab = sa * d[b][i];
                        xi1[(a, b)] += r2 * sab;
                        xi2[(a, b)] += r3 * sab;
                        for c in 0..k {
                            let v = xi3.get(a, b, c) + r3 * (sab * d[c][i]);
                            xi3.set(a, b, c, v);
                        }
                    }
                }
            }
        }
        (Resolvent::Dense { inv, products }, _) => {
            let with_inv: Vec<DMatrix<C>> = products.iter().map(|p| p * inv).collect();
            for a in 0..k {
                xi0[a] = trace_prod(&products[a], inv);
                for b in 0..k {
                    xi1[(a, b)] = trace_prod(&products[a], &products[b]);
                    xi2[(a, b)] = trace_prod(&with_inv[a], &products[b]);
                    let ab = &products[a] * &products[b];
                    for c in 0..k {
                        xi3.set(a, b, c, trace_prod(&ab, &products[c]));
                    }
                }
            }
        }
        _ => unreachable!("resolvent storage follows the model"),
    }
    for v in xi0.iter_mut() {
        *v /= nn;
    }
    xi1 /= C::new(nn, 0.0);
    xi2 /= C::new(nn, 0.0);
    for v in xi3.data.iter_mut() {
        *v /= nn;
    }

    // ζ1 (I - h Ξ1ᵀ) = Ξ1.
    let system = DMatrix::<C>::identity(k, k) - &h_n1 * xi1.transpose();
    let lu = system.transpose().lu();
    let zeta1_t = lu
        .solve(&xi1.transpose())
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(Error::Singular { what: "zeta", z })?;
    let zeta1 = zeta1_t.transpose();
    let zeta2 = &xi2 + &zeta1 * (&h_n1 * xi2.transpose());
    let mut zeta3 = Table3::zeros(k);
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                let mut v = xi3.get(a, b, c);
                for r in 0..k {
                    for s in 0..k {
                        v += h_n1[(r, s)] * zeta1[(a, r)] * xi3.get(b, c, s);
                    }
                }
                zeta3.set(a, b, c, v);
            }
        }
    }

    let mut dn = vec![zero(); k + 1];
    for a in 0..k {
        for b in 0..k {
            dn[0] += h_n1[(a, b)] * zeta2[(a, b)];
            for c in 0..k {
                dn[0] -= h3.get(a, b, c) * zeta1[(a, b)] * xi0[c];
            }
        }
    }
    for r in 0..k {
        let mut v = zero();
        for a in 0..k {
            for b in 0..k {
                v += h_n1[(a, b)] * zeta3.get(a, r, b);
                for c in 0..k {
                    v -= h3.get(a, b, c) * zeta1[(a, b)] * xi1[(c, r)];
                }
            }
        }
        dn[r + 1] = v;
    }

    // ν (I - hᵀ Ξ1) = (n/N) d̃.
    let aspect = model.aspect_ratio();
    let q = h_n1.transpose() * &xi1;
    let rhs: Vec<C> = dn[1..].iter().map(|d| d * aspect).collect();
    let nu = solve_left(&(DMatrix::<C>::identity(k, k) - q), &rhs)
        .ok_or(Error::Singular { what: "nu", z })?;

    let h_xi0 = &h_n1 * nalgebra::DVector::from_column_slice(&xi0);
    let mut mu = dn[0];
    for r in 0..k {
        mu += nu[r] * h_xi0[r] / aspect;
    }

    Ok(CltKernel {
        z,
        bj,
        beta,
        xi0,
        xi1,
        xi2,
        xi3,
        h_n1,
        h3,
        zeta1,
        zeta2,
        zeta3,
        dn,
        nu,
        mu,
        aspect,
    })
}

impl CltKernel {
    /// Plugs the solutions back into their defining equations term by term.
    pub fn defects(&self) -> KernelDefects {
        let k = self.nu.len();
        let h = &self.h_n1;
        let mut d1 = 0.0f64;
        let mut d2 = 0.0f64;
        let mut d3 = 0.0f64;
        for a in 0..k {
            for b in 0..k {
                let mut e1 = self.xi1[(a, b)];
                let mut e2 = self.xi2[(a, b)];
                for r in 0..k {
                    for s in 0..k {
                        e1 += h[(r, s)] * self.zeta1[(a, r)] * self.xi1[(b, s)];
                        e2 += h[(r, s)] * self.zeta1[(a, r)] * self.xi2[(b, s)];
                    }
                }
                d1 = d1.max((e1 - self.zeta1[(a, b)]).norm());
                d2 = d2.max((e2 - self.zeta2[(a, b)]).norm());
                for c in 0..k {
                    let mut e3 = self.xi3.get(a, b, c);
                    for r in 0..k {
                        for s in 0..k {
                            e3 += h[(r, s)] * self.zeta1[(a, r)] * self.xi3.get(b, c, s);
                        }
                    }
                    d3 = d3.max((e3 - self.zeta3.get(a, b, c)).norm());
                }
            }
        }
        let mut dnu = 0.0f64;
        for r in 0..k {
            let mut e = self.dn[r + 1] * self.aspect;
            for t in 0..k {
                for s in 0..k {
                    e += self.nu[t] * h[(s, t)] * self.xi1[(s, r)];
                }
            }
            dnu = dnu.max((e - self.nu[r]).norm());
        }
        KernelDefects {
            zeta1: d1,
            zeta2: d2,
            zeta3: d3,
            nu: dnu,
        }
    }
}

/// Writes one audit row per kernel: z, fixed-point residual, μ, d̃ and ν.
pub fn write_kernel_diagnostics<W: Write>(
    out: W,
    rows: &[(FixedPointSolution, CltKernel)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = rows.first().map_or(0, |(s, _)| s.g1.len());
    let mut header = vec![
        "z_re".to_string(),
        "z_im".into(),
        "residual".into(),
        "mu_re".into(),
        "mu_im".into(),
    ];
    for r in 0..=k {
        header.push(format!("d{r}_re"));
        header.push(format!("d{r}_im"));
    }
    for r in 1..=k {
        header.push(format!("nu{r}_re"));
        header.push(format!("nu{r}_im"));
    }
    w.write_record(&header)?;
    for (sol, ker) in rows {
        let mut rec = vec![
            sol.z.re.to_string(),
            sol.z.im.to_string(),
            format!("{:e}", sol.residual),
            ker.mu.re.to_string(),
            ker.mu.im.to_string(),
        ];
        for v in ker.dn.iter().chain(&ker.nu) {
            rec.push(v.re.to_string());
            rec.push(v.im.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Which resolvent the per-sample covariance tables use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovMode {
    /// R̃_j = R̃ - N^{-1} b̃_j T_j for every sample.
    ExactLeaveOneOut,
    /// The full R̃ for every sample.
    #[serde(rename = "shared-r")]
    SharedResolvent,
}

impl CovMode {
    pub fn default_for(model: &VarianceModel) -> Self {
        if model.samples() >= 200 {
            CovMode::SharedResolvent
        } else {
            CovMode::ExactLeaveOneOut
        }
    }
}

/// Per-point data reused across all pairs that involve the point.
#[derive(Debug, Clone)]
pub struct CovNode {
    pub z: C,
    pub mode: CovMode,
    bj: Vec<C>,
    /// One resolvent per scaling group in exact mode, a single one otherwise.
    resolvents: Vec<Resolvent>,
}

impl CovNode {
    pub fn new(model: &VarianceModel, sol: &FixedPointSolution, mode: CovMode) -> Result<Self> {
        if !sol.converged {
            return Err(Error::NotConverged(sol.z));
        }
        let k = model.levels();
        let nn = model.samples() as f64;
        let l2 = model.sq_scalings();
        let groups = model.groups();
        let bj = sample_weights(model, &sol.g2);
        let mut beta = vec![zero(); k];
        for j in 0..model.samples() {
            for s in 0..k {
                beta[s] += bj[j] * l2[s][j];
            }
        }
        for b in beta.iter_mut() {
            *b /= nn;
        }
        let resolvents = match mode {
            CovMode::SharedResolvent => vec![Resolvent::new(model, &beta, sol.z)?],
            CovMode::ExactLeaveOneOut => groups
                .representative
                .iter()
                .map(|&j| {
                    let w: Vec<C> = (0..k).map(|s| beta[s] - bj[j] * l2[s][j] / nn).collect();
                    Resolvent::new(model, &w, sol.z)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(CovNode {
            z: sol.z,
            mode,
            bj,
            resolvents,
        })
    }

    pub fn conj(&self) -> Self {
        CovNode {
            z: self.z.conj(),
            mode: self.mode,
            bj: self.bj.iter().map(|v| v.conj()).collect(),
            resolvents: self.resolvents.iter().map(|r| r.conj()).collect(),
        }
    }
}

/// Ξ^{ab} = (1/N) Tr[R̃^{-1}(z2) Σ_a R̃^{-1}(z1) Σ_b], row-major.
fn xi_between(model: &VarianceModel, r1: &Resolvent, r2: &Resolvent) -> Vec<C> {
    let k = model.levels();
    let nn = model.samples() as f64;
    let mut out = vec![zero(); k * k];
    match (r1, r2, model.repr()) {
        (Resolvent::Diagonal(a), Resolvent::Diagonal(b), SigmaRepr::Diagonal(d)) => {
            for i in 0..a.len() {
                let p = a[i] * b[i];
                for x in 0..k {
                    let px = p * d[x][i];
                    for y in x..k {
                        out[x * k + y] += px * d[y][i];
                    }
                }
            }
            for x in 0..k {
                for y in 0..x {
                    out[x * k + y] = out[y * k + x];
                }
            }
        }
        (Resolvent::Dense { products: p1, .. }, Resolvent::Dense { products: p2, .. }, _) => {
            for x in 0..k {
                for y in 0..k {
                    out[x * k + y] = trace_prod(&p2[x], &p1[y]);
                }
            }
        }
        _ => unreachable!("resolvent storage follows the model"),
    }
    for v in out.iter_mut() {
        *v /= nn;
    }
    out
}

/// Full per-sample covariance tables at one pair of points.
#[derive(Debug, Clone)]
pub struct CovKernelPoint {
    pub z1: C,
    pub z2: C,
    pub mode: CovMode,
    /// Ξ^{ab}_j, row-major k x k per sample.
    pub xi_j: Vec<Vec<C>>,
    /// h^{ab}_j, summing samples i < j.
    pub h_j: Vec<Vec<C>>,
    /// Λ^{ab}_j = Σ_r h^{ra}_j Ξ^{rb}_j.
    pub lambda_j: Vec<Vec<C>>,
    /// w̃_{jr}.
    pub w: Vec<Vec<C>>,
    pub s_raw: C,
}

impl CovKernelPoint {
    /// Largest defect of the w̃ systems, re-evaluated from the stored tables.
    pub fn w_defect(&self, model: &VarianceModel) -> f64 {
        let k = model.levels();
        let l2 = model.sq_scalings();
        let mut worst = 0.0f64;
        for j in 0..self.w.len() {
            for r in 0..k {
                let mut e = zero();
                for s in 0..k {
                    e += self.xi_j[j][s * k + r] * l2[s][j];
                    e += self.w[j][s] * self.lambda_j[j][s * k + r];
                }
                worst = worst.max((e - self.w[j][r]).norm());
            }
        }
        worst
    }
}

struct Accumulator<'a> {
    record: Option<&'a mut CovKernelPoint>,
}

fn s_raw_impl(
    model: &VarianceModel,
    n1: &CovNode,
    n2: &CovNode,
    mut acc: Accumulator<'_>,
) -> Result<C> {
    if n1.mode != n2.mode {
        return Err(Error::InvalidParameter(
            "covariance mode mismatch between points".into(),
        ));
    }
    let k = model.levels();
    let nn = model.samples() as f64;
    let l2 = model.sq_scalings();
    let groups = model.groups();
    let xis: Vec<Vec<C>> = n1
        .resolvents
        .iter()
        .zip(&n2.resolvents)
        .map(|(a, b)| xi_between(model, a, b))
        .collect();
    let mut h = vec![zero(); k * k];
    let mut lam = vec![zero(); k * k];
    let mut rhs = vec![zero(); k];
    let mut w = vec![zero(); k];
    let mut scratch = Vec::new();
    let mut total = zero();
    for j in 0..model.samples() {
        let xi = match n1.mode {
            CovMode::SharedResolvent => &xis[0],
            CovMode::ExactLeaveOneOut => &xis[groups.index[j]],
        };
        for a in 0..k {
            for b in 0..k {
                let mut v = zero();
                for r in 0..k {
                    v += h[r * k + a] * xi[r * k + b];
                }
                lam[a * k + b] = v;
            }
            let mut v = zero();
            for s in 0..k {
                v += xi[s * k + a] * l2[s][j];
            }
            rhs[a] = v;
        }
        if !solve_row_identity_minus(&lam, &rhs, &mut w, &mut scratch) {
            return Err(Error::Singular { what: "w", z: n1.z });
        }
        let bb = n1.bj[j] * n2.bj[j];
        let mut term = zero();
        for r in 0..k {
            term += w[r] * l2[r][j];
        }
        total += term * bb;
        if let Some(rec) = acc.record.as_mut() {
            rec.xi_j.push(xi.clone());
            rec.h_j.push(h.clone());
            rec.lambda_j.push(lam.clone());
            rec.w.push(w.clone());
        }
        let bbn = bb / nn;
        for a in 0..k {
            for b in 0..k {
                h[a * k + b] += bbn * (l2[a][j] * l2[b][j]);
            }
        }
    }
    Ok(total / nn)
}

/// S(z1, z2) = N^{-1} Σ_j Σ_r l_{rj}² b̃_j(z1) b̃_j(z2) w̃_{jr}(z1, z2).
pub fn s_raw(model: &VarianceModel, n1: &CovNode, n2: &CovNode) -> Result<C> {
    s_raw_impl(model, n1, n2, Accumulator { record: None })
}

pub fn cov_point(
    model: &VarianceModel,
    sol1: &FixedPointSolution,
    sol2: &FixedPointSolution,
    mode: CovMode,
) -> Result<CovKernelPoint> {
    let n1 = CovNode::new(model, sol1, mode)?;
    let n2 = CovNode::new(model, sol2, mode)?;
    let mut point = CovKernelPoint {
        z1: sol1.z,
        z2: sol2.z,
        mode,
        xi_j: Vec::new(),
        h_j: Vec::new(),
        lambda_j: Vec::new(),
        w: Vec::new(),
        s_raw: zero(),
    };
    let s = s_raw_impl(
        model,
        &n1,
        &n2,
        Accumulator {
            record: Some(&mut point),
        },
    )?;
    point.s_raw = s;
    Ok(point)
}

/// Default finite-difference step `1e-3 (1 + |z|)`.
pub fn default_fd_step(z: C) -> f64 {
    1e-3 * (1.0 + z.norm())
}

/// Solves at each point (conjugating below the axis) and builds its node.
pub fn cov_nodes(
    model: &VarianceModel,
    points: &[C],
    mode: CovMode,
    opts: &SolverOptions,
) -> Result<Vec<CovNode>> {
    let sols = solve_along_contour(model, points, opts)?;
    sols.iter().map(|s| CovNode::new(model, s, mode)).collect()
}

/// σ²(z1, z2) by mixed central differences of S at steps h and h/2, Richardson-combined.
pub fn sigma2(
    model: &VarianceModel,
    z1: C,
    z2: C,
    fd_step: Option<f64>,
    mode: CovMode,
    opts: &SolverOptions,
) -> Result<C> {
    let h1 = fd_step.unwrap_or_else(|| default_fd_step(z1));
    let h2 = fd_step.unwrap_or_else(|| default_fd_step(z2));
    let a = cov_nodes(
        model,
        &[z1 + h1, z1 - h1, z1 + 0.5 * h1, z1 - 0.5 * h1],
        mode,
        opts,
    )?;
    let b = cov_nodes(
        model,
        &[z2 + h2, z2 - h2, z2 + 0.5 * h2, z2 - 0.5 * h2],
        mode,
        opts,
    )?;
    let coarse = mixed_difference(model, [&a[0], &a[1]], [&b[0], &b[1]], h1, h2)?;
    let fine = mixed_difference(model, [&a[2], &a[3]], [&b[2], &b[3]], 0.5 * h1, 0.5 * h2)?;
    // One Richardson level removes the O(h²) term of the central stencil.
    Ok((4.0 * fine - coarse) / 3.0)
}

pub(crate) fn mixed_difference(
    model: &VarianceModel,
    a: [&CovNode; 2],
    b: [&CovNode; 2],
    h1: f64,
    h2: f64,
) -> Result<C> {
    let pp = s_raw(model, a[0], b[0])?;
    let pm = s_raw(model, a[0], b[1])?;
    let mp = s_raw(model, a[1], b[0])?;
    let mm = s_raw(model, a[1], b[1])?;
    Ok((pp - pm - mp + mm) / (4.0 * h1 * h2))
}

/// σ²(z1, z2) by nested Cauchy integrals over circles of radius `radius`
/// around each point, using `points` nodes per circle.
pub fn sigma2_cauchy(
    model: &VarianceModel,
    z1: C,
    z2: C,
    radius: Option<f64>,
    points: usize,
    mode: CovMode,
    opts: &SolverOptions,
) -> Result<C> {
    let rho = radius.unwrap_or_else(|| 0.25 * z1.im.abs().min(z2.im.abs()).min((z1 - z2).norm()));
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(
            "Cauchy radius must be positive".into(),
        ));
    }
    let omega: Vec<C> = (0..points)
        .map(|m| C::from_polar(1.0, 2.0 * std::f64::consts::PI * m as f64 / points as f64))
        .collect();
    let p1: Vec<C> = omega.iter().map(|w| z1 + w * rho).collect();
    let p2: Vec<C> = omega.iter().map(|w| z2 + w * rho).collect();
    let a = cov_nodes(model, &p1, mode, opts)?;
    let b = cov_nodes(model, &p2, mode, opts)?;
    let mut total = zero();
    for (x, wx) in a.iter().zip(&omega) {
        for (y, wy) in b.iter().zip(&omega) {
            total += s_raw(model, x, y)? / (wx * wy);
        }
    }
    Ok(total / (rho * rho * (points * points) as f64))
}

/// Finite-difference σ² checked against the Cauchy derivative; returns both
/// values and their relative gap, failing above 1e-4.
pub fn sigma2_checked(
    model: &VarianceModel,
    z1: C,
    z2: C,
    mode: CovMode,
    opts: &SolverOptions,
) -> Result<(C, C, f64)> {
    let fd = sigma2(model, z1, z2, None, mode, opts)?;
    let cauchy = sigma2_cauchy(model, z1, z2, None, 24, mode, opts)?;
    let rel = (fd - cauchy).norm() / cauchy.norm().max(f64::MIN_POSITIVE);
    if rel > 1e-4 {
        return Err(Error::DerivativeMismatch { relative: rel });
    }
    Ok((fd, cauchy, rel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed_point::solve_system;
    use crate::model::{
        build_model, build_model_with, scalings_from_design, ModelOptions, NestedDesign,
        SpectrumSpec,
    };

    fn mp(n: usize, nn: usize) -> VarianceModel {
        build_model(n, nn, &[SpectrumSpec::identity()], vec![vec![1.0; nn]]).unwrap()
    }

    fn table1(p: usize) -> VarianceModel {
        let design = NestedDesign::random_full_sib(p, &[0.5, 0.5], 5).unwrap();
        build_model(
            p,
            p,
            &[
                SpectrumSpec::ExponentialDecay {
                    tau1: 1.0,
                    tau2: 0.3,
                },
                SpectrumSpec::ScaledIdentity { tau_e: 1.0 },
            ],
            scalings_from_design(&design),
        )
        .unwrap()
    }

    /// Real-Gaussian MP bias of Tr(B - z)^{-1} in closed form, via the
    /// companion transform m̲ solving z m̲² + (z + 1 - y) m̲ + 1 = 0.
    fn mp_bias_closed_form(z: C, y: f64) -> C {
        let b = z + 1.0 - y;
        let disc = (b * b - 4.0 * z).sqrt();
        let r1 = (-b + disc) / (2.0 * z);
        let r2 = (-b - disc) / (2.0 * z);
        let m = if r1.im > 0.0 { r1 } else { r2 };
        let q = m / (1.0 + m);
        y * q * q * q / (1.0 - y * q * q).powi(2)
    }

    fn mp_companion(z: C, y: f64) -> C {
        if z.im < 0.0 {
            return mp_companion(z.conj(), y).conj();
        }
        let b = z + 1.0 - y;
        let disc = (b * b - 4.0 * z).sqrt();
        let r1 = (-b + disc) / (2.0 * z);
        let r2 = (-b - disc) / (2.0 * z);
        if r1.im > 0.0 {
            r1
        } else {
            r2
        }
    }

    #[test]
    fn zero_model_has_zero_bias() {
        let m = build_model(
            6,
            8,
            &[SpectrumSpec::ScaledIdentity { tau_e: 0.0 }],
            vec![vec![1.3; 8]],
        )
        .unwrap();
        let sol = solve_system(&m, C::new(0.5, 1.0), &SolverOptions::default()).unwrap();
        let ker = build_kernel(&m, &sol).unwrap();
        assert!(ker
            .xi1
            .iter()
            .chain(ker.zeta1.iter())
            .all(|v| v.norm() == 0.0));
        assert!(ker.dn.iter().chain(&ker.nu).all(|v| v.norm() == 0.0));
        assert_eq!(ker.mu, zero());
        let p = cov_point(&m, &sol, &sol.conj(), CovMode::ExactLeaveOneOut).unwrap();
        assert_eq!(p.s_raw, zero());
        assert!(p.w.iter().flatten().all(|v| v.norm() == 0.0));
        let s2 = sigma2(
            &m,
            C::new(0.5, 1.0),
            C::new(1.0, 2.0),
            None,
            CovMode::SharedResolvent,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(s2, zero());
    }

    #[test]
    fn zero_scalings_have_unit_weights() {
        let m = build_model(
            5,
            4,
            &[SpectrumSpec::identity(), SpectrumSpec::identity()],
            vec![vec![0.0; 4], vec![0.0; 4]],
        )
        .unwrap();
        let sol = solve_system(&m, C::new(0.2, 0.8), &SolverOptions::default()).unwrap();
        let ker = build_kernel(&m, &sol).unwrap();
        assert!(ker.bj.iter().all(|b| *b == C::new(1.0, 0.0)));
        assert!(ker.h_n1.iter().all(|v| v.norm() == 0.0));
        assert_eq!(ker.mu, zero());
    }

    #[test]
    fn bias_matches_closed_form_for_mp() {
        for (n, nn) in [(400, 400), (200, 400), (400, 200)] {
            let m = mp(n, nn);
            let y = n as f64 / nn as f64;
            for z in [C::new(1.0, 1.0), C::new(0.0, 2.0), C::new(0.5, 0.3)] {
                let sol = solve_system(&m, z, &SolverOptions::default()).unwrap();
                let ker = build_kernel(&m, &sol).unwrap();
                let exact = mp_bias_closed_form(z, y);
                assert!(
                    (ker.mu - exact).norm() < 1e-9 * (1.0 + exact.norm()),
                    "n={n} N={nn} z={z}: {} vs {exact}",
                    ker.mu
                );
            }
        }
    }

    #[test]
    fn kernel_systems_resubstitute() {
        let m = table1(120);
        for z in [C::new(1.0, 0.5), C::new(3.0, 2.0), C::new(-0.5, 0.4)] {
            let sol = solve_system(&m, z, &SolverOptions::default()).unwrap();
            let ker = build_kernel(&m, &sol).unwrap();
            assert!(ker.defects().max() < 1e-10, "{:?}", ker.defects());
            for a in 0..2 {
                for b in 0..2 {
                    assert!((ker.xi1[(a, b)] - ker.xi1[(b, a)]).norm() < 1e-14);
                }
                // β_s = -z g1[s].
                assert!((ker.beta[a] + z * sol.g1[a]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn weights_match_direct_formula() {
        let m = table1(150);
        let sol = solve_system(&m, C::new(0.7, 0.9), &SolverOptions::default()).unwrap();
        let ker = build_kernel(&m, &sol).unwrap();
        for j in (0..150).step_by(3) {
            let l = &m.scalings();
            let direct =
                1.0 / (1.0 + l[0][j] * l[0][j] * sol.g2[0] + l[1][j] * l[1][j] * sol.g2[1]);
            assert!((ker.bj[j] - direct).norm() < 1e-15);
        }
    }

    #[test]
    fn dense_kernel_matches_diagonal_kernel() {
        let spectra = [
            SpectrumSpec::EigenvalueList {
                values: (0..20).map(|i| 0.3 + 0.1 * i as f64).collect(),
            },
            SpectrumSpec::ScaledIdentity { tau_e: 0.5 },
        ];
        let scal = vec![
            (0..30)
                .map(|j| if j % 2 == 0 { 1.4 } else { 1.0 })
                .collect(),
            vec![1.0; 30],
        ];
        let diag = build_model(20, 30, &spectra, scal.clone()).unwrap();
        let dense = build_model_with(
            20,
            30,
            &spectra,
            scal,
            &ModelOptions {
                rotation_seed: Some(4),
                ..Default::default()
            },
        )
        .unwrap();
        let z = C::new(1.0, 0.7);
        let opts = SolverOptions::default();
        let a = build_kernel(&diag, &solve_system(&diag, z, &opts).unwrap()).unwrap();
        let b = build_kernel(&dense, &solve_system(&dense, z, &opts).unwrap()).unwrap();
        assert!((a.mu - b.mu).norm() < 1e-10 * (1.0 + a.mu.norm()));
        let w = C::new(2.0, 0.4);
        for mode in [CovMode::ExactLeaveOneOut, CovMode::SharedResolvent] {
            let sa = s_raw(
                &diag,
                &CovNode::new(&diag, &solve_system(&diag, z, &opts).unwrap(), mode).unwrap(),
                &CovNode::new(&diag, &solve_system(&diag, w, &opts).unwrap(), mode).unwrap(),
            )
            .unwrap();
            let sb = s_raw(
                &dense,
                &CovNode::new(&dense, &solve_system(&dense, z, &opts).unwrap(), mode).unwrap(),
                &CovNode::new(&dense, &solve_system(&dense, w, &opts).unwrap(), mode).unwrap(),
            )
            .unwrap();
            assert!((sa - sb).norm() < 1e-10 * sa.norm());
        }
    }

    #[test]
    fn modes_agree_to_order_one_over_n() {
        let nn = 200;
        let m = mp(nn, nn);
        let opts = SolverOptions::default();
        let s1 = solve_system(&m, C::new(1.0, 1.0), &opts).unwrap();
        let s2 = solve_system(&m, C::new(2.5, 0.8), &opts).unwrap();
        let exact = cov_point(&m, &s1, &s2, CovMode::ExactLeaveOneOut).unwrap();
        let shared = cov_point(&m, &s1, &s2, CovMode::SharedResolvent).unwrap();
        let rel = (exact.s_raw - shared.s_raw).norm() / exact.s_raw.norm();
        assert!(rel <= 5.0 / nn as f64, "relative gap {rel}");
        assert!(exact.w_defect(&m) < 1e-10);
        assert!(shared.w_defect(&m) < 1e-10);
        let a = CovNode::new(&m, &s1, CovMode::ExactLeaveOneOut).unwrap();
        let b = CovNode::new(&m, &s2, CovMode::SharedResolvent).unwrap();
        assert!(s_raw(&m, &a, &b).is_err());
    }

    #[test]
    fn s_raw_symmetries() {
        let m = table1(90);
        let opts = SolverOptions::default();
        let z1 = C::new(1.2, 0.9);
        let z2 = C::new(3.1, 1.4);
        for mode in [CovMode::ExactLeaveOneOut, CovMode::SharedResolvent] {
            let a = solve_system(&m, z1, &opts).unwrap();
            let b = solve_system(&m, z2, &opts).unwrap();
            let s12 = cov_point(&m, &a, &b, mode).unwrap().s_raw;
            let s21 = cov_point(&m, &b, &a, mode).unwrap().s_raw;
            assert!((s12 - s21).norm() <= 1e-9 * s12.norm());
            let sc = cov_point(&m, &a.conj(), &b.conj(), mode).unwrap().s_raw;
            assert!((sc - s12.conj()).norm() <= 1e-12 * s12.norm());
            let sr = cov_point(&m, &a, &a.conj(), mode).unwrap().s_raw;
            assert!(sr.im.abs() <= 1e-9 * sr.norm());
        }
    }

    #[test]
    fn sigma2_matches_classical_kernel_for_mp() {
        // Real-Gaussian MP: Cov(M(z1), M(z2)) = 2 [m̲1' m̲2' / (m̲1 - m̲2)² - 1/(z1 - z2)²].
        let nn = 300;
        let m = mp(nn, nn);
        let opts = SolverOptions::default();
        for (z1, z2) in [
            (C::new(1.0, 1.0), C::new(2.0, 1.0)),
            (C::new(0.5, 2.0), C::new(4.0, -0.5)),
        ] {
            let s = sigma2(&m, z1, z2, None, CovMode::SharedResolvent, &opts).unwrap();
            let h = 1e-5;
            let d = |z: C| (mp_companion(z + h, 1.0) - mp_companion(z - h, 1.0)) / (2.0 * h);
            let (m1, m2) = (mp_companion(z1, 1.0), mp_companion(z2, 1.0));
            let classic = d(z1) * d(z2) / (m1 - m2).powi(2) - 1.0 / (z1 - z2).powi(2);
            assert!(
                (s - classic).norm() < 0.02 * classic.norm(),
                "{s} vs {classic}"
            );
        }
    }

    #[test]
    fn finite_difference_agrees_with_cauchy() {
        let m = table1(100);
        let opts = SolverOptions::default();
        let (fd, cauchy, rel) = sigma2_checked(
            &m,
            C::new(1.0, 1.0),
            C::new(2.0, 1.0),
            CovMode::SharedResolvent,
            &opts,
        )
        .unwrap();
        assert!(rel < 1e-6, "fd {fd} cauchy {cauchy} rel {rel}");
        let s21 = sigma2(
            &m,
            C::new(2.0, 1.0),
            C::new(1.0, 1.0),
            None,
            CovMode::SharedResolvent,
            &opts,
        )
        .unwrap();
        assert!((s21 - fd).norm() <= 1e-8 * fd.norm());
    }

    #[test]
    fn scale_covariance() {
        let m = mp(80, 100);
        let s = 2.5;
        let scaled = m.scaled(s).unwrap();
        let opts = SolverOptions::default();
        let z = C::new(0.8, 0.6);
        let a = solve_system(&m, z, &opts).unwrap().stieltjes(&m);
        let b = solve_system(&scaled, z * s, &opts)
            .unwrap()
            .stieltjes(&scaled);
        assert!((b - a / s).norm() < 1e-9 * a.norm());
    }

    #[test]
    fn diagnostics_csv() {
        let m = table1(40);
        let sol = solve_system(&m, C::new(1.0, 1.0), &SolverOptions::default()).unwrap();
        let ker = build_kernel(&m, &sol).unwrap();
        let mut buf = Vec::new();
        write_kernel_diagnostics(&mut buf, &[(sol, ker)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines
            .next()
            .unwrap()
            .starts_with("z_re,z_im,residual,mu_re,mu_im,d0_re"));
        assert_eq!(lines.next().unwrap().split(',').count(), 5 + 2 * 3 + 2 * 2);
    }
}
