//! Variance-component models, nested designs and spectral support bounds.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = -1e-10;

/// How one population covariance is specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpectrumSpec {
    DenseMatrix {
        rows: Vec<Vec<f64>>,
    },
    EigenvalueList {
        values: Vec<f64>,
    },
    /// Eigenvalues `tau1 * exp(-tau2 * i)` for `i = 1..=p`.
    ExponentialDecay {
        tau1: f64,
        tau2: f64,
    },
    ScaledIdentity {
        tau_e: f64,
    },
}

impl SpectrumSpec {
    pub fn identity() -> Self {
        SpectrumSpec::ScaledIdentity { tau_e: 1.0 }
    }

    /// Expands the description into a `p`-dimensional covariance.
    pub fn expand(&self, p: usize) -> Result<Covariance> {
        match self {
            SpectrumSpec::DenseMatrix { rows } => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(Error::Dimension(format!("dense matrix must be {p}x{p}")));
                }
                let m = DMatrix::from_fn(p, p, |i, j| rows[i][j]);
                Ok(Covariance::Dense(m))
            }
            SpectrumSpec::EigenvalueList { values } => {
                if values.len() != p {
                    return Err(Error::Dimension(format!(
                        "eigenvalue list has length {}, expected {p}",
                        values.len()
                    )));
                }
                if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "eigenvalue {v} is negative or not finite"
                    )));
                }
                Ok(Covariance::Diagonal(values.clone()))
            }
            SpectrumSpec::ExponentialDecay { tau1, tau2 } => {
                if !(tau1.is_finite() && tau2.is_finite()) || *tau1 < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "exponential decay needs finite tau1 >= 0, got ({tau1}, {tau2})"
                    )));
                }
                Ok(Covariance::Diagonal(exponential_decay(*tau1, *tau2, p)))
            }
            SpectrumSpec::ScaledIdentity { tau_e } => {
                if !tau_e.is_finite() || *tau_e < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "scaled identity needs finite tau_e >= 0, got {tau_e}"
                    )));
                }
                Ok(Covariance::Diagonal(vec![*tau_e; p]))
            }
        }
    }
}

/// Eigenvalues `tau1 * exp(-tau2 * i)`, `i = 1..=p`.
pub fn exponential_decay(tau1: f64, tau2: f64, p: usize) -> Vec<f64> {
    (1..=p).map(|i| tau1 * (-tau2 * i as f64).exp()).collect()
}

/// A population covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(d) => d.len(),
            Covariance::Dense(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(d) => {
                DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d))
            }
            Covariance::Dense(m) => m.clone(),
        }
    }
}

/// Storage chosen for the k covariances after validation.
#[derive(Debug, Clone)]
pub(crate) enum SigmaRepr {
    Diagonal(Vec<Vec<f64>>),
    Dense {
        mats: Vec<DMatrix<f64>>,
        roots: Vec<DMatrix<f64>>,
    },
}

/// Lower and upper bounds on the aspect ratio n/N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspectBounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ModelOptions {
    /// Margin added around n/N when no explicit bounds are given (default 0.2).
    pub aspect_margin: Option<f64>,
    pub aspect_bounds: Option<AspectBounds>,
    /// Conjugates every Σ_r by one shared random orthogonal matrix.
    pub rotation_seed: Option<u64>,
}

/// Samples that share a scaling row share every per-sample quantity.
#[derive(Debug, Clone)]
pub(crate) struct ScalingGroups {
    pub index: Vec<usize>,
    pub representative: Vec<usize>,
    pub size: Vec<usize>,
}

/// Dimensions, covariances Σ_r and diagonal scalings L_r of one model.
#[derive(Debug, Clone)]
pub struct VarianceModel {
    n: usize,
    samples: usize,
    sigmas: Vec<Covariance>,
    repr: SigmaRepr,
    scalings: Vec<Vec<f64>>,
    sq_scalings: Vec<Vec<f64>>,
    groups: ScalingGroups,
    bounds: AspectBounds,
    scaling_bound: f64,
    sigma_bound: f64,
}

impl VarianceModel {
    pub fn new(
        n: usize,
        samples: usize,
        sigmas: Vec<Covariance>,
        scalings: Vec<Vec<f64>>,
        opts: &ModelOptions,
    ) -> Result<Self> {
        if n == 0 || samples == 0 {
            return Err(Error::Dimension("n and N must be positive".into()));
        }
        if sigmas.is_empty() {
            return Err(Error::Dimension("empty spectra list".into()));
        }
        if sigmas.len() != scalings.len() {
            return Err(Error::Dimension(format!(
                "{} covariances but {} scalings",
                sigmas.len(),
                scalings.len()
            )));
        }
        for (r, s) in scalings.iter().enumerate() {
            if s.len() != samples {
                return Err(Error::Dimension(format!(
                    "scaling {r} has length {}, expected N = {samples}",
                    s.len()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "scaling {r} is not finite"
                )));
            }
        }

        let mut validated = Vec::with_capacity(sigmas.len());
        for (r, s) in sigmas.into_iter().enumerate() {
            if s.dim() != n {
                return Err(Error::Dimension(format!(
                    "covariance {r} has dimension {}, expected n = {n}",
                    s.dim()
                )));
            }
            validated.push(validate_covariance(r, s)?);
        }

        if let Some(seed) = opts.rotation_seed {
            let q = random_orthogonal(n, seed);
            validated = validated
                .iter()
                .map(|s| {
                    let m = &q * s.to_dense() * q.transpose();
                    Covariance::Dense((&m + m.transpose()) * 0.5)
                })
                .collect();
        }

        let all_diagonal = validated
            .iter()
            .all(|s| matches!(s, Covariance::Diagonal(_)));
        let repr = if all_diagonal {
            SigmaRepr::Diagonal(
                validated
                    .iter()
                    .map(|s| match s {
                        Covariance::Diagonal(d) => d.clone(),
                        Covariance::Dense(_) => unreachable!(),
                    })
                    .collect(),
            )
        } else {
            let mats: Vec<_> = validated.iter().map(|s| s.to_dense()).collect();
            let roots = mats.iter().map(psd_sqrt).collect();
            SigmaRepr::Dense { mats, roots }
        };

        let sigma_bound = validated
            .iter()
            .map(|s| max_eigenvalue(s).max(0.0).sqrt())
            .fold(0.0, f64::max);
        let scaling_bound = scalings
            .iter()
            .flat_map(|s| s.iter().map(|v| v.abs()))
            .fold(0.0, f64::max);

        let ratio = n as f64 / samples as f64;
        let bounds = match opts.aspect_bounds {
            Some(b) => {
                if !(0.0 < b.lower && b.lower < ratio && ratio < b.upper) {
                    return Err(Error::InvalidParameter(format!(
                        "aspect ratio {ratio} violates bounds ({}, {})",
                        b.lower, b.upper
                    )));
                }
                b
            }
            None => {
                let margin = opts.aspect_margin.unwrap_or(0.2);
                if !(margin > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "aspect margin must be positive, got {margin}"
                    )));
                }
                AspectBounds {
                    lower: (ratio - margin).max(0.5 * ratio),
                    upper: ratio + margin,
                }
            }
        };

        let sq_scalings: Vec<Vec<f64>> = scalings
            .iter()
            .map(|s| s.iter().map(|v| v * v).collect())
            .collect();
        let groups = group_rows(&sq_scalings, samples);

        Ok(VarianceModel {
            n,
            samples,
            sigmas: validated,
            repr,
            scalings,
            sq_scalings,
            groups,
            bounds,
            scaling_bound,
            sigma_bound,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// The sample-count dimension N.
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.n as f64 / self.samples as f64
    }

    pub fn sigmas(&self) -> &[Covariance] {
        &self.sigmas
    }

    /// The diagonals `l_{·r}` of each L_r.
    pub fn scalings(&self) -> &[Vec<f64>] {
        &self.scalings
    }

    /// Squared scalings `l_{jr}^2`, indexed `[r][j]`.
    pub fn sq_scalings(&self) -> &[Vec<f64>] {
        &self.sq_scalings
    }

    pub fn aspect_bounds(&self) -> AspectBounds {
        self.bounds
    }

    /// Recorded bound s_L on `|l_{jr}|`.
    pub fn scaling_bound(&self) -> f64 {
        self.scaling_bound
    }

    /// Recorded bound s_Σ on the spectral norm of each Σ_r^{1/2}.
    pub fn sigma_bound(&self) -> f64 {
        self.sigma_bound
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.repr, SigmaRepr::Diagonal(_))
    }

    pub(crate) fn repr(&self) -> &SigmaRepr {
        &self.repr
    }

    pub(crate) fn groups(&self) -> &ScalingGroups {
        &self.groups
    }

    /// Tr Σ_r for each level.
    pub fn sigma_traces(&self) -> Vec<f64> {
        match &self.repr {
            SigmaRepr::Diagonal(d) => d.iter().map(|s| s.iter().sum()).collect(),
            SigmaRepr::Dense { mats, .. } => mats.iter().map(|m| m.trace()).collect(),
        }
    }

    /// Tr(Σ_r Σ_s) for all pairs.
    pub fn sigma_products(&self) -> DMatrix<f64> {
        let k = self.levels();
        match &self.repr {
            SigmaRepr::Diagonal(d) => DMatrix::from_fn(k, k, |r, s| {
                d[r].iter().zip(&d[s]).map(|(a, b)| a * b).sum()
            }),
            SigmaRepr::Dense { mats, .. } => {
                DMatrix::from_fn(k, k, |r, s| mats[r].component_mul(&mats[s]).sum())
            }
        }
    }

    /// (1/N) Σ_j Tr T_j.
    pub fn mean_trace(&self) -> f64 {
        let traces = self.sigma_traces();
        let total: f64 = (0..self.levels())
            .map(|r| traces[r] * self.sq_scalings[r].iter().sum::<f64>())
            .sum();
        total / self.samples as f64
    }

    /// Σ_j Tr T_j^2.
    pub fn sum_trace_squares(&self) -> f64 {
        let prod = self.sigma_products();
        let k = self.levels();
        let mut total = 0.0;
        for r in 0..k {
            for s in 0..k {
                let w: f64 = self.sq_scalings[r]
                    .iter()
                    .zip(&self.sq_scalings[s])
                    .map(|(a, b)| a * b)
                    .sum();
                total += w * prod[(r, s)];
            }
        }
        total
    }

    /// A copy with every Σ_r multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let sigmas = self
            .sigmas
            .iter()
            .map(|s| match s {
                Covariance::Diagonal(d) => {
                    Covariance::Diagonal(d.iter().map(|v| v * factor).collect())
                }
                Covariance::Dense(m) => Covariance::Dense(m * factor),
            })
            .collect();
        VarianceModel::new(
            self.n,
            self.samples,
            sigmas,
            self.scalings.clone(),
            &ModelOptions {
                aspect_bounds: Some(self.bounds),
                ..Default::default()
            },
        )
    }
}

/// Builds and validates a model from spectrum specs and scaling diagonals.
pub fn build_model(
    n: usize,
    samples: usize,
    spectra: &[SpectrumSpec],
    scalings: Vec<Vec<f64>>,
) -> Result<VarianceModel> {
    build_model_with(n, samples, spectra, scalings, &ModelOptions::default())
}

pub fn build_model_with(
    n: usize,
    samples: usize,
    spectra: &[SpectrumSpec],
    scalings: Vec<Vec<f64>>,
    opts: &ModelOptions,
) -> Result<VarianceModel> {
    if spectra.is_empty() {
        return Err(Error::Dimension("empty spectra list".into()));
    }
    let sigmas = spectra
        .iter()
        .map(|s| s.expand(n))
        .collect::<Result<Vec<_>>>()?;
    VarianceModel::new(n, samples, sigmas, scalings, opts)
}

/// `[0, k^2 (1 + sqrt(C))^2 s_L^2 s_Σ^2]` with C the upper aspect bound.
pub fn support_bound(model: &VarianceModel) -> (f64, f64) {
    let k = model.levels() as f64;
    let c = model.aspect_bounds().upper;
    let sl = model.scaling_bound();
    let ss = model.sigma_bound();
    (0.0, k * k * (1.0 + c.sqrt()).powi(2) * sl * sl * ss * ss)
}

/// T_j = Σ_r l_{jr}^2 Σ_r.
pub fn t_matrix(model: &VarianceModel, j: usize) -> Result<DMatrix<f64>> {
    if j >= model.samples() {
        return Err(Error::Dimension(format!(
            "sample index {j} out of range 0..{}",
            model.samples()
        )));
    }
    let n = model.n();
    let mut t = DMatrix::zeros(n, n);
    for (r, s) in model.sigmas().iter().enumerate() {
        let w = model.sq_scalings()[r][j];
        match s {
            Covariance::Diagonal(d) => {
                for i in 0..n {
                    t[(i, i)] += w * d[i];
                }
            }
            Covariance::Dense(m) => t += m * w,
        }
    }
    Ok(t)
}

fn validate_covariance(index: usize, s: Covariance) -> Result<Covariance> {
    match s {
        Covariance::Diagonal(d) => {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "covariance {index} is not finite"
                )));
            }
            let min = d.iter().copied().fold(f64::INFINITY, f64::min);
            if min < PSD_TOL {
                return Err(Error::Indefinite {
                    index,
                    min_eigenvalue: min,
                });
            }
            Ok(Covariance::Diagonal(d))
        }
        Covariance::Dense(m) => {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "covariance {index} is not finite"
                )));
            }
            let scale = m.amax();
            let asym = (&m - m.transpose()).amax();
            if asym > SYMMETRY_TOL * scale {
                return Err(Error::Asymmetric {
                    index,
                    asymmetry: if scale > 0.0 { asym / scale } else { asym },
                });
            }
            let m = (&m + m.transpose()) * 0.5;
            let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
            if min < PSD_TOL {
                return Err(Error::Indefinite {
                    index,
                    min_eigenvalue: min,
                });
            }
            let n = m.nrows();
            let off_diagonal_zero = (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == 0.0));
            if off_diagonal_zero {
                Ok(Covariance::Diagonal(m.diagonal().iter().copied().collect()))
            } else {
                Ok(Covariance::Dense(m))
            }
        }
    }
}

fn max_eigenvalue(s: &Covariance) -> f64 {
    match s {
        Covariance::Diagonal(d) => d.iter().copied().fold(0.0, f64::max),
        Covariance::Dense(m) => SymmetricEigen::new(m.clone()).eigenvalues.max(),
    }
}

/// Symmetric square root with negative roundoff eigenvalues clipped to zero.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Haar-distributed orthogonal matrix from a Gaussian QR with sign correction.
pub fn random_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn group_rows(sq: &[Vec<f64>], samples: usize) -> ScalingGroups {
    let mut lookup: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut index = Vec::with_capacity(samples);
    let mut representative = Vec::new();
    let mut size = Vec::new();
    for j in 0..samples {
        let key: Vec<u64> = sq.iter().map(|s| s[j].to_bits()).collect();
        let g = *lookup.entry(key).or_insert_with(|| {
            representative.push(j);
            size.push(0);
            representative.len() - 1
        });
        size[g] += 1;
        index.push(g);
    }
    ScalingGroups {
        index,
        representative,
        size,
    }
}

/// A nested partition of `n_s` samples into groups at each of k levels.
///
/// Level 0 is the coarsest (families in a full-sib design); each later level
/// refines the previous one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedDesign {
    assignments: Vec<Vec<usize>>,
    counts: Vec<usize>,
}

impl NestedDesign {
    /// Builds a design from per-level group labels of every sample.
    pub fn from_assignments(assignments: Vec<Vec<usize>>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::Dimension("design needs at least one level".into()));
        }
        let ns = assignments[0].len();
        if ns == 0 {
            return Err(Error::Dimension("design has no samples".into()));
        }
        let mut counts = Vec::with_capacity(assignments.len());
        for (r, a) in assignments.iter().enumerate() {
            if a.len() != ns {
                return Err(Error::Dimension(format!(
                    "level {r} labels {} samples, expected {ns}",
                    a.len()
                )));
            }
            let count = a.iter().max().map_or(0, |m| m + 1);
            let mut used = vec![false; count];
            for &g in a {
                used[g] = true;
            }
            if let Some(g) = used.iter().position(|u| !u) {
                return Err(Error::InvalidParameter(format!(
                    "level {r} group {g} is empty"
                )));
            }
            counts.push(count);
        }
        for r in 1..assignments.len() {
            let mut parent = vec![usize::MAX; counts[r]];
            for (i, &g) in assignments[r].iter().enumerate() {
                let p = assignments[r - 1][i];
                if parent[g] == usize::MAX {
                    parent[g] = p;
                } else if parent[g] != p {
                    return Err(Error::NonNested(format!(
                        "group {g} at level {r} spans groups {} and {p} of level {}",
                        parent[g],
                        r - 1
                    )));
                }
            }
        }
        Ok(NestedDesign {
            assignments,
            counts,
        })
    }

    /// Builds a design from contiguous group sizes listed per level.
    pub fn from_group_sizes(levels: &[Vec<usize>]) -> Result<Self> {
        let assignments = levels
            .iter()
            .map(|sizes| {
                if sizes.contains(&0) {
                    return Err(Error::InvalidParameter(
                        "group sizes must be positive".into(),
                    ));
                }
                Ok(sizes
                    .iter()
                    .enumerate()
                    .flat_map(|(g, &s)| std::iter::repeat_n(g, s))
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        if assignments.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(Error::Dimension(
                "levels partition different sample counts".into(),
            ));
        }
        NestedDesign::from_assignments(assignments)
    }

    /// Two-level design: families of the given sizes, then individuals.
    pub fn full_sib(family_sizes: &[usize]) -> Result<Self> {
        let ns: usize = family_sizes.iter().sum();
        NestedDesign::from_group_sizes(&[family_sizes.to_vec(), vec![1; ns]])
    }

    /// Full-sib design whose family sizes are drawn once from `sibling_probs`,
    /// where `sibling_probs[i]` is the probability of size `i + 1`.
    pub fn random_full_sib(families: usize, sibling_probs: &[f64], seed: u64) -> Result<Self> {
        NestedDesign::full_sib(&random_family_sizes(families, sibling_probs, seed)?)
    }

    pub fn levels(&self) -> usize {
        self.assignments.len()
    }

    pub fn total_samples(&self) -> usize {
        self.assignments[0].len()
    }

    /// Group counts F_r per level.
    pub fn group_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    /// Sizes of the groups at `level`.
    pub fn group_sizes(&self, level: usize) -> Vec<usize> {
        let mut sizes = vec![0; self.counts[level]];
        for &g in &self.assignments[level] {
            sizes[g] += 1;
        }
        sizes
    }

    /// Dense 0/1 membership matrix U_r (n_s x F_r).
    pub fn membership(&self, level: usize) -> DMatrix<f64> {
        let a = &self.assignments[level];
        let mut u = DMatrix::zeros(a.len(), self.counts[level]);
        for (i, &g) in a.iter().enumerate() {
            u[(i, g)] = 1.0;
        }
        u
    }

    /// True when every level above the first is a singleton partition.
    pub fn is_full_sib(&self) -> bool {
        self.levels() == 2 && self.counts[1] == self.total_samples()
    }
}

pub fn random_family_sizes(
    families: usize,
    sibling_probs: &[f64],
    seed: u64,
) -> Result<Vec<usize>> {
    if families == 0 {
        return Err(Error::InvalidParameter("need at least one family".into()));
    }
    let total: f64 = sibling_probs.iter().sum();
    if sibling_probs.is_empty() || sibling_probs.iter().any(|p| !(*p >= 0.0)) || !(total > 0.0) {
        return Err(Error::InvalidParameter(
            "sibling probabilities must be nonnegative with positive sum".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..families)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for (i, p) in sibling_probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i + 1;
                }
            }
            sibling_probs.len()
        })
        .collect())
}

/// Diagonals of L_r = (U_1ᵀU_1)^{-1/2}(U_1ᵀU_rU_rᵀU_1)^{1/2}, each of length F_1.
pub fn scalings_from_design(design: &NestedDesign) -> Vec<Vec<f64>> {
    let families = design.group_sizes(0);
    let top = &design.assignments()[0];
    (0..design.levels())
        .map(|r| {
            let mut square_sums = vec![0.0; design.group_counts()[0]];
            for (g, size) in design.group_sizes(r).into_iter().enumerate() {
                let i = design.assignments()[r]
                    .iter()
                    .position(|&x| x == g)
                    .unwrap();
                square_sums[top[i]] += (size * size) as f64;
            }
            square_sums
                .iter()
                .zip(&families)
                .map(|(sq, &s)| (sq / s as f64).sqrt())
                .collect()
        })
        .collect()
}

/// Scaling diagonal given either inline or as a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalingSpec {
    Constant { constant: f64 },
    Values(Vec<f64>),
}

/// Nested design section of a model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DesignSpec {
    /// Family sizes drawn from `sibling_probs` with a recorded seed.
    FullSib {
        #[serde(rename = "F")]
        families: usize,
        sibling_probs: Vec<f64>,
        seed: u64,
    },
    FamilySizes {
        sizes: Vec<usize>,
    },
    GroupSizes {
        levels: Vec<Vec<usize>>,
    },
}

impl DesignSpec {
    pub fn build(&self) -> Result<NestedDesign> {
        match self {
            DesignSpec::FullSib {
                families,
                sibling_probs,
                seed,
            } => NestedDesign::random_full_sib(*families, sibling_probs, *seed),
            DesignSpec::FamilySizes { sizes } => NestedDesign::full_sib(sizes),
            DesignSpec::GroupSizes { levels } => NestedDesign::from_group_sizes(levels),
        }
    }
}

/// Structured model description as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub spectra: Vec<SpectrumSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalings: Option<Vec<ScalingSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotate_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect_margin: Option<f64>,
}

/// A model together with the design it was reduced from, if any.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub model: VarianceModel,
    pub design: Option<NestedDesign>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<BuiltModel> {
        if let Some(k) = self.k {
            if k != self.spectra.len() {
                return Err(Error::Spec(format!(
                    "k = {k} but {} spectra given",
                    self.spectra.len()
                )));
            }
        }
        let opts = ModelOptions {
            aspect_margin: self.aspect_margin,
            aspect_bounds: None,
            rotation_seed: self.rotate_seed,
        };
        match (&self.scalings, &self.design) {
            (Some(_), Some(_)) => Err(Error::Spec(
                "give either scalings or design, not both".into(),
            )),
            (None, None) => Err(Error::Spec("missing scalings or design".into())),
            (Some(scalings), None) => {
                let samples = self.samples.ok_or_else(|| {
                    Error::Spec("field N is required with inline scalings".into())
                })?;
                let scalings = scalings
                    .iter()
                    .map(|s| match s {
                        ScalingSpec::Constant { constant } => vec![*constant; samples],
                        ScalingSpec::Values(v) => v.clone(),
                    })
                    .collect();
                let model = build_model_with(self.n, samples, &self.spectra, scalings, &opts)?;
                Ok(BuiltModel {
                    model,
                    design: None,
                })
            }
            (None, Some(spec)) => {
                let design = spec.build()?;
                if design.levels() != self.spectra.len() {
                    return Err(Error::Spec(format!(
                        "design has {} levels but {} spectra given",
                        design.levels(),
                        self.spectra.len()
                    )));
                }
                let families = design.group_counts()[0];
                if let Some(samples) = self.samples {
                    if samples != families {
                        return Err(Error::Spec(format!(
                            "N = {samples} but the design has {families} top-level groups"
                        )));
                    }
                }
                let model = build_model_with(
                    self.n,
                    families,
                    &self.spectra,
                    scalings_from_design(&design),
                    &opts,
                )?;
                Ok(BuiltModel {
                    model,
                    design: Some(design),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn inv_sqrt_diag(d: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&d.diagonal().map(|v| 1.0 / v.sqrt()))
    }

    /// Squared scalings by explicit membership-matrix products.
    fn dense_scaling_squares(design: &NestedDesign) -> Vec<Vec<f64>> {
        let u1 = design.membership(0);
        let inv_root = inv_sqrt_diag(&(u1.transpose() * &u1));
        (0..design.levels())
            .map(|r| {
                let ur = design.membership(r);
                let m = &inv_root * u1.transpose() * &ur * ur.transpose() * &u1 * &inv_root;
                m.diagonal().iter().copied().collect()
            })
            .collect()
    }

    #[test]
    fn identity_model() {
        let m = build_model(2, 2, &[SpectrumSpec::identity()], vec![vec![1.0, 1.0]]).unwrap();
        assert_eq!(m.levels(), 1);
        assert_eq!(m.sigmas()[0].to_dense(), DMatrix::identity(2, 2));
        assert!(m.is_diagonal());
    }

    #[test]
    fn table_one_spectra() {
        let spectra = [
            SpectrumSpec::ExponentialDecay {
                tau1: 1.0,
                tau2: 0.3,
            },
            SpectrumSpec::ScaledIdentity { tau_e: 1.0 },
        ];
        let m = build_model(500, 500, &spectra, vec![vec![1.0; 500], vec![1.0; 500]]).unwrap();
        match &m.sigmas()[0] {
            Covariance::Diagonal(d) => {
                assert_relative_eq!(d[0], (-0.3f64).exp(), epsilon = 1e-15);
                assert_relative_eq!(d[499], (-150.0f64).exp(), max_relative = 1e-12);
            }
            _ => panic!("expected diagonal"),
        }
        assert_eq!(m.sigmas()[1], Covariance::Diagonal(vec![1.0; 500]));
    }

    #[test]
    fn indefinite_rejected() {
        let spec = SpectrumSpec::DenseMatrix {
            rows: vec![vec![1.0, 0.0], vec![0.0, -0.1]],
        };
        let err = build_model(2, 2, &[spec], vec![vec![1.0; 2]]).unwrap_err();
        assert!(matches!(err, Error::Indefinite { .. }));
        assert!(err.to_string().contains("indefinite"));
    }

    #[test]
    fn asymmetric_rejected_and_small_asymmetry_averaged() {
        let bad = SpectrumSpec::DenseMatrix {
            rows: vec![vec![2.0, 0.5], vec![0.4, 2.0]],
        };
        assert!(matches!(
            build_model(2, 2, &[bad], vec![vec![1.0; 2]]),
            Err(Error::Asymmetric { .. })
        ));
        let ok = SpectrumSpec::DenseMatrix {
            rows: vec![vec![2.0, 0.5], vec![0.5 + 1e-13, 2.0]],
        };
        let m = build_model(2, 2, &[ok], vec![vec![1.0; 2]]).unwrap();
        let s = m.sigmas()[0].to_dense();
        assert_eq!(s[(0, 1)], s[(1, 0)]);
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(
            build_model(2, 2, &[], vec![]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            build_model(2, 2, &[SpectrumSpec::identity()], vec![vec![1.0; 3]]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            build_model(
                2,
                2,
                &[SpectrumSpec::identity()],
                vec![vec![1.0; 2], vec![1.0; 2]]
            ),
            Err(Error::Dimension(_))
        ));
        let bad_list = SpectrumSpec::EigenvalueList {
            values: vec![1.0, -1.0],
        };
        assert!(build_model(2, 2, &[bad_list], vec![vec![1.0; 2]]).is_err());
    }

    #[test]
    fn full_sib_scalings() {
        let d = NestedDesign::full_sib(&[2, 1, 2]).unwrap();
        let l = scalings_from_design(&d);
        let s2 = 2f64.sqrt();
        assert_eq!(l[0], vec![s2, 1.0, s2]);
        assert_eq!(l[1], vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn singleton_design_gives_identity() {
        let d = NestedDesign::from_group_sizes(&[vec![1; 4], vec![1; 4], vec![1; 4]]).unwrap();
        for l in scalings_from_design(&d) {
            assert_eq!(l, vec![1.0; 4]);
        }
    }

    #[test]
    fn three_level_matches_dense_products() {
        let d = NestedDesign::from_group_sizes(&[vec![4], vec![2, 2], vec![1, 1, 1, 1]]).unwrap();
        let l = scalings_from_design(&d);
        let oracle = dense_scaling_squares(&d);
        for r in 0..3 {
            assert_relative_eq!(l[r][0] * l[r][0], oracle[r][0], max_relative = 1e-14);
        }
        // (4^2)/4, (2^2 + 2^2)/4, 4/4
        assert_relative_eq!(l[0][0], 2.0, epsilon = 1e-15);
        assert_relative_eq!(l[1][0], 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(l[2][0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn non_nested_rejected() {
        let err =
            NestedDesign::from_assignments(vec![vec![0, 0, 1, 1], vec![0, 1, 1, 2]]).unwrap_err();
        assert!(matches!(err, Error::NonNested(_)));
    }

    #[test]
    fn support_bound_examples() {
        let m = build_model(10, 10, &[SpectrumSpec::identity()], vec![vec![1.0; 10]]).unwrap();
        let (lo, hi) = support_bound(&m);
        assert_eq!(lo, 0.0);
        assert_relative_eq!(hi, (1.0 + 1.2f64.sqrt()).powi(2), max_relative = 1e-14);

        let s2 = 2f64.sqrt();
        let m = build_model(
            10,
            10,
            &[SpectrumSpec::identity(), SpectrumSpec::identity()],
            vec![vec![s2; 10], vec![1.0; 10]],
        )
        .unwrap();
        let (_, hi) = support_bound(&m);
        assert_relative_eq!(
            hi,
            4.0 * (1.0 + 1.2f64.sqrt()).powi(2) * 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn t_matrix_examples() {
        let m = build_model(3, 2, &[SpectrumSpec::identity()], vec![vec![0.0, 1.0]]).unwrap();
        assert_eq!(t_matrix(&m, 0).unwrap(), DMatrix::zeros(3, 3));
        assert!(t_matrix(&m, 2).is_err());

        let m = build_model(
            3,
            1,
            &[SpectrumSpec::identity(), SpectrumSpec::identity()],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap();
        assert_eq!(t_matrix(&m, 0).unwrap(), DMatrix::identity(3, 3) * 2.0);
    }

    #[test]
    fn full_sib_t_matrix_matches_direct_sum() {
        let p = 4;
        let sa = DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                1.0
            } else {
                0.3f64.powi((i as i32 - j as i32).abs())
            }
        });
        let se = DMatrix::identity(p, p) * 0.7;
        let rows = |m: &DMatrix<f64>| (0..p).map(|i| m.row(i).iter().copied().collect()).collect();
        let design = NestedDesign::full_sib(&[2, 1]).unwrap();
        let m = build_model(
            p,
            2,
            &[
                SpectrumSpec::DenseMatrix { rows: rows(&sa) },
                SpectrumSpec::DenseMatrix { rows: rows(&se) },
            ],
            scalings_from_design(&design),
        )
        .unwrap();
        let t = t_matrix(&m, 0).unwrap();
        let direct = &sa * 2.0 + &se;
        assert!((t - direct).amax() < 1e-14);
    }

    #[test]
    fn trace_summaries() {
        let m = build_model(
            3,
            2,
            &[SpectrumSpec::EigenvalueList {
                values: vec![1.0, 2.0, 3.0],
            }],
            vec![vec![1.0, 2.0]],
        )
        .unwrap();
        // (1/N) Σ_j l_j^2 Tr Σ = (1 + 4) * 6 / 2
        assert_relative_eq!(m.mean_trace(), 15.0, epsilon = 1e-14);
        // Σ_j l_j^4 Tr Σ^2 = (1 + 16) * 14
        assert_relative_eq!(m.sum_trace_squares(), 238.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_preserves_spectrum() {
        let spectra = [SpectrumSpec::EigenvalueList {
            values: vec![1.0, 2.0, 3.0, 4.0],
        }];
        let opts = ModelOptions {
            rotation_seed: Some(3),
            ..Default::default()
        };
        let m = build_model_with(4, 4, &spectra, vec![vec![1.0; 4]], &opts).unwrap();
        assert!(!m.is_diagonal());
        let mut ev: Vec<f64> = SymmetricEigen::new(m.sigmas()[0].to_dense())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn model_config_round_trip() {
        let json = r#"{
            "n": 6,
            "spectra": [
                {"kind": "exponential-decay", "tau1": 1.0, "tau2": 0.3},
                {"kind": "scaled-identity", "tau_e": 1.0}
            ],
            "design": {"kind": "full-sib", "F": 5, "sibling_probs": [0.5, 0.5], "seed": 11}
        }"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        let built = cfg.build().unwrap();
        assert_eq!(built.model.samples(), 5);
        assert_eq!(built.model.levels(), 2);
        let design = built.design.unwrap();
        assert!(design.is_full_sib());
        let again = cfg.build().unwrap().design.unwrap();
        assert_eq!(design, again);

        let bad = r#"{"n": 2, "N": 2, "spectra": [{"kind": "scaled-identity", "tau_e": 1}], "scalings": [{"constant": 1.0}], "extra": 1}"#;
        assert!(serde_json::from_str::<ModelConfig>(bad).is_err());
    }

    fn nested_design_strategy() -> impl Strategy<Value = NestedDesign> {
        // Three levels: families, subgroups, individuals.
        prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..6).prop_map(|families| {
            let mut a0 = Vec::new();
            let mut a1 = Vec::new();
            let mut sub = 0;
            for (f, subs) in families.iter().enumerate() {
                for s in subs {
                    for _ in 0..*s {
                        a0.push(f);
                        a1.push(sub);
                    }
                    sub += 1;
                }
            }
            let a2 = (0..a0.len()).collect();
            NestedDesign::from_assignments(vec![a0, a1, a2]).unwrap()
        })
    }

    proptest! {
        #[test]
        fn scalings_square_to_dense_formula(design in nested_design_strategy()) {
            prop_assume!(design.total_samples() <= 50);
            let l = scalings_from_design(&design);
            let oracle = dense_scaling_squares(&design);
            for r in 0..design.levels() {
                for f in 0..design.group_counts()[0] {
                    prop_assert!(l[r][f] > 0.0);
                    prop_assert!((l[r][f] * l[r][f] - oracle[r][f]).abs() <= 1e-12 * oracle[r][f].max(1.0));
                }
            }
        }

        #[test]
        fn t_matrices_are_psd(vals in prop::collection::vec(0.0f64..3.0, 4), ls in prop::collection::vec(-2.0f64..2.0, 3), seed in 0u64..100) {
            let spectra = [SpectrumSpec::EigenvalueList { values: vals.clone() }, SpectrumSpec::ScaledIdentity { tau_e: 0.5 }];
            let opts = ModelOptions { rotation_seed: Some(seed), ..Default::default() };
            let m = build_model_with(4, 3, &spectra, vec![ls.clone(), vec![1.0; 3]], &opts).unwrap();
            for j in 0..3 {
                let t = t_matrix(&m, j).unwrap();
                prop_assert!(SymmetricEigen::new(t).eigenvalues.min() >= -1e-10);
            }
        }

        #[test]
        fn support_bound_monotone(k in 1usize..4, sl in 0.1f64..3.0, ss in 0.1f64..3.0, margin in 0.05f64..1.0, bump in 0.0f64..1.0) {
            let make = |k: usize, sl: f64, ss: f64, margin: f64| {
                let spectra = vec![SpectrumSpec::ScaledIdentity { tau_e: ss * ss }; k];
                let opts = ModelOptions { aspect_margin: Some(margin), ..Default::default() };
                support_bound(&build_model_with(3, 3, &spectra, vec![vec![sl; 3]; k], &opts).unwrap()).1
            };
            let base = make(k, sl, ss, margin);
            prop_assert!(make(k + 1, sl, ss, margin) >= base);
            prop_assert!(make(k, sl + bump, ss, margin) >= base);
            prop_assert!(make(k, sl, ss + bump, margin) >= base);
            prop_assert!(make(k, sl, ss, margin + bump) >= base);
        }
    }
}
