#![allow(dead_code)]

use vcclt::mom::{full_sib_models, TauParams};
use vcclt::{build_model, Complex64 as C, NestedDesign, SpectrumSpec, VarianceModel};

/// k = 1, L = Id, Σ = Id.
pub fn mp_model(n: usize, samples: usize) -> VarianceModel {
    build_model(
        n,
        samples,
        &[SpectrumSpec::identity()],
        vec![vec![1.0; samples]],
    )
    .unwrap()
}

pub fn table1_tau() -> TauParams {
    TauParams::new(1.0, 0.3, 1.0).unwrap()
}

pub fn table1_design(families: usize, seed: u64) -> NestedDesign {
    NestedDesign::random_full_sib(families, &[0.5, 0.5], seed).unwrap()
}

/// Between-family model of the full-sib design with F = p.
pub fn table1_model(p: usize, seed: u64) -> VarianceModel {
    full_sib_models(&table1_design(p, seed), p, &table1_tau())
        .unwrap()
        .0
}

/// Marchenko–Pastur Stieltjes transform for ratio y = n/N: the root of
/// y z m² + (z - 1 + y) m + 1 = 0 with Im m of the same sign as Im z.
pub fn mp_stieltjes(z: C, y: f64) -> C {
    if z.im < 0.0 {
        return mp_stieltjes(z.conj(), y).conj();
    }
    let a = y * z;
    let b = z - 1.0 + y;
    let disc = (b * b - 4.0 * a).sqrt();
    let r1 = (-b + disc) / (2.0 * a);
    let r2 = (-b - disc) / (2.0 * a);
    if r1.im > 0.0 {
        r1
    } else {
        r2
    }
}

/// Marchenko–Pastur CDF for ratio y ≤ 1 by Simpson's rule after the
/// substitution x = a + (b - a)(1 - cos φ)/2, which removes the edge
/// square roots from the integrand.
pub fn mp_cdf(x: f64, y: f64) -> f64 {
    let lo = (1.0 - y.sqrt()).powi(2);
    let hi = (1.0 + y.sqrt()).powi(2);
    if x <= lo {
        return 0.0;
    }
    if x >= hi {
        return 1.0;
    }
    let phi_max = (1.0 - 2.0 * (x - lo) / (hi - lo)).clamp(-1.0, 1.0).acos();
    let half = 0.5 * (hi - lo);
    let integrand = |phi: f64| {
        let xv = lo + half * (1.0 - phi.cos());
        let s = phi.sin();
        if xv <= 0.0 {
            // y = 1 and φ → 0: sin²φ / (1 - cos φ) → 2.
            return half * half * 2.0 / (2.0 * std::f64::consts::PI * y * half);
        }
        half * half * s * s / (2.0 * std::f64::consts::PI * y * xv)
    };
    let m = 2000;
    let h = phi_max / m as f64;
    let mut total = integrand(0.0) + integrand(phi_max);
    for i in 1..m {
        total += integrand(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    total * h / 3.0
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
