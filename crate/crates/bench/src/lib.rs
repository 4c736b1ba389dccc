//! Fixtures shared by the benchmarks.

use vcclt::mom::{full_sib_models, TauParams};
use vcclt::{build_model, NestedDesign, SpectrumSpec, VarianceModel};

/// k = 1 model with identity covariance and unit scalings.
pub fn mp_model(n: usize) -> VarianceModel {
    build_model(n, n, &[SpectrumSpec::identity()], vec![vec![1.0; n]]).expect("identity model")
}

pub fn table1_tau() -> TauParams {
    TauParams::new(1.0, 0.3, 1.0).expect("valid parameters")
}

/// Full-sib design with F = `families` and sizes 1 or 2 with equal odds.
pub fn table1_design(families: usize) -> NestedDesign {
    NestedDesign::random_full_sib(families, &[0.5, 0.5], 7).expect("valid design")
}

/// Between-family model of the full-sib design with p = F.
pub fn table1_model(families: usize) -> VarianceModel {
    full_sib_models(&table1_design(families), families, &table1_tau())
        .expect("valid model")
        .0
}
