//! Fixtures shared by the benchmarks.

use slowfast_core::{GridSpec, ModalField, ModelSpec, ReactionSpec, Result, SpectralOperator};

/// Linear benchmark (`a_c = 1`, `b_c = 2`) or cubic_rough slow reaction on
/// `n` Dirichlet modes with `4n` quadrature nodes.
pub fn model(n: usize, cubic: bool, eps: f64) -> Result<ModelSpec> {
    let op1 = SpectralOperator::dirichlet_power_law(n, 1.0, 1.0, 0.3, 1.0, 0.25)?;
    let op2 = SpectralOperator::dirichlet_power_law(n, 1.0, 1.0, 0.5, 1.0, 0.25)?;
    let slow = if cubic {
        ReactionSpec::cubic_rough(1.0, 0.5)
    } else {
        ReactionSpec::linear_slow()
    };
    let mut m = ModelSpec::new(
        op1,
        op2,
        slow,
        ReactionSpec::linear_fast(1.0, 2.0),
        GridSpec::new(n, 4 * n, 1.0)?,
        eps,
        0.1,
        ModalField::unit(n, 1),
        ModalField::zeros(n),
    )?;
    m.h_macro = 1e-3;
    Ok(m)
}
