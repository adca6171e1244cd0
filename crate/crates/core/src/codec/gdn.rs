//! Generalized divisive normalization and its inverse.

use percsim_autograd::{Graph, ParamBinding, Tensor, Var};

use crate::error::{Error, Result};

/// Floor added to the squared `beta` parameterization.
pub const BETA_MIN: f64 = 1e-6;

/// Effective (already positive) GDN parameters for `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GdnParams {
    /// `[C]`, each entry at least [`BETA_MIN`].
    pub beta: Vec<f64>,
    /// `[C, C]` row-major, nonnegative.
    pub gamma: Vec<f64>,
}

impl GdnParams {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        let c = beta.len();
        if gamma.len() != c * c {
            return Err(Error::Dimension(format!("gamma has {} entries for {c} channels", gamma.len())));
        }
        if beta.iter().any(|&b| !(b >= BETA_MIN) || !b.is_finite()) {
            return Err(Error::Parameter(format!("beta must be >= {BETA_MIN}")));
        }
        if gamma.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return Err(Error::Parameter("gamma must be nonnegative".into()));
        }
        Ok(Self { beta, gamma })
    }

    /// `beta = 1`, `gamma = 0`: the identity map.
    pub fn identity(channels: usize) -> Self {
        Self { beta: vec![1.0; channels], gamma: vec![0.0; channels * channels] }
    }

    /// Recover effective parameters from the stored square roots.
    pub fn from_raw(beta_raw: &Tensor, gamma_raw: &Tensor) -> Result<Self> {
        Self::new(
            beta_raw.data().iter().map(|b| b * b + BETA_MIN).collect(),
            gamma_raw.data().iter().map(|g| g * g).collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }
}

/// Raw parameters whose squares give `beta = 1` and `gamma = 0.1 I`.
pub fn init_raw(channels: usize) -> (Tensor, Tensor) {
    let beta = Tensor::full(&[channels], (1.0 - BETA_MIN).sqrt());
    let g = 0.1f64.sqrt();
    let gamma = Tensor::from_fn(&[channels, channels], |i| if i / channels == i % channels { g } else { 0.0 });
    (beta, gamma)
}

/// Apply GDN (or IGDN) using raw parameters `prefix.beta` / `prefix.gamma` from a binding.
pub(crate) fn apply<'g>(p: &ParamBinding<'g, '_>, prefix: &str, x: Var<'g>, inverse: bool) -> Var<'g> {
    let beta = p.get(&format!("{prefix}.beta")).square().add_scalar(BETA_MIN);
    let gamma = p.get(&format!("{prefix}.gamma")).square();
    x.gdn(beta, gamma, inverse)
}

/// Evaluate GDN on a `[C, H, W]` array.
pub fn gdn_forward(x: &Tensor, params: &GdnParams, inverse: bool) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] != params.channels() {
        return Err(Error::Dimension(format!(
            "gdn input {s:?} does not match {} channels",
            params.channels()
        )));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("gdn input".into()));
    }
    let c = params.channels();
    let g = Graph::inference();
    let xv = g.constant(x.reshape(&[1, s[0], s[1], s[2]]));
    let beta = g.constant(Tensor::new(&[c], params.beta.clone()));
    let gamma = g.constant(Tensor::new(&[c, c], params.gamma.clone()));
    let y = xv.gdn(beta, gamma, inverse).value().reshape(s);
    if !y.all_finite() {
        return Err(Error::Numeric("gdn output".into()));
    }
    Ok(y)
}

/// Exact inverse of forward GDN when `gamma` is diagonal:
/// `x_i = y_i * sqrt(beta_i / (1 - gamma_ii * y_i^2))`.
pub fn gdn_inverse_diagonal(y: &Tensor, params: &GdnParams) -> Result<Tensor> {
    let c = params.channels();
    let s = y.shape();
    if s.len() != 3 || s[0] != c {
        return Err(Error::Dimension(format!("input {s:?} does not match {c} channels")));
    }
    let off_diagonal = (0..c * c).any(|i| i / c != i % c && params.gamma[i] != 0.0);
    if off_diagonal {
        return Err(Error::Parameter("closed-form inverse needs a diagonal gamma".into()));
    }
    let plane = s[1] * s[2];
    let mut out = Vec::with_capacity(y.len());
    for (i, &v) in y.data().iter().enumerate() {
        let ch = i / plane;
        let denom = 1.0 - params.gamma[ch * c + ch] * v * v;
        if denom <= 0.0 {
            return Err(Error::Domain(format!("{v} is outside the range of GDN on channel {ch}")));
        }
        out.push(v * (params.beta[ch] / denom).sqrt());
    }
    Ok(Tensor::new(s, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_parameters_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[4, 3, 5], -3.0, 3.0, &mut rng);
        let y = gdn_forward(&x, &GdnParams::identity(4), false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_case() {
        let p = GdnParams::new(vec![1.0], vec![1.0]).unwrap();
        let y = gdn_forward(&Tensor::new(&[1, 1, 1], vec![3.0]), &p, false).unwrap();
        assert!((y.item() - 3.0 / 10f64.sqrt()).abs() < 1e-12);
        assert!((y.item() - 0.94868).abs() < 1e-5);
    }

    #[test]
    fn zero_maps_to_zero() {
        let p = GdnParams::new(vec![0.5, 2.0], vec![0.1, 0.3, 0.2, 0.0]).unwrap();
        for inverse in [false, true] {
            let y = gdn_forward(&Tensor::zeros(&[2, 3, 3]), &p, inverse).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn errors() {
        let p = GdnParams::identity(2);
        assert!(matches!(gdn_forward(&Tensor::zeros(&[3, 2, 2]), &p, false), Err(Error::Dimension(_))));
        let x = Tensor::new(&[2, 1, 1], vec![f64::NAN, 0.0]);
        assert!(matches!(gdn_forward(&x, &p, false), Err(Error::Numeric(_))));
        assert!(GdnParams::new(vec![0.0], vec![0.0]).is_err());
        assert!(GdnParams::new(vec![1.0], vec![-0.1]).is_err());
    }

    #[test]
    fn diagonal_inverse_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 4, 4], -2.0, 2.0, &mut rng);
        let p = GdnParams::new(vec![0.7, 1.2, 0.4], vec![0.3, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.1]).unwrap();
        let y = gdn_forward(&x, &p, false).unwrap();
        let back = gdn_inverse_diagonal(&y, &p).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-12));
        }
        let full = GdnParams::new(vec![1.0, 1.0], vec![0.1, 0.2, 0.0, 0.1]).unwrap();
        assert!(gdn_inverse_diagonal(&Tensor::zeros(&[2, 1, 1]), &full).is_err());
    }
}
