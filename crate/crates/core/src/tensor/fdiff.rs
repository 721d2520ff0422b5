use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Central-difference gradient oracle.
///
/// Builds `f` once with a trainable copy of `x` to obtain the analytic
/// gradient, then perturbs each coordinate by `±h` and compares. Returns the
/// max over coordinates of `|analytic - fd| / max(1, |fd|)`.
///
/// `f` must be scalar-valued and deterministic; determinism is verified by
/// evaluating the unperturbed point twice and comparing bits.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let leaf = g.leaf(&x.clone().with_grad());
    let out = f(&mut g, leaf)?;
    g.item(out).map_err(|_| {
        Error::Shape(format!(
            "finite_diff_check needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        ))
    })?;
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: &[f64]| -> Result<f64> {
        let t = Tensor::from_vec(x.shape().to_vec(), data.to_vec())?;
        let mut g = Graph::new();
        let v = g.leaf(&t);
        let out = f(&mut g, v)?;
        g.item(out)
    };

    let base = eval(x.data())?;
    let again = eval(x.data())?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Nondeterministic(format!(
            "double evaluation mismatch: {base} vs {again}"
        )));
    }

    let coord_err = |i: usize| -> Result<f64> {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        Ok((analytic[i] - fd).abs() / fd.abs().max(1.0))
    };

    #[cfg(feature = "parallel")]
    {
        let errs: Result<Vec<f64>> = (0..x.numel()).into_par_iter().map(coord_err).collect();
        Ok(errs?.into_iter().fold(0.0, f64::max))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut worst = 0.0f64;
        for i in 0..x.numel() {
            worst = worst.max(coord_err(i)?);
        }
        Ok(worst)
    }
}
