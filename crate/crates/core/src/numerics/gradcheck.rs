use crate::error::{bail, Result};

use super::graph::{Graph, Var};
use super::params::ParamStore;

/// Largest relative disagreement between reverse-mode gradients and central
/// finite differences, `|g_ad − g_fd| / max(1e-12, |g_ad| + |g_fd|)`, over
/// every scalar in `params`.
///
/// The differences use the fourth-order central stencil
/// `(−f(w+2ε) + 8f(w+ε) − 8f(w−ε) + f(w−2ε)) / 12ε`. `loss` must be
/// deterministic; a non-deterministic loss gives a meaningless result.
pub fn finite_diff_check<F>(params: &ParamStore, eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        bail!(Argument, "finite-difference step {eps} outside [1e-7, 1e-3]");
    }
    let mut g = Graph::new();
    let root = loss(&mut g, params)?;
    if g.value(root).len() != 1 {
        bail!(Shape, "loss must be a scalar, got {:?}", g.value(root).shape());
    }
    let grads = g.backward(root);
    let mut analytic = ParamStore::new();
    for (name, t) in params.iter() {
        analytic.insert(name, t.clone())?;
    }
    analytic.zero_grads();
    grads.accumulate_into(&mut analytic, 1.0)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss(&mut g, p)?;
        Ok(g.value(root).item())
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let ad = analytic.grad(name).expect("zeroed above").data().to_vec();
        for (i, &ad_i) in ad.iter().enumerate() {
            let orig = params.get(name)?.data()[i];
            let mut at = |w: f64| -> Result<f64> {
                probe.get_mut(name)?.data_mut()[i] = w;
                eval(&probe)
            };
            let f_p2 = at(orig + 2.0 * eps)?;
            let f_p1 = at(orig + eps)?;
            let f_m1 = at(orig - eps)?;
            let f_m2 = at(orig - 2.0 * eps)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let fd = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * eps);
            let err = (ad_i - fd).abs() / (ad_i.abs() + fd.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![3.0])).unwrap();
        let err = finite_diff_check(&p, 1e-4, |g, p| {
            let w = g.param(p, "w")?;
            let sq = g.mul(w, w)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let p = ParamStore::new();
        let r = finite_diff_check(&p, 1e-2, |g, _| Ok(g.input(Tensor::scalar(0.0))));
        assert!(r.is_err());
    }
}
