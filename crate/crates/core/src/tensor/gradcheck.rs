use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Scalar};
use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Leaf name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of the scalar `output` against central
/// differences over every coordinate of every trainable leaf.
pub fn grad_check<T: Scalar>(graph: &mut Graph<T>, output: NodeId, eps: f64) -> Result<GradCheckReport> {
    check(graph, output, eps, None)
}

impl GradCheckReport {
    /// Same as [`grad_check`] but probes at most `per_leaf` randomly chosen
    /// coordinates of each leaf; for models too large to perturb exhaustively.
    pub fn sampled<T: Scalar>(
        graph: &mut Graph<T>,
        output: NodeId,
        eps: f64,
        per_leaf: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        check(graph, output, eps, Some((per_leaf, seed)))
    }
}

fn check<T: Scalar>(
    graph: &mut Graph<T>,
    output: NodeId,
    eps: f64,
    subset: Option<(usize, u64)>,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        bail!(Input, "grad_check eps must lie in (0, 1e-2], got {eps}");
    }
    graph.forward(&[])?;
    let grads = graph.backward(output)?;
    let leaves: Vec<(String, NodeId)> = graph.params().map(|(n, id)| (n.to_string(), id)).collect();
    let mut rng = subset.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (name, id) in leaves {
        let original = graph.value(id).clone();
        let numel = original.numel();
        let coords: Vec<usize> = match (&mut rng, subset) {
            (Some(rng), Some((k, _))) if k < numel => sample(rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for i in coords {
            let mut probe = original.clone();
            let x = probe.data()[i].as_f64();

            probe.data_mut()[i] = T::from_f64(x + eps);
            graph.forward(&[(name.as_str(), probe.clone())])?;
            let plus = graph.value(output).item().as_f64();

            probe.data_mut()[i] = T::from_f64(x - eps);
            graph.forward(&[(name.as_str(), probe)])?;
            let minus = graph.value(output).item().as_f64();

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.wrt(id).map_or(0.0, |g| g.data()[i].as_f64());
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
        graph.forward(&[(name.as_str(), original)])?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_matches_closed_form() {
        // f(x) = x^T A x with A symmetric; closed form gradient 2 A x.
        let mut g = Graph::<f64>::new();
        let a = Tensor::new(vec![3, 3], vec![2.0, 0.5, -1.0, 0.5, 1.0, 0.25, -1.0, 0.25, 3.0]).unwrap();
        let x0 = Tensor::new(vec![3, 1], vec![0.3, -0.7, 1.1]).unwrap();
        let x = g.param("x", x0.clone()).unwrap();
        let am = g.constant(a.clone());
        let ax = g.matmul(am, x).unwrap();
        let xx = g.mul(x, ax).unwrap();
        let f = g.sum(xx).unwrap();

        let grads = g.backward(f).unwrap();
        for r in 0..3 {
            let closed: f64 = 2.0 * (0..3).map(|c| a.at(r, c) * x0.data()[c]).sum::<f64>();
            assert!((grads.param("x").unwrap().data()[r] - closed).abs() < 1e-12);
        }
        let report = grad_check(&mut g, f, 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn rejects_bad_eps() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::scalar(1.0)).unwrap();
        assert!(grad_check(&mut g, x, 0.0).is_err());
        assert!(grad_check(&mut g, x, 0.1).is_err());
    }
}
