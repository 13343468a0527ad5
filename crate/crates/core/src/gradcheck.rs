//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Outcome of a gradient check: per-parameter relative errors.
///
/// The error for a parameter tensor is `max_j |ad_j − fd_j| / den` with
/// `den = max(‖fd‖∞, ‖ad‖∞, 1e-8)`, i.e. elementwise differences measured
/// against the tensor's own gradient scale so that finite-difference noise on
/// near-zero components does not drown the comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub eps: f64,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn worst_param(&self) -> Option<(&String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(n, &e)| (n, e))
    }
}

/// Checks the gradient of a scalar-valued build against central differences
/// `(f(p+eps) − f(p−eps)) / (2·eps)` for every element of every parameter.
///
/// `build` constructs the loss graph from a parameter store; it must be
/// deterministic. Graphs containing a gradient-reversal node are refused:
/// their backward rule is intentionally not a derivative, so a finite
/// difference of the forward function is not an oracle for it.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    build: F,
    eps: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    let (graph, loss) = build(params)?;
    if let Some(node) = graph.non_derivative_node() {
        return Err(Error::NonDerivativeBackward(node));
    }
    let grads = graph.backward(loss)?;
    let analytic = graph.param_gradients(&grads);

    let eval = |p: &ParamStore| -> Result<f64> {
        let (g, l) = build(p)?;
        Ok(g.scalar(l))
    };

    let mut per_param = BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.len();
        let mut fd = Tensor::zeros(params.get(&name)?.shape());
        for j in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name)?.data_mut()[j] += eps;
            let f_plus = eval(&plus)?;
            let mut minus = params.clone();
            minus.get_mut(&name)?.data_mut()[j] -= eps;
            let f_minus = eval(&minus)?;
            fd.data_mut()[j] = (f_plus - f_minus) / (2.0 * eps);
        }
        let ad = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(fd.shape()));
        let den = fd.max_abs().max(ad.max_abs()).max(1e-8);
        let num = ad
            .data()
            .iter()
            .zip(fd.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let rel = num / den;
        max_rel_err = max_rel_err.max(rel);
        per_param.insert(name, rel);
    }

    Ok(FdReport {
        per_param,
        max_rel_err,
        eps,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::params::component_rng;

    fn quadratic_build(p: &ParamStore) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let w = g.param("w", p.get("w")?.clone());
        let sq = g.mul(w, w)?;
        let loss = g.sum(sq);
        Ok((g, loss))
    }

    #[test]
    fn quadratic_loss_is_exact_to_fd_truncation() {
        let mut p = ParamStore::new(0);
        p.insert(
            "w",
            Tensor::from_vec(&[3], vec![1.5, -2.0, 0.25]).unwrap(),
        );
        let report = finite_diff_check(&p, quadratic_build, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn cross_entropy_over_softmax_passes() {
        let mut rng = component_rng(11, 0);
        let mut p = ParamStore::new(11);
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        p.insert("logits", Tensor::from_vec(&[6], logits).unwrap());
        let build = |p: &ParamStore| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let z = g.param("logits", p.get("logits")?.clone());
            let ls = g.log_softmax(z);
            let picked = g.pick(ls, 2)?;
            let loss = g.scale(picked, -1.0);
            Ok((g, loss))
        };
        let report = finite_diff_check(&p, build, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn refuses_gradient_reversal_graphs() {
        let mut p = ParamStore::new(0);
        p.insert("w", Tensor::scalar(1.0));
        let build = |p: &ParamStore| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let w = g.param("w", p.get("w")?.clone());
            let (r, _) = g.gradient_reversal(w, 1.0);
            let loss = g.sum(r);
            Ok((g, loss))
        };
        match finite_diff_check(&p, build, 1e-5, 1e-4) {
            Err(Error::NonDerivativeBackward(node)) => {
                assert!(node.starts_with("grad_reverse"), "{node}");
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn random_composite_graphs_pass_over_many_draws() {
        // Mixed tanh/relu/matmul/layer-norm/log-softmax graphs over 50 draws.
        for draw in 0..50 {
            let mut rng = component_rng(1000 + draw, 0);
            let mut p = ParamStore::new(draw);
            let w1: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w2: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            p.insert("w1", Tensor::from_vec(&[3, 4], w1).unwrap());
            p.insert("w2", Tensor::from_vec(&[4, 2], w2).unwrap());
            p.insert("ln.gain", Tensor::filled(&[4], 1.0));
            p.insert("ln.bias", Tensor::zeros(&[4]));
            let xt = Tensor::from_vec(&[2, 3], x).unwrap();
            let build = move |p: &ParamStore| -> Result<(Graph, NodeId)> {
                let mut g = Graph::new();
                let x = g.input("x", xt.clone());
                let w1 = g.param("w1", p.get("w1")?.clone());
                let w2 = g.param("w2", p.get("w2")?.clone());
                let gain = g.param("ln.gain", p.get("ln.gain")?.clone());
                let bias = g.param("ln.bias", p.get("ln.bias")?.clone());
                let h = g.matmul(x, w1)?;
                let h = g.tanh(h);
                let h = g.layer_norm(h, gain, bias)?;
                let h = g.relu(h);
                let o = g.matmul(h, w2)?;
                let ls = g.log_softmax(o);
                let s = g.sum(ls);
                // keep the loss scale O(1)
                let loss = g.scale(s, 0.25);
                Ok((g, loss))
            };
            let report = finite_diff_check(&p, build, 1e-5, 1e-4).unwrap();
            assert!(
                report.passed(),
                "draw {draw}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst_param()
            );
        }
    }
}
