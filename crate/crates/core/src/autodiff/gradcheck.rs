//! Finite-difference verification of tape gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Outcome of one check. Failures are carried in the report, not raised.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max relative error per checked input, in argument order
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale > 1e-6 {
        diff / scale
    } else {
        diff
    }
}

/// Compare tape gradients against central finite differences in 64-bit.
///
/// `f` must build a scalar root from the leaves it is handed; it runs once
/// analytically and twice per perturbed element with step `1e-5 * (1 + |x|)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor<f64>]| -> (f64, Vec<Option<Tensor<f64>>>) {
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let root = f(&mut g, &ids);
        let value = g.value(root).item();
        g.backward(root);
        let grads = ids.iter().map(|&id| g.grad(id).cloned()).collect();
        (value, grads)
    };

    let (_, analytic) = eval(inputs);
    let mut per_input = Vec::with_capacity(inputs.len());
    for (arg, tensor) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        for elem in 0..tensor.len() {
            let x = tensor.data()[elem];
            let h = 1e-5 * (1.0 + x.abs());
            let mut plus = inputs.to_vec();
            plus[arg].data_mut()[elem] = x + h;
            let mut minus = inputs.to_vec();
            minus[arg].data_mut()[elem] = x - h;
            let (fp, _) = eval(&plus);
            let (fm, _) = eval(&minus);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[arg]
                .as_ref()
                .map(|t| t.data()[elem])
                .unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        per_input,
        max_rel_err,
        tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::{BackwardCtx, BackwardStep, GradSink};

    #[test]
    fn quadratic_passes() {
        // f(x) = sum(x * x); df/dx = 2x
        let x = Tensor::from_vec(&[3], vec![0.5, -1.5, 2.0]);
        let report = gradcheck(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0]).unwrap();
                let flat = g.reshape(sq, &[1, 3]);
                let ones = g.leaf(Tensor::full(&[3, 1], 1.0), false);
                let s = g.matmul(flat, ones).unwrap();
                g.reshape(s, &[])
            },
            &[x],
            1e-6,
        );
        assert!(report.passed(), "max err {}", report.max_rel_err);
    }

    struct BrokenStep {
        x: usize,
    }

    impl BackwardStep<f64> for BrokenStep {
        fn backward(&self, grad: &Tensor<f64>, ctx: &BackwardCtx<'_, f64>, out: &mut GradSink<f64>) {
            if ctx.needs[self.x] {
                // deliberately wrong: claims d(3x)/dx = 1
                out.push((self.x, grad.clone()));
            }
        }
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let x = Tensor::from_vec(&[], vec![0.7]);
        let report = gradcheck(
            |g, ids| {
                let v = g.value(ids[0]).map(|v| v * 3.0);
                let needs = g.node_needs(ids[0]);
                g.push_external(
                    "broken",
                    v,
                    needs,
                    Box::new(BrokenStep {
                        x: ids[0].index(),
                    }),
                )
            },
            &[x],
            1e-4,
        );
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.5);
    }
}
