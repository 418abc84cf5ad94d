//! Central finite differences as an independent oracle for `Graph::backward`.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Per-tensor outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per checked tensor, in input order.
    pub per_tensor: Vec<f64>,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares autodiff gradients of `f` against central differences.
///
/// `f` receives the checked tensors as graph parameters and must return a
/// scalar node. Every coordinate is perturbed by `±eps`; the error for a
/// coordinate is `|g - ĝ| / max(1, |g|, |ĝ|)` and the maximum is returned.
pub fn finite_diff_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(finite_diff_report(params, eps, f)?.max_rel_error)
}

pub fn finite_diff_report<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {base}")));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut coordinates = 0;
    for (t, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = grad.data()[i];
            let denom = 1.0f64.max(exact.abs()).max(numeric.abs());
            worst = worst.max((exact - numeric).abs() / denom);
            coordinates += 1;
        }
        per_tensor.push(worst);
    }
    let max_rel_error = per_tensor.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_rel_error,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn affine_objective_is_exact() {
        let w = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let x = Tensor::vector(vec![1.0, 2.0, -0.5]);
        let err = finite_diff_check(&[x], 1e-5, |g, v| {
            let w = g.constant(w.clone());
            let p = g.mul(v[0], w)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let err = finite_diff_check(&[Tensor::ones(&[2, 2])], 1e-5, |g, _| {
            Ok(g.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn elementwise_product_sum_matches() {
        let a = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.25, 4.0], &[-1.5, 2.0]]).unwrap();
        let err = finite_diff_check(&[a, b], 1e-5, |g, v| {
            let p = g.mul(v[0], v[1])?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn rejects_non_finite_objective() {
        let r = finite_diff_check(&[Tensor::ones(&[1])], 1e-5, |g, _| {
            Ok(g.constant(Tensor::scalar(f64::NAN)))
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    // Each differentiable primitive on its own, random small inputs.
    fn check_unary(name: &str, shape: &[usize], f: impl Fn(&mut Graph, Var) -> Result<Var>) {
        let mut rng = Rng::derive(1, name);
        let x = rng.normal_tensor(shape, 1.0);
        let weights = {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let out = f(&mut g, v).unwrap();
            rng.normal_tensor(g.shape(out), 1.0)
        };
        let err = finite_diff_check(&[x], 1e-5, |g, v| {
            let y = f(g, v[0])?;
            let w = g.constant(weights.clone());
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(err < 1e-6, "{name}: {err}");
    }

    #[test]
    fn primitives_pass_gradient_check() {
        let mut rng = Rng::new(2);
        let m = rng.normal_tensor(&[3, 4], 1.0);
        let m2 = m.clone();
        check_unary("matmul", &[2, 3], move |g, x| {
            let c = g.constant(m.clone());
            g.matmul(x, c)
        });
        check_unary("matmul_nt", &[2, 4], move |g, x| {
            let c = g.constant(m2.clone());
            g.matmul_nt(x, c)
        });
        check_unary("softmax", &[2, 5], |g, x| Ok(g.softmax(x)));
        check_unary("gelu", &[3, 3], |g, x| Ok(g.gelu(x)));
        check_unary("transpose", &[2, 3], |g, x| g.transpose(x));
        check_unary("scale", &[4], |g, x| Ok(g.scale(x, -1.7)));
        check_unary("layer_norm", &[3, 4], |g, x| {
            let gam = g.constant(Tensor::vector(vec![0.5, 1.5, -1.0, 2.0]));
            let bet = g.constant(Tensor::vector(vec![0.1, 0.0, -0.2, 0.3]));
            g.layer_norm(x, gam, bet, 1e-5)
        });
        check_unary("slices", &[4, 5], |g, x| {
            let a = g.slice_rows(x, 1, 2)?;
            let b = g.slice_cols(a, 2, 3)?;
            let c = g.slice_cols(x, 0, 3)?;
            g.concat_rows(&[b, c])
        });
        check_unary("concat_cols", &[3, 2], |g, x| {
            let t = g.transpose(x)?;
            let t2 = g.transpose(t)?;
            g.concat_cols(&[x, t2])
        });
        check_unary("mean_rows", &[4, 3], |g, x| g.mean_rows(x));
        check_unary("mean_stack", &[2, 3], |g, x| {
            let y = g.scale(x, 2.0);
            let z = g.gelu(x);
            g.mean_stack(&[x, y, z])
        });
        check_unary("add_row", &[3, 2], |g, x| {
            let c = g.constant(Tensor::vector(vec![1.0, -1.0]));
            g.add_row(x, c)
        });
        check_unary("cross_entropy", &[1, 5], |g, x| g.cross_entropy(x, 3));
    }

    #[test]
    fn layer_norm_gamma_beta_gradients() {
        let mut rng = Rng::new(4);
        let x = rng.normal_tensor(&[3, 4], 1.0);
        let gam = rng.normal_tensor(&[4], 1.0);
        let bet = rng.normal_tensor(&[4], 1.0);
        let w = rng.normal_tensor(&[3, 4], 1.0);
        let err = finite_diff_check(&[x, gam, bet], 1e-5, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = g.constant(w.clone());
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn deep_composition_passes() {
        let mut rng = Rng::new(8);
        let x = rng.normal_tensor(&[3, 4], 1.0);
        let ws: Vec<Tensor> = (0..5).map(|_| rng.normal_tensor(&[4, 4], 0.5)).collect();
        let mut params = vec![x];
        params.extend(ws);
        let err = finite_diff_check(&params, 1e-5, |g, v| {
            let mut h = v[0];
            for w in &v[1..] {
                h = g.matmul_nt(h, *w)?;
                h = g.gelu(h);
                h = g.softmax(h);
            }
            let m = g.mean_rows(h)?;
            g.cross_entropy(m, 1)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
