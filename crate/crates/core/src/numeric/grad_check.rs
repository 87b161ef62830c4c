//! Central-difference verification of reverse-mode gradients.
//!
//! Only smooth functions are in contract: anything built on argmax or other
//! piecewise-constant selections will report meaningless errors.

use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Var};
use crate::numeric::params::{ParamId, ParamStore};
use crate::numeric::tensor::Tensor;

/// Relative error as used throughout: `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares autodiff gradients of a scalar function of `inputs` against
/// central differences and returns the largest relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_value(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_value(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for idx in 0..probe[which].numel() {
            let orig = probe[which].data()[idx];
            probe[which].data_mut()[idx] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[which].data_mut()[idx] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[idx], numeric));
        }
    }
    Ok(worst)
}

/// Same check, over parameters held in a store. `f` receives the store and a
/// fresh graph and returns a scalar loss. Every listed parameter is checked.
pub fn grad_check_params<F>(store: &mut ParamStore, ids: &[ParamId], f: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_params(store, ids, f, epsilon, 1e-8)
}

/// `floor` bounds the denominator of the relative error from below.
fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], f: F, epsilon: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    for &id in ids {
        store.set_requires_grad(id, true);
    }
    store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_value(&g, out)?;
    g.backward(out)?;
    g.accumulate_param_grads(store);
    let analytic: Vec<Tensor> = ids.iter().map(|&id| store.get(id).grad().clone()).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        scalar_value(&g, out)
    };

    let mut worst: f64 = 0.0;
    for (&id, grad) in ids.iter().zip(&analytic) {
        for idx in 0..grad.numel() {
            let orig = store.get(id).value().data()[idx];
            store.get_mut(id).value_mut().data_mut()[idx] = orig + epsilon;
            let plus = eval(store)?;
            store.get_mut(id).value_mut().data_mut()[idx] = orig - epsilon;
            let minus = eval(store)?;
            store.get_mut(id).value_mut().data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    store.zero_grad();
    Ok(worst)
}

/// Largest relative gradient error of each standard building block on small
/// random instances. Non-scalar outputs are reduced with fixed random weights.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::numeric::layers::{FeedForward, MultiHeadAttention};
    use crate::numeric::params::{Owner, ParamRole};
    use crate::numeric::rng::Rng;

    const EPS: f64 = 1e-5;
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let weigh = |g: &mut Graph, y: Var, w: &Tensor| -> Result<Var> {
        let w = g.input(w.clone());
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    };

    let x = Tensor::randn(&[3, 9], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3, 3], 0.5, &mut rng);
    let b = Tensor::randn(&[4], 0.5, &mut rng);
    let r = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let conv = grad_check(|g, v| { let y = g.conv1d(v[0], v[1], Some(v[2]), 2, 1)?; weigh(g, y, &r) }, &[x, w, b], EPS)?;
    out.push(("conv1d", conv));

    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 8, 2, ParamRole::SelfAttn, Owner::Decoder, &mut rng)?;
    let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let kv = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let r4 = Tensor::randn(&[4, 8], 1.0, &mut rng);
    // Softmax ignores a shift shared by all keys, so the key bias gradient
    // is identically zero; it is compared against a unit floor instead.
    let key_bias = attn.k_proj.bias;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).filter(|&id| id != key_bias).collect();
    let mut worst: f64 = 0.0;
    for (check, floor) in [(ids, 1e-8), (vec![key_bias], 1.0)] {
        let self_attn = check_params(&mut store, &check, |g, s| {
            let x = g.input(q.clone());
            let y = attn.forward(g, s, x, x, x, true)?;
            weigh(g, y, &r4)
        }, EPS, floor)?;
        let cross_attn = check_params(&mut store, &check, |g, s| {
            let x = g.input(q.clone());
            let m = g.input(kv.clone());
            let y = attn.forward(g, s, x, m, m, false)?;
            weigh(g, y, &r4)
        }, EPS, floor)?;
        worst = worst.max(self_attn).max(cross_attn);
    }
    out.push(("attention", worst));

    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let gain = Tensor::randn(&[6], 1.0, &mut rng);
    let shift = Tensor::randn(&[6], 1.0, &mut rng);
    let r = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let ln = grad_check(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weigh(g, y, &r) }, &[x, gain, shift], EPS)?;
    out.push(("layer_norm", ln));

    let table = Tensor::randn(&[7, 5], 1.0, &mut rng);
    let r = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let emb = grad_check(|g, v| { let e = g.gather_rows(v[0], &[3, 0, 3, 6])?; let e = g.scale(e, 5f64.sqrt()); weigh(g, e, &r) }, &[table], EPS)?;
    out.push(("embedding", emb));

    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "ffn", 6, 10, Owner::Encoder, &mut rng)?;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in &ids {
        let t = Tensor::randn(store.get(*id).value().shape(), 0.5, &mut rng);
        *store.get_mut(*id).value_mut() = t;
    }
    let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let r = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let ff = grad_check_params(&mut store, &ids, |g, s| { let xv = g.input(x.clone()); let y = ffn.forward(g, s, xv)?; weigh(g, y, &r) }, EPS)?;
    out.push(("feed_forward", ff));

    let logits = Tensor::randn(&[4, 7], 1.0, &mut rng);
    let ce = grad_check(|g, v| g.smoothed_cross_entropy(v[0], &[Some(2), None, Some(6), Some(0)], 0.3), &[logits], EPS)?;
    out.push(("label_smoothed_ce", ce));
    Ok(out)
}

fn scalar_value(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Usage(format!("grad_check needs a scalar function, got shape {:?}", t.shape())));
    }
    Ok(t.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::Rng;

    #[test]
    fn layer_suite_is_within_tolerance() {
        for (name, err) in layer_suite(3).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = Rng::new(11);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let c = g.input(Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25]).unwrap());
                let p = g.mul(y, c)?;
                Ok(g.sum(p))
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_matches() {
        let mut rng = Rng::new(5);
        let z = Tensor::randn(&[4, 7], 1.0, &mut rng);
        let err = grad_check(
            |g, v| g.smoothed_cross_entropy(v[0], &[Some(0), Some(6), None, Some(3)], 0.0),
            &[z],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn vector_valued_function_is_rejected() {
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(|_, v| Ok(v[0]), &[x], 1e-5).is_err());
    }
}
