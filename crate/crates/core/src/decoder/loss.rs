use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};

/// `(1−ε)·NLL + ε·mean_c NLL_c`, averaged over targets that are not `ignore`.
pub fn label_smoothed_ce(g: &mut Graph, logits: Var, targets: &[usize], epsilon: f64, ignore: usize) -> Result<Var> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("label smoothing {epsilon} outside [0, 1]")));
    }
    let t: Vec<Option<usize>> = targets.iter().map(|&y| (y != ignore).then_some(y)).collect();
    g.smoothed_cross_entropy(logits, &t, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn eval(logits: Tensor, targets: &[usize], eps: f64) -> f64 {
        let mut g = Graph::new();
        let l = g.input(logits);
        let loss = label_smoothed_ce(&mut g, l, targets, eps, 0).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn uniform_prediction_is_log_classes_for_any_epsilon() {
        for eps in [0.0, 0.1, 0.3, 1.0] {
            assert!((eval(Tensor::zeros(&[3, 32]), &[4, 5, 6], eps) - 32f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_epsilon_is_plain_cross_entropy() {
        let logits = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let z = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((eval(logits, &[1], 0.0) - (z - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_closed_form() {
        // Correct class at logit 20, the other 31 at 0.
        let mut row = vec![0.0; 32];
        row[7] = 20.0;
        let lz = (20f64.exp() + 31.0).ln();
        let nll_true = lz - 20.0;
        let mean_nll = (nll_true + 31.0 * lz) / 32.0;
        let want = 0.7 * nll_true + 0.3 * mean_nll;
        let got = eval(Tensor::matrix(1, 32, row).unwrap(), &[7], 0.3);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.3 * mean_nll).abs() < 1e-7);
    }

    #[test]
    fn padding_is_excluded() {
        let logits = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 9.0, -4.0, 0.5]).unwrap();
        let both = eval(logits.clone(), &[1, 0], 0.3);
        let one = eval(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), &[1], 0.3);
        assert!((both - one).abs() < 1e-12);
    }
}
