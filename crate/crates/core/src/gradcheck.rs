//! Central finite-difference gradient verification.
//!
//! This module never touches the reverse-mode path: it re-evaluates the
//! forward closure with perturbed parameters, so it stays an independent
//! oracle for the gradients that `backward()` produces.

use crate::autodiff::{no_grad, Tensor};

/// Worst elementwise deviation found by [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over elements of |analytic − numeric| / (|numeric| + 1e-8)
    pub max_rel_err: f64,
    /// Parameter name and flat element index where the max occurred.
    pub worst: Option<(String, usize)>,
    pub elements_checked: usize,
}

/// Central difference of `eval` with respect to every element of `param`.
///
/// `eval` must recompute the scalar objective from current parameter values;
/// it runs with gradient recording disabled.
pub fn central_difference(param: &Tensor, mut eval: impl FnMut() -> f64, h: f64) -> Vec<f64> {
    let n = param.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let original = param.data()[i];
        param.data_mut()[i] = original + h;
        let plus = no_grad(&mut eval);
        param.data_mut()[i] = original - h;
        let minus = no_grad(&mut eval);
        param.data_mut()[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Compares analytic grads (already populated on `params`) against central
/// differences of `eval`, elementwise over every parameter.
pub fn check_gradients(
    params: &[(String, Tensor)],
    mut eval: impl FnMut() -> f64,
    h: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        elements_checked: 0,
    };
    for (name, param) in params {
        let analytic = param
            .grad()
            .unwrap_or_else(|| vec![0.0; param.numel()]);
        let numeric = central_difference(param, &mut eval, h);
        for (i, (a, n_)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n_).abs() / (n_.abs() + 1e-8);
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{self as ad, Tensor};

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // 3x4 · 4x2, loss = sum(output); fixed values, no rng needed
        let a_data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b_data: Vec<f64> = (0..8).map(|i| (i as f64 * 0.61).cos()).collect();
        let a = Tensor::param(a_data, &[3, 4]).unwrap();
        let b = Tensor::param(b_data, &[4, 2]).unwrap();
        let loss = ad::sum(&ad::matmul(&a, &b).unwrap());
        loss.backward().unwrap();
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let eval = || ad::sum(&ad::matmul(&a, &b).unwrap()).item();
        let report = check_gradients(&params, eval, 1e-4);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = Tensor::param(vec![0.3, -1.2, 0.8, 2.0, 0.05, -0.4], &[2, 3]).unwrap();
        let w = Tensor::from_vec(vec![0.7, -0.3, 1.3, 0.2, -1.1, 0.5], &[2, 3]).unwrap();
        let forward = |x: &Tensor| {
            let y = ad::softmax_last(x).unwrap();
            ad::sum(&ad::mul(&y, &w).unwrap())
        };
        forward(&x).backward().unwrap();
        let params = vec![("x".to_string(), x.clone())];
        let report = check_gradients(&params, || forward(&x).item(), 1e-5);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = Tensor::param(vec![0.5, -0.2, 1.4, 0.0, 2.0, -1.0], &[2, 3]).unwrap();
        let g = Tensor::param(vec![1.1, 0.9, 1.0], &[3]).unwrap();
        let b = Tensor::param(vec![0.0, 0.1, -0.1], &[3]).unwrap();
        let w = Tensor::from_vec(vec![0.7, -0.3, 1.3, 0.2, -1.1, 0.5], &[2, 3]).unwrap();
        let forward = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let y = ad::layer_norm(x, g, b, 1e-5).unwrap();
            ad::sum(&ad::mul(&y, &w).unwrap())
        };
        forward(&x, &g, &b).backward().unwrap();
        let params = vec![
            ("x".to_string(), x.clone()),
            ("g".to_string(), g.clone()),
            ("b".to_string(), b.clone()),
        ];
        let report = check_gradients(&params, || forward(&x, &g, &b).item(), 1e-5);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits =
            Tensor::param(vec![0.2, -1.0, 0.7, 3.0, 0.0, -0.5, 1.1, 0.4], &[2, 4]).unwrap();
        let targets = [2u32, 0u32];
        let forward = |l: &Tensor| {
            ad::cross_entropy_label_smoothed(l, &targets, 0.1, 99, ad::Reduction::MeanNonPad)
                .unwrap()
        };
        forward(&logits).backward().unwrap();
        let params = vec![("logits".to_string(), logits.clone())];
        let report = check_gradients(&params, || forward(&logits).item(), 1e-5);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn conv_glu_gradient_matches_finite_differences() {
        let x = Tensor::param((0..24).map(|i| (i as f64 * 0.31).sin()).collect(), &[6, 4])
            .unwrap();
        let w = Tensor::param(
            (0..160).map(|i| (i as f64 * 0.17).cos() * 0.3).collect(),
            &[8, 5, 4], // emits 2·4 channels, GLU halves back to 4
        )
        .unwrap();
        let b = Tensor::param(vec![0.05; 8], &[8]).unwrap();
        let m = Tensor::from_vec((0..12).map(|i| 0.1 * i as f64 - 0.5).collect(), &[3, 4])
            .unwrap();
        let forward = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let c = ad::conv1d(x, w, b, 2, 2).unwrap();
            let g = ad::glu_cols(&c).unwrap();
            ad::sum(&ad::mul(&g, &m).unwrap())
        };
        forward(&x, &w, &b).backward().unwrap();
        let params = vec![
            ("x".to_string(), x.clone()),
            ("w".to_string(), w.clone()),
            ("b".to_string(), b.clone()),
        ];
        let report = check_gradients(&params, || forward(&x, &w, &b).item(), 1e-5);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
