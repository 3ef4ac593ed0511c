//! Statistical helpers and the finite-difference gradient contract.

use crate::error::{Result, SolarError};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, norm, Tensor};

/// Named trainable tensor with a gradient slot of identical shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub gradient: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let gradient = Tensor::zeros(tensor.shape().to_vec());
        Parameter { name: name.into(), tensor, gradient }
    }

    pub fn zero_grad(&mut self) {
        for g in self.gradient.data_mut() {
            *g = 0.0;
        }
    }
}

/// Cosine similarity matrix between the rows of A (m×d) and B (n×d).
/// Zero-norm rows are hard errors so fixture bugs surface immediately.
pub fn pairwise_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.cols();
    if b.cols() != d {
        return Err(SolarError::Shape(format!(
            "pairwise_cosine dims {} vs {}",
            d,
            b.cols()
        )));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut na = Vec::with_capacity(m);
    for i in 0..m {
        let nv = norm(a.row(i));
        if nv == 0.0 {
            return Err(SolarError::Degenerate(format!("zero-norm row {} in A", i)));
        }
        na.push(nv);
    }
    let mut nb = Vec::with_capacity(n);
    for j in 0..n {
        let nv = norm(b.row(j));
        if nv == 0.0 {
            return Err(SolarError::Degenerate(format!("zero-norm row {} in B", j)));
        }
        nb.push(nv);
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = dot(a.row(i), b.row(j)) / (na[i] * nb[j]);
        }
    }
    Ok(Tensor::new(vec![m, n], out))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(SolarError::Degenerate("zero-norm vector in cosine".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(SolarError::Shape(format!(
            "pearson_corr needs two samples of equal length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SolarError::Degenerate("zero variance in pearson_corr".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Build a scalar objective on a fresh tape from leaf vars bound to `inputs`.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

/// Compare analytic tape gradients against central finite differences.
/// Returns the maximum relative error over all coordinates of all inputs.
pub fn grad_check(f: ScalarFn, inputs: &[Tensor], h: f64) -> Result<f64> {
    assert!((1e-6..=1e-4).contains(&h), "step size out of contract range");
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars);
    let f0 = tape.value(root).item();
    if !f0.is_finite() {
        return Err(SolarError::NonFinite("objective is not finite".into()));
    }
    let grads = tape.backward(root);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(&tape, *v)).collect();

    let mut max_rel = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.len() {
            let orig = t.data()[ci];
            perturbed[ti].data_mut()[ci] = orig + h;
            let fp = eval_scalar(f, &perturbed)?;
            perturbed[ti].data_mut()[ci] = orig - h;
            let fm = eval_scalar(f, &perturbed)?;
            perturbed[ti].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

fn eval_scalar(f: ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars);
    let v = tape.value(root).item();
    if !v.is_finite() {
        return Err(SolarError::NonFinite("objective is not finite".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let c = pairwise_cosine(&a, &a).unwrap();
        assert_eq!(c.data(), &[1.0]);

        let b = Tensor::from_rows(&[vec![0.0, 1.0]]);
        let c = pairwise_cosine(&a, &b).unwrap();
        assert_eq!(c.data(), &[0.0]);

        let a = Tensor::from_rows(&[vec![1.0, 1.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        let c = pairwise_cosine(&a, &b).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!((c.data()[0] - r).abs() < 1e-12);
        assert!((c.data()[1] + r).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_error() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]);
        assert!(pairwise_cosine(&a, &a).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson_corr(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y = [3.0, 2.0, 1.0];
        assert!((pearson_corr(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        // frozen from the direct formula: cov=1.5, sx=sy=sqrt(1.25·1.5)…
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 2.0, 4.0, 3.0];
        assert!((pearson_corr(&x, &y).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_zero_variance_error() {
        let x = [1.0, 1.0, 1.0];
        let y = [1.0, 2.0, 3.0];
        assert!(pearson_corr(&x, &y).is_err());
    }

    #[test]
    fn grad_check_square() {
        let f: ScalarFn = &|tape, vars| tape.mul(vars[0], vars[0]);
        let err = grad_check(f, &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {}", err);
    }
}
