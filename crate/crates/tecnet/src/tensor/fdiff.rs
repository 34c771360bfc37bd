//! Central finite-difference gradient oracle, independent of the backward
//! graph. Runs in f64 so the truncation error stays at eps^2 order.

use super::{Tensor, TensorError, TensorResult};

/// Gradient of a scalar-valued function at `x` by central differences:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per element.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, eps: f64) -> TensorResult<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> TensorResult<Tensor<f64>>,
{
    if eps <= 0.0 {
        return Err(TensorError::NonPositive {
            what: "eps",
            value: eps,
        });
    }
    let base = x.to_vec();
    let mut grad = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let fp = eval_scalar(&f, x.shape(), plus)?;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fm = eval_scalar(&f, x.shape(), minus)?;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::from_vec(x.shape(), grad)
}

fn eval_scalar<F>(f: &F, shape: &[usize], data: Vec<f64>) -> TensorResult<f64>
where
    F: Fn(&Tensor<f64>) -> TensorResult<Tensor<f64>>,
{
    let probe = Tensor::from_vec(shape, data)?;
    let out = f(&probe)?;
    if out.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: out.shape().to_vec(),
        });
    }
    Ok(out.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.mul(t)?.sum_all()), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn linear_gradient_is_exact_slope() {
        let x = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let w = [2.0, -4.0, 0.5];
        let g = finite_diff_grad(
            |t| {
                let wt = Tensor::from_vec(&[3], w.to_vec())?;
                Ok(t.mul(&wt)?.sum_all())
            },
            &x,
            1e-6,
        )
        .unwrap();
        for (gi, wi) in g.to_vec().iter().zip(w.iter()) {
            assert!((gi - wi).abs() < 1e-9);
        }
    }

    #[test]
    fn agrees_with_backward_on_composite() {
        // conv + sigmoid composite, backward vs central differences
        use super::super::ConvSpec;
        let xd: Vec<f64> = (0..16).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let kd: Vec<f64> = (0..9).map(|i| ((i * 29 % 11) as f64 - 5.0) / 10.0).collect();
        let x = Tensor::param(&[1, 1, 4, 4], xd.clone()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], kd.clone()).unwrap();
        let b = Tensor::zeros(&[1]);
        let spec = ConvSpec::square(3, 1, 1);
        let loss = x.conv2d(&k, &b, &spec).unwrap().sigmoid().sum_all();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();

        let probe = Tensor::from_vec(&[1, 1, 4, 4], xd).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let k = Tensor::from_vec(&[1, 1, 3, 3], kd.clone())?;
                let b = Tensor::zeros(&[1]);
                Ok(t.conv2d(&k, &b, &spec)?.sigmoid().sum_all())
            },
            &probe,
            1e-5,
        )
        .unwrap();
        for (a, f) in analytic.iter().zip(fd.to_vec().iter()) {
            assert!((a - f).abs() < 1e-7, "{a} vs {f}");
        }
    }
}
