use rand::Rng;

use super::{shape_err, NeuralError};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose forward output was not positive.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Per-element multipliers applied by inverted dropout (0 or 1/(1−rate)).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn identity() -> Self {
        Self(None)
    }

    pub fn factors(&self) -> Option<&[f64]> {
        self.0.as_deref()
    }
}

/// Inverted dropout. Identity in inference mode or when `rate` is 0.
pub fn dropout<R: Rng + ?Sized>(
    input: &mut [f64],
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<DropoutMask, NeuralError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NeuralError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(DropoutMask::identity());
    }
    let keep = 1.0 / (1.0 - rate);
    let factors: Vec<f64> = input
        .iter_mut()
        .map(|v| {
            let f = if rng.random::<f64>() < rate { 0.0 } else { keep };
            *v *= f;
            f
        })
        .collect();
    Ok(DropoutMask(Some(factors)))
}

pub fn dropout_backward(mask: &DropoutMask, grad: &mut [f64]) {
    if let Some(f) = mask.factors() {
        for (g, &m) in grad.iter_mut().zip(f) {
            *g *= m;
        }
    }
}

/// Mean squared error and its gradient 2(p − t)/n.
pub fn mse_loss(prediction: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NeuralError> {
    if prediction.len() != target.len() {
        return shape_err(format!("prediction length {} ≠ target length {}", prediction.len(), target.len()));
    }
    if prediction.is_empty() {
        return shape_err("empty prediction");
    }
    let n = prediction.len() as f64;
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activations_stay_in_range() {
        for x in [-1e308, -745.0, -30.0, -1.0, 0.0, 1.0, 30.0, 745.0, 1e308] {
            let s = sigmoid(x);
            assert!((0.0..=1.0).contains(&s) && s.is_finite());
            assert!((-1.0..=1.0).contains(&x.tanh()));
            let mut r = [x];
            relu(&mut r);
            assert!(r[0] >= 0.0);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![1.0, -2.0, 3.0];
        for training in [true, false] {
            let mut y = x.clone();
            dropout(&mut y, 0.0, &mut rng, training).unwrap();
            assert_eq!(y, x);
        }
        let mut y = x.clone();
        dropout(&mut y, 0.9, &mut rng, false).unwrap();
        assert_eq!(y, x);
        assert!(dropout(&mut y, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let x: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.25).collect();
        let mut y = x.clone();
        dropout(&mut y, 0.5, &mut rng, true).unwrap();
        let survivors = y.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.5).abs() < 0.005, "{survivors}");
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        assert!((my - mx).abs() / mx < 0.01);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(mse_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap().0, 1.0);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());

        let p: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let t: Vec<f64> = (0..9).map(|i| (i as f64 * 1.9).cos()).collect();
        let (l, g) = mse_loss(&p, &t).unwrap();
        let mut brute = 0.0;
        for i in 0..9 {
            brute += (p[i] - t[i]) * (p[i] - t[i]);
        }
        assert!((l - brute / 9.0).abs() < 1e-12);
        let r = grad_check(|x| mse_loss(x, &t).unwrap().0, &p, &g, 1e-5, 1e-6);
        assert!(r.passed, "{r:?}");
    }
}
