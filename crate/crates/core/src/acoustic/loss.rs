use etts_autograd::{softplus, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::Shape(format!("mu has {} dims, log_var {}", mu.len(), log_var.len())));
        }
        Ok(Self { mu, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mu: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `KL(q ‖ N(0, I)) = Σ 0.5·(μ² + e^{lv} − 1 − lv)`.
pub fn kld_closed_form(q: &GaussianPosterior) -> f64 {
    q.mu.iter().zip(&q.log_var).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

/// `z = μ + exp(lv/2)·ε`.
pub fn reparameterize(q: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(Error::Shape(format!("noise has {} dims, posterior {}", noise.len(), q.dim())));
    }
    Ok(q.mu.iter().zip(&q.log_var).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcousticLossTerms {
    pub l1: f64,
    pub kld: f64,
    pub stop: f64,
    pub total: f64,
}

/// Reconstruction L1 plus `beta`-weighted KLD on plain values.
pub fn acoustic_loss(pred: &Tensor, target: &Tensor, q: &GaussianPosterior, beta: f64) -> Result<AcousticLossTerms> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let l1 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len().max(1) as f64;
    let kld = kld_closed_form(q);
    Ok(AcousticLossTerms { l1, kld, stop: 0.0, total: l1 + beta * kld })
}

/// Mean stop-token cross-entropy; the positive target is `final_step`.
pub fn stop_bce(logits: &[f64], final_step: usize, pos_weight: f64) -> f64 {
    let n = logits.len().min(final_step + 1);
    let mut sum = 0.0;
    for (t, &l) in logits[..n].iter().enumerate() {
        sum += if t == final_step { pos_weight * softplus(-l) } else { softplus(l) };
    }
    sum / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kld_cases() {
        assert_eq!(kld_closed_form(&GaussianPosterior::standard(64)), 0.0);
        let q = GaussianPosterior::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kld_closed_form(&q) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_cases() {
        let q = GaussianPosterior::new(vec![0.3, -1.0], vec![0.5, -0.2]).unwrap();
        assert_eq!(reparameterize(&q, &[0.0, 0.0]).unwrap(), q.mu);
        let s = GaussianPosterior::standard(2);
        assert_eq!(reparameterize(&s, &[0.7, -0.1]).unwrap(), vec![0.7, -0.1]);
        assert!(reparameterize(&s, &[0.0]).is_err());
    }

    #[test]
    fn loss_breakdown() {
        let y = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let q0 = GaussianPosterior::standard(3);
        let t = acoustic_loss(&y, &y, &q0, 7.0).unwrap();
        assert_eq!((t.l1, t.kld, t.total), (0.0, 0.0, 0.0));
        let p = Tensor::from_rows(&[vec![1.5, 2.0], vec![2.0, 4.0]]);
        let q = GaussianPosterior::new(vec![1.0, 0.0, 0.0], vec![0.0; 3]).unwrap();
        let t = acoustic_loss(&p, &y, &q, 0.5).unwrap();
        assert!((t.l1 - 0.375).abs() < 1e-15);
        assert!((t.total - (0.375 + 0.25)).abs() < 1e-15);
        assert!(acoustic_loss(&p, &y.slice_rows(0, 1), &q, 0.0).is_err());
    }
}
