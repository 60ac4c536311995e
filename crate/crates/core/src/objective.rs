//! Batch objectives expressed as functions of the logit matrix.
//!
//! Each objective returns its scalar value and the gradient with respect to
//! the logits; [`crate::nnmodel::gradient`] pushes that gradient through the
//! network.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{invalid, Result};
use crate::nnmodel::log_softmax_rows;

pub trait Objective {
    fn loss_and_grad(&self, logits: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)>;
}

/// Per-sample supervision for [`Erm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleTerm {
    /// Cross-entropy towards the class.
    Positive(usize),
    /// Negative learning: push the probability of the class down.
    Negative(usize),
    Skip,
}

/// Mean of per-sample cross-entropy / negative-learning terms over the
/// samples that are not skipped. Zero when every sample is skipped.
#[derive(Debug, Clone)]
pub struct Erm {
    pub terms: Vec<SampleTerm>,
    pub clip_eps: f64,
}

impl Erm {
    pub fn new(terms: Vec<SampleTerm>, clip_eps: f64) -> Self {
        Self { terms, clip_eps }
    }

    pub fn cross_entropy(labels: &[usize], clip_eps: f64) -> Self {
        Self::new(
            labels.iter().map(|&l| SampleTerm::Positive(l)).collect(),
            clip_eps,
        )
    }
}

fn check_rows(logits: ArrayView2<'_, f64>, n: usize) -> Result<()> {
    if logits.nrows() != n {
        return Err(invalid(format!(
            "objective built for {n} samples, got {} rows",
            logits.nrows()
        )));
    }
    Ok(())
}

impl Objective for Erm {
    fn loss_and_grad(&self, logits: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        check_rows(logits, self.terms.len())?;
        let k = logits.ncols();
        let logp = log_softmax_rows(logits);
        let probs = logp.mapv(f64::exp);
        let mut grad = Array2::zeros(logits.raw_dim());
        let active = self
            .terms
            .iter()
            .filter(|t| **t != SampleTerm::Skip)
            .count();
        if active == 0 {
            return Ok((0.0, grad));
        }
        let scale = 1.0 / active as f64;
        let mut total = 0.0;
        for (i, term) in self.terms.iter().enumerate() {
            let p = probs.row(i);
            let mut g = grad.row_mut(i);
            match *term {
                SampleTerm::Skip => {}
                SampleTerm::Positive(y) => {
                    if y >= k {
                        return Err(invalid(format!("label {y} out of range")));
                    }
                    if p[y] > self.clip_eps {
                        total -= logp[[i, y]];
                        g.assign(&p);
                        g[y] -= 1.0;
                        g *= scale;
                    } else {
                        total -= self.clip_eps.ln();
                    }
                }
                SampleTerm::Negative(c) => {
                    if c >= k {
                        return Err(invalid(format!("label {c} out of range")));
                    }
                    let rest = 1.0 - p[c];
                    if rest > self.clip_eps {
                        total -= rest.ln();
                        // d/dz_j -ln(1 - p_c) = p_c (delta_jc - p_j) / (1 - p_c)
                        let factor = p[c] / rest * scale;
                        for j in 0..k {
                            let delta = if j == c { 1.0 } else { 0.0 };
                            g[j] = factor * (delta - p[j]);
                        }
                    } else {
                        total -= self.clip_eps.ln();
                    }
                }
            }
        }
        Ok((total * scale, grad))
    }
}

/// Information maximization: mean per-sample entropy minus the entropy of
/// the mean prediction.
#[derive(Debug, Clone, Copy, Default)]
pub struct InfoMax;

impl Objective for InfoMax {
    fn loss_and_grad(&self, logits: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        let b = logits.nrows();
        if b == 0 {
            return Err(invalid("empty batch"));
        }
        let scale = 1.0 / b as f64;
        let logp = log_softmax_rows(logits);
        let probs = logp.mapv(f64::exp);
        let mean = probs.mean_axis(Axis(0)).expect("nonempty");
        let h_cond = -(&probs * &logp).sum() * scale;
        let log_mean = mean.mapv(|m| if m > 0.0 { m.ln() } else { 0.0 });
        let h_marg = -(&mean * &log_mean).sum();
        // dL/dp_ik = (ln mean_k - ln p_ik) / B, then through the softmax Jacobian
        let mut grad = Array2::zeros(logits.raw_dim());
        for i in 0..b {
            let p = probs.row(i);
            let g_p = (&log_mean - &logp.row(i)) * scale;
            let inner = p.dot(&g_p);
            let mut row = grad.row_mut(i);
            row.assign(&(&p * &(g_p - inner)));
        }
        Ok((h_cond - h_marg, grad))
    }
}

/// `mean_i KL(q_i || softmax(z_i))` for fixed teacher probabilities `q`.
#[derive(Debug, Clone)]
pub struct Distillation {
    pub teacher: Array2<f64>,
}

impl Objective for Distillation {
    fn loss_and_grad(&self, logits: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        if logits.dim() != self.teacher.dim() {
            return Err(invalid("teacher and student shapes differ"));
        }
        let b = logits.nrows().max(1) as f64;
        let logp = log_softmax_rows(logits);
        let mut loss = 0.0;
        for (q, lp) in self.teacher.iter().zip(logp.iter()) {
            if *q > 0.0 {
                loss += q * (q.ln() - lp);
            }
        }
        let grad = (logp.mapv(f64::exp) - &self.teacher) / b;
        Ok((loss / b, grad))
    }
}

/// Weighted sum of objectives.
pub struct Weighted<'a>(pub Vec<(f64, &'a dyn Objective)>);

impl Objective for Weighted<'_> {
    fn loss_and_grad(&self, logits: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        let mut total = 0.0;
        let mut grad = Array2::zeros(logits.raw_dim());
        for (w, obj) in &self.0 {
            if *w == 0.0 {
                continue;
            }
            let (l, g) = obj.loss_and_grad(logits)?;
            total += w * l;
            grad.scaled_add(*w, &g);
        }
        Ok((total, grad))
    }
}

/// A loss that ignores its input.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl Objective for Constant {
    fn loss_and_grad(&self, logits: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        Ok((self.0, Array2::zeros(logits.raw_dim())))
    }
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of the objective with respect to the logits.
    fn fd(obj: &dyn Objective, z: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(z.raw_dim());
        for idx in 0..z.len() {
            let (i, j) = (idx / z.ncols(), idx % z.ncols());
            let mut plus = z.clone();
            plus[[i, j]] += h;
            let mut minus = z.clone();
            minus[[i, j]] -= h;
            let lp = obj.loss_and_grad(plus.view()).unwrap().0;
            let lm = obj.loss_and_grad(minus.view()).unwrap().0;
            out[[i, j]] = (lp - lm) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-7, "{a}\nvs\n{b}");
        }
    }

    fn logits() -> Array2<f64> {
        array![
            [0.2, -1.0, 0.7],
            [1.5, 0.1, -0.3],
            [-0.4, 0.9, 0.0],
            [0.0, 0.0, 2.0]
        ]
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let z = logits();
        let erm = Erm::new(
            vec![
                SampleTerm::Positive(0),
                SampleTerm::Negative(2),
                SampleTerm::Skip,
                SampleTerm::Negative(1),
            ],
            1e-7,
        );
        let teacher = crate::nnmodel::softmax_rows(
            array![
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.5],
                [0.3, 0.3, 0.3],
                [2.0, -1.0, 0.0]
            ]
            .view(),
        );
        let distill = Distillation { teacher };
        let objectives: Vec<&dyn Objective> = vec![&erm, &InfoMax, &distill];
        for obj in objectives {
            let (_, g) = obj.loss_and_grad(z.view()).unwrap();
            assert_close(&g, &fd(obj, &z));
        }
    }

    #[test]
    fn skipped_batch_is_zero() {
        let erm = Erm::new(vec![SampleTerm::Skip; 4], 1e-7);
        let (l, g) = erm.loss_and_grad(logits().view()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_combines_linearly() {
        let z = logits();
        let erm = Erm::cross_entropy(&[0, 1, 2, 0], 1e-7);
        let w = Weighted(vec![(2.0, &erm as &dyn Objective), (0.5, &InfoMax)]);
        let (l, g) = w.loss_and_grad(z.view()).unwrap();
        let (l1, g1) = erm.loss_and_grad(z.view()).unwrap();
        let (l2, g2) = InfoMax.loss_and_grad(z.view()).unwrap();
        assert!((l - (2.0 * l1 + 0.5 * l2)).abs() < 1e-12);
        assert_close(&g, &(g1 * 2.0 + g2 * 0.5));
    }
}
