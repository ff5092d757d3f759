//! Training losses: the conditional-GAN value and its per-network views, the
//! weighted four-map L1 term, the combined generator objective, and the
//! contrastive loss of the Siamese verifier.

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_r: f64,
    pub alpha_f: f64,
    pub alpha_o: f64,
    pub alpha_s: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_r: 1.0,
            alpha_f: 0.1,
            alpha_o: 0.1,
            alpha_s: 0.1,
            lambda: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_r", self.alpha_r),
            ("alpha_f", self.alpha_f),
            ("alpha_o", self.alpha_o),
            ("alpha_s", self.alpha_s),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("weights.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn alphas(&self) -> [f64; 4] {
        [self.alpha_r, self.alpha_f, self.alpha_o, self.alpha_s]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha_r: self.alpha_r * k,
            alpha_f: self.alpha_f * k,
            alpha_o: self.alpha_o * k,
            alpha_s: self.alpha_s * k,
            lambda: self.lambda,
        }
    }
}

/// The cGAN value together with the losses each network minimises.
#[derive(Debug)]
pub struct CganTerms {
    /// mean log D(real) + mean log(1 - D(fake)).
    pub value: Tensor,
    /// -value.
    pub d_loss: Tensor,
    /// Non-saturating generator loss, -mean log D(fake).
    pub g_adv: Tensor,
}

fn check_open_unit(t: &Tensor, what: &str) -> Result<()> {
    let lo = t.min().double_value(&[]);
    let hi = t.max().double_value(&[]);
    if !(lo > 0.0 && hi < 1.0) {
        return Err(Error::Domain(format!(
            "{what} has entries outside (0, 1) (min {lo}, max {hi}) and no clamp is configured"
        )));
    }
    Ok(())
}

/// `eps = None` disables the clamp; entries of exactly 0 or 1 are then a
/// domain error.
pub fn cgan_value(d_real: &Tensor, d_fake: &Tensor, eps: Option<f64>) -> Result<CganTerms> {
    let (r, f) = match eps {
        Some(e) => (d_real.clamp(e, 1.0 - e), d_fake.clamp(e, 1.0 - e)),
        None => {
            check_open_unit(d_real, "d_real")?;
            check_open_unit(d_fake, "d_fake")?;
            (d_real.shallow_clone(), d_fake.shallow_clone())
        }
    };
    let real_term = r.log().mean(r.kind());
    let fake_term = (1.0f64 - &f).log().mean(f.kind());
    let value = &real_term + &fake_term;
    let d_loss = -&value;
    let g_adv = -f.log().mean(f.kind());
    Ok(CganTerms { value, d_loss, g_adv })
}

/// Weighted L1 and its unweighted per-channel terms (R, F, O, S).
#[derive(Debug)]
pub struct L1Terms {
    pub total: Tensor,
    pub per_channel: [Tensor; 4],
}

/// Mean absolute error per channel of `[N,4,H,W]` tensors, weighted by the
/// alphas.
pub fn l1_multi(generated: &Tensor, target: &Tensor, w: &LossWeights) -> Result<L1Terms> {
    let (gs, ts) = (generated.size(), target.size());
    if gs != ts || gs.len() != 4 || gs[1] != 4 {
        return Err(Error::Shape(format!("l1_multi needs matching N x 4 x H x W, got {gs:?} vs {ts:?}")));
    }
    let diff = (generated - target).abs();
    let per: Vec<Tensor> = (0..4)
        .map(|c| diff.select(1, c).mean(diff.kind()))
        .collect();
    let alphas = w.alphas();
    let mut total = &per[0] * alphas[0];
    for c in 1..4 {
        total = total + &per[c] * alphas[c];
    }
    let per_channel: [Tensor; 4] = per.try_into().expect("four channels");
    Ok(L1Terms { total, per_channel })
}

/// `adv + λ·l1`.
pub fn generator_objective(adv: &Tensor, l1: &Tensor, w: &LossWeights) -> Tensor {
    adv + l1 * w.lambda
}

/// Scalar form of [`generator_objective`].
pub fn generator_objective_value(adv: f64, l1: f64, w: &LossWeights) -> f64 {
    adv + w.lambda * l1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLabel {
    /// Same finger.
    pub genuine: bool,
}

/// Mean contrastive loss over a batch of embedding pairs `[N,E]`.
pub fn contrastive_loss(emb_a: &Tensor, emb_b: &Tensor, labels: &[PairLabel], margin: f64) -> Result<Tensor> {
    let (sa, sb) = (emb_a.size(), emb_b.size());
    if sa != sb || sa.len() != 2 || sa[0] as usize != labels.len() {
        return Err(Error::Shape(format!(
            "contrastive_loss: embeddings {sa:?} / {sb:?} with {} labels",
            labels.len()
        )));
    }
    let kind = emb_a.kind();
    let na = emb_a.norm_scalaropt_dim(2.0, [1i64].as_slice(), true);
    let nb = emb_b.norm_scalaropt_dim(2.0, [1i64].as_slice(), true);
    let min_norm = na.min().double_value(&[]).min(nb.min().double_value(&[]));
    if !(min_norm > 0.0) {
        return Err(Error::Domain("cannot normalise a zero embedding".into()));
    }
    let a = emb_a / &na;
    let b = emb_b / &nb;
    let d2 = (&a - &b).square().sum_dim_intlist([1i64].as_slice(), false, kind);
    // Distance is only needed for impostors; the floor keeps its gradient finite at d = 0.
    let d = d2.clamp_min(1e-12).sqrt();
    let y: Vec<f64> = labels.iter().map(|l| if l.genuine { 1.0 } else { 0.0 }).collect();
    let y = Tensor::from_slice(&y).to_kind(kind);
    let impostor = (margin - &d).clamp_min(0.0).square();
    let per = &y * &d2 + (1.0f64 - &y) * impostor;
    Ok(per.mean(kind))
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1_r: f64,
    pub l1_f: f64,
    pub l1_o: f64,
    pub l1_s: f64,
    pub total: f64,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        [self.d_loss, self.g_adv, self.l1_r, self.l1_f, self.l1_o, self.l1_s, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Central-difference gradient checks against autograd.
pub mod gradcheck {
    use super::*;

    /// Relative error `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-12)`
    /// for each input. Inputs must be `Kind::Double`; `f` must return a scalar.
    pub fn relative_errors(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], h: f64) -> Vec<f64> {
        let vars: Vec<Tensor> = inputs.iter().map(|t| t.detach().copy().set_requires_grad(true)).collect();
        let out = f(&vars);
        let grads = Tensor::run_backward(&[&out], &vars, false, false);
        let _g = tch::no_grad_guard();
        let mut errs = Vec::new();
        for (i, analytic) in grads.iter().enumerate() {
            let base: Vec<f64> = Vec::<f64>::try_from(inputs[i].flatten(0, -1)).expect("double input");
            let shape = inputs[i].size();
            let mut numeric = vec![0.0; base.len()];
            for (k, g) in numeric.iter_mut().enumerate() {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[k] += delta;
                    let mut args: Vec<Tensor> = inputs.iter().map(|t| t.shallow_clone()).collect();
                    args[i] = Tensor::from_slice(&v).reshape(shape.as_slice());
                    f(&args).double_value(&[])
                };
                *g = (eval(h) - eval(-h)) / (2.0 * h);
            }
            // Inputs the output does not depend on come back undefined.
            let a: Vec<f64> = if analytic.defined() {
                Vec::<f64>::try_from(analytic.flatten(0, -1)).expect("double grad")
            } else {
                vec![0.0; base.len()]
            };
            let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
            errs.push(diff / (na + nn).max(1e-12));
        }
        errs
    }

    pub fn uniform(shape: &[i64], lo: f64, hi: f64, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: i64 = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_slice(&v).reshape(shape)
    }
}

#[cfg(test)]
fn scalar(t: &Tensor) -> f64 {
    t.to_kind(tch::Kind::Double).double_value(&[])
}
