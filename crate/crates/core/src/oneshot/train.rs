//! Scale-weight fine-tuning: a two-parameter simplex over the three mask
//! scales, trained with Dice + sigmoid focal loss under cosine-annealed Adam.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OneshotError, Result};
use crate::backends::MultiScaleMasks;
use crate::geodata::BinaryMask;

/// Two free parameters; the third scale's logit is pinned at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleWeights {
    pub theta: [f64; 2],
}

impl ScaleWeights {
    pub fn new(theta: [f64; 2]) -> Self {
        Self { theta }
    }

    /// Weights on the three scales; positive and summing to one.
    pub fn weights(&self) -> [f64; 3] {
        let [a, b] = self.theta;
        let m = a.max(b).max(0.0);
        let e = [(a - m).exp(), (b - m).exp(), (-m).exp()];
        let z = e[0] + e[1] + e[2];
        e.map(|v| v / z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub lr0: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr0: 1e-3,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OneshotError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return bad(format!("focal_gamma {} must be non-negative", self.focal_gamma));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad(format!("focal_alpha {} must lie in (0,1)", self.focal_alpha));
        }
        if !(self.dice_eps > 0.0 && self.dice_eps.is_finite()) {
            return bad(format!("dice_eps {} must be positive", self.dice_eps));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate at epoch `t`.
    pub fn lr(&self, t: u32) -> f64 {
        if self.epochs == 0 {
            return self.lr0;
        }
        let frac = t.min(self.epochs) as f64 / self.epochs as f64;
        self.lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Elementwise weighted sum of the three scale logits.
pub fn combine_scales(masks: &MultiScaleMasks, weights: &ScaleWeights) -> Vec<f64> {
    let w = weights.weights();
    let s = masks.scales();
    (0..s[0].len())
        .map(|i| w[0] * s[0][i] + w[1] * s[1][i] + w[2] * s[2][i])
        .collect()
}

/// Binary prediction of combined logits: `sigmoid(S) >= 0.5`.
pub fn binarize(logits: &[f64], width: usize, height: usize) -> BinaryMask {
    BinaryMask::new(width, height, logits.iter().map(|&v| v >= 0.0).collect()).expect("sizes match")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(logits: &[f64], gt: &BinaryMask) -> Result<()> {
    if logits.len() != gt.data().len() {
        return Err(OneshotError::Shape(format!(
            "{} logits for a {}x{} mask",
            logits.len(),
            gt.width(),
            gt.height()
        )));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(OneshotError::Numeric(format!("non-finite logit at pixel {i}")));
    }
    Ok(())
}

/// Loss and its gradient with respect to each logit.
fn loss_and_logit_grad(logits: &[f64], gt: &BinaryMask, cfg: &TrainConfig) -> (LossValues, Vec<f64>) {
    let n = logits.len() as f64;
    let (alpha, gamma, eps) = (cfg.focal_alpha, cfg.focal_gamma, cfg.dice_eps);
    let p: Vec<f64> = logits.iter().map(|&s| sigmoid(s)).collect();
    let mut inter = 0.0;
    let mut p_sum = 0.0;
    let mut g_sum = 0.0;
    let mut focal = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&s, &g)) in logits.iter().zip(gt.data()).enumerate() {
        let pi = p[i];
        p_sum += pi;
        let log_p = -softplus(-s);
        let log_q = -softplus(s);
        if g {
            inter += pi;
            g_sum += 1.0;
            let q = 1.0 - pi;
            focal -= alpha * q.powf(gamma) * log_p;
            grad[i] = alpha * q.powf(gamma) * (gamma * pi * log_p - q) / n;
        } else {
            focal -= (1.0 - alpha) * pi.powf(gamma) * log_q;
            grad[i] = (1.0 - alpha) * pi.powf(gamma) * (pi - gamma * (1.0 - pi) * log_q) / n;
        }
    }
    focal /= n;
    let den = p_sum + g_sum + eps;
    let num = 2.0 * inter + eps;
    let dice = 1.0 - num / den;
    for (i, &g) in gt.data().iter().enumerate() {
        let gi = if g { 1.0 } else { 0.0 };
        let d_dice_dp = -(2.0 * gi * den - num) / (den * den);
        grad[i] += d_dice_dp * p[i] * (1.0 - p[i]);
    }
    (
        LossValues {
            dice,
            focal,
            total: dice + focal,
        },
        grad,
    )
}

/// Dice loss, mean sigmoid focal loss and their sum.
pub fn losses(logits: &[f64], gt: &BinaryMask, cfg: &TrainConfig) -> Result<LossValues> {
    check_inputs(logits, gt)?;
    Ok(loss_and_logit_grad(logits, gt, cfg).0)
}

/// Total loss of the combined prediction and its gradient in `theta`.
pub fn loss_and_grad(
    masks: &MultiScaleMasks,
    gt: &BinaryMask,
    weights: &ScaleWeights,
    cfg: &TrainConfig,
) -> Result<(LossValues, [f64; 2])> {
    let logits = combine_scales(masks, weights);
    check_inputs(&logits, gt)?;
    let (loss, d_s) = loss_and_logit_grad(&logits, gt, cfg);
    let w = weights.weights();
    let scales = masks.scales();
    let mut grad = [0.0; 2];
    for (j, g) in grad.iter_mut().enumerate() {
        *g = d_s
            .iter()
            .zip(&scales[j])
            .zip(&logits)
            .map(|((ds, m), s)| ds * w[j] * (m - s))
            .sum();
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: u32,
    pub lr: f64,
    pub dice_loss: f64,
    pub focal_loss: f64,
    pub total: f64,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("epoch,lr,dice_loss,focal_loss,total\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.lr, r.dice_loss, r.focal_loss, r.total));
    }
    out
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fit scale weights to `gt` from `theta = (0, 0)`.
///
/// The trace has `epochs + 1` rows: one per update plus the final state.
pub fn fit_scale_weights(
    masks: &MultiScaleMasks,
    gt: &BinaryMask,
    cfg: &TrainConfig,
) -> Result<(ScaleWeights, Vec<TraceRow>)> {
    cfg.validate()?;
    if masks.width() != gt.width() || masks.height() != gt.height() {
        return Err(OneshotError::Shape(format!(
            "scales are {}x{}, target mask is {}x{}",
            masks.width(),
            masks.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut weights = ScaleWeights::default();
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    let mut trace = Vec::with_capacity(cfg.epochs as usize + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, grad) = loss_and_grad(masks, gt, &weights, cfg)?;
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(OneshotError::Diverged { epoch });
        }
        let lr = if epoch == cfg.epochs { 0.0 } else { cfg.lr(epoch) };
        trace.push(TraceRow {
            epoch,
            lr,
            dice_loss: loss.dice,
            focal_loss: loss.focal,
            total: loss.total,
        });
        if epoch == cfg.epochs {
            break;
        }
        let t = epoch as i32 + 1;
        for k in 0..2 {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * grad[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * grad[k] * grad[k];
            let m_hat = m[k] / (1.0 - BETA1.powi(t));
            let v_hat = v[k] / (1.0 - BETA2.powi(t));
            weights.theta[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok((weights, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scales_from(bits: [&[u8]; 3], w: usize, h: usize) -> MultiScaleMasks {
        let to = |b: &[u8]| b.iter().map(|&v| if v != 0 { 3.0 } else { -3.0 }).collect::<Vec<_>>();
        MultiScaleMasks::new(w, h, [to(bits[0]), to(bits[1]), to(bits[2])], [0.5; 3]).unwrap()
    }

    #[test]
    fn uniform_weights_at_origin() {
        let w = ScaleWeights::default().weights();
        for v in w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = scales_from([&[1, 0], &[1, 1], &[0, 0]], 2, 1);
        let s = combine_scales(&m, &ScaleWeights::default());
        assert!((s[0] - 1.0).abs() < 1e-12 && (s[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn vertex_limit_and_identical_scales() {
        let m = scales_from([&[1, 0, 1], &[0, 1, 1], &[0, 0, 0]], 3, 1);
        let s = combine_scales(&m, &ScaleWeights::new([40.0, 0.0]));
        for (a, b) in s.iter().zip(m.scale(0)) {
            assert!((a - b).abs() < 1e-9);
        }
        let same = scales_from([&[1, 0, 1], &[1, 0, 1], &[1, 0, 1]], 3, 1);
        let s = combine_scales(&same, &ScaleWeights::new([1.3, -2.0]));
        for (a, b) in s.iter().zip(same.scale(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_closed_form_at_half() {
        let gt = BinaryMask::new(2, 2, vec![true, false, true, false]).unwrap();
        let cfg = TrainConfig {
            focal_gamma: 0.0,
            focal_alpha: 0.5,
            ..TrainConfig::default()
        };
        let l = losses(&[0.0; 4], &gt, &cfg).unwrap();
        assert!((l.focal - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dice_with_empty_gt() {
        let gt = BinaryMask::empty(3, 1);
        let s = [0.3, -1.0, 2.0];
        let l = losses(&s, &gt, &TrainConfig::default()).unwrap();
        let p_sum: f64 = s.iter().map(|&v| 1.0 / (1.0 + (-v as f64).exp())).sum();
        assert!((l.dice - (1.0 - 1.0 / (p_sum + 1.0))).abs() < 1e-12);
    }

    #[test]
    fn saturated_perfect_prediction() {
        let gt = BinaryMask::new(3, 1, vec![true, false, true]).unwrap();
        let l = losses(&[60.0, -60.0, 60.0], &gt, &TrainConfig::default()).unwrap();
        assert!(l.dice < 1e-12 && l.focal < 1e-12 && l.total >= 0.0);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let gt = BinaryMask::empty(1, 1);
        assert!(matches!(losses(&[f64::NAN], &gt, &TrainConfig::default()), Err(OneshotError::Numeric(_))));
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr(0), 1e-3);
        assert!(cfg.lr(1000).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for t in 0..=1000 {
            assert!(cfg.lr(t) <= prev);
            prev = cfg.lr(t);
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let m = scales_from([&[1, 0], &[1, 1], &[0, 0]], 2, 1);
        let gt = BinaryMask::new(2, 1, vec![true, true]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (w, trace) = fit_scale_weights(&m, &gt, &cfg).unwrap();
        assert_eq!(w.theta, [0.0, 0.0]);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn identical_scales_stay_put() {
        let m = scales_from([&[1, 0, 1, 1], &[1, 0, 1, 1], &[1, 0, 1, 1]], 2, 2);
        let gt = m.binary(0);
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let (w, _) = fit_scale_weights(&m, &gt, &cfg).unwrap();
        assert!(w.theta.iter().all(|t| t.abs() < 1e-9));
    }

    #[test]
    fn config_hash_tracks_fields() {
        let a = TrainConfig::default();
        let b = TrainConfig { lr0: 2e-3, ..a };
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert!(TrainConfig { focal_alpha: 1.0, ..a }.validate().is_err());
    }

    #[test]
    fn trace_csv_shape() {
        let rows = [TraceRow { epoch: 0, lr: 0.001, dice_loss: 0.5, focal_loss: 0.25, total: 0.75 }];
        assert_eq!(trace_to_csv(&rows), "epoch,lr,dice_loss,focal_loss,total\n0,0.001,0.5,0.25,0.75\n");
    }

    proptest! {
        #[test]
        fn simplex_invariant(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let w = ScaleWeights::new([a, b]).weights();
            prop_assert!(w.iter().all(|&v| v > 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn permuting_scales_and_weights_commutes(
            raw in prop::collection::vec(-5.0f64..5.0, 12),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            // combine with w = (w1, w2, w3); a cyclic shift of scales paired with the
            // matching shift of weights must give the same logits
            let scales = [raw[0..4].to_vec(), raw[4..8].to_vec(), raw[8..12].to_vec()];
            let m = MultiScaleMasks::new(2, 2, scales, [0.1, 0.2, 0.3]).unwrap();
            let w = ScaleWeights::new([a, b]).weights();
            let shifted = m.permuted([2, 0, 1]);
            // shifted weights (w3, w1, w2) expressed with the third pinned: theta = ln(w/w2)
            let ws = ScaleWeights::new([(w[2] / w[1]).ln(), (w[0] / w[1]).ln()]);
            let x = combine_scales(&m, &ScaleWeights::new([a, b]));
            let y = combine_scales(&shifted, &ws);
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn loss_is_non_negative(raw in prop::collection::vec(-30.0f64..30.0, 9), g in prop::collection::vec(any::<bool>(), 9)) {
            let gt = BinaryMask::new(3, 3, g).unwrap();
            let l = losses(&raw, &gt, &TrainConfig::default()).unwrap();
            prop_assert!(l.total > 0.0 && l.dice >= 0.0 && l.focal > 0.0);
        }
    }
}
