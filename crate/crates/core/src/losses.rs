//! Contrastive alignment loss, focal classification loss, and the
//! progressive weighting between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    pub lambda_s: f64,
    pub lambda_0: f64,
    /// When false the contrastive weight is held at `lambda_0`.
    pub progressive: bool,
    /// When false the contrastive term is dropped and the classification
    /// weight is `lambda_s` throughout.
    pub alignment: bool,
    #[serde(skip)]
    pub total_epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            gamma: 2.0,
            lambda_s: 2.0,
            lambda_0: 1.0,
            progressive: true,
            alignment: true,
            total_epochs: 55,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("loss.tau must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("loss.gamma must be nonnegative"));
        }
        if !(0.0 <= self.lambda_0 && self.lambda_0 <= self.lambda_s && self.lambda_s.is_finite()) {
            return Err(Error::config(
                "loss weights must satisfy 0 <= lambda_0 <= lambda_s",
            ));
        }
        Ok(())
    }
}

/// `dot(x, y) / (‖x‖·‖y‖)`.
pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("cosine_sim", &[x.len()], &[y.len()]));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(nx > 0.0 && ny > 0.0) {
        return Err(Error::numeric("cosine_sim", "zero-norm vector"));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

fn check_rows_nonzero(t: &Tensor, what: &str) -> Result<()> {
    let (k, d) = t.dims2("clip_loss")?;
    for i in 0..k {
        let row = &t.data()[i * d..(i + 1) * d];
        if !row.iter().any(|v| *v != 0.0) {
            return Err(Error::numeric(
                "clip_loss",
                format!("{what} row {i} is zero"),
            ));
        }
    }
    Ok(())
}

/// Symmetric contrastive loss between matched rows of `x_vis` and `x_text`
/// (both `K × D`), recorded on the tape.
pub fn clip_loss(tape: &mut Tape, x_vis: Var, x_text: Var, tau: f64) -> Result<Var> {
    let (k, d) = tape.value(x_vis).dims2("clip_loss")?;
    if tape.shape(x_text) != [k, d] {
        return Err(Error::dim("clip_loss", &[k, d], tape.shape(x_text)));
    }
    check_rows_nonzero(tape.value(x_vis), "visual")?;
    check_rows_nonzero(tape.value(x_text), "text")?;
    let v = unit_rows(tape, x_vis)?;
    let t = unit_rows(tape, x_text)?;
    let tt = tape.transpose(t)?;
    let s = tape.matmul(v, tt)?;
    let logits = tape.scale(s, 1.0 / tau);
    let by_row = tape.log_softmax(logits)?;
    let lt = tape.transpose(logits)?;
    let by_col = tape.log_softmax(lt)?;
    let both = tape.add(by_row, by_col)?;
    let eye = tape.constant(Tensor::eye(k));
    let diag = tape.mul(both, eye)?;
    let total = tape.sum(diag);
    Ok(tape.scale(total, -1.0 / (2.0 * k as f64)))
}

fn unit_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.row_l2_norm(x)?;
    let inv = tape.powf(n, -1.0)?;
    tape.mul_col(x, inv)
}

/// Contrastive loss from a precomputed `K × K` similarity matrix.
pub fn clip_loss_from_similarity(s: &Tensor, tau: f64) -> Result<f64> {
    let (k, k2) = s.dims2("clip_loss")?;
    if k != k2 {
        return Err(Error::dim("clip_loss", &[k, k], &[k, k2]));
    }
    let mut acc = 0.0;
    for i in 0..k {
        let row: Vec<f64> = (0..k).map(|j| s.get2(i, j) / tau).collect();
        let col: Vec<f64> = (0..k).map(|j| s.get2(j, i) / tau).collect();
        acc += row[i] - log_sum_exp(&row) + col[i] - log_sum_exp(&col);
    }
    Ok(-acc / (2.0 * k as f64))
}

/// Contrastive loss on plain matrices.
pub fn clip_loss_value(x_vis: &Tensor, x_text: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x_vis.clone());
    let t = tape.constant(x_text.clone());
    let l = clip_loss(&mut tape, v, t, tau)?;
    tape.value(l).item()
}

fn check_one_hot(labels: &Tensor, k: usize, c: usize) -> Result<()> {
    if labels.shape() != [k, c] {
        return Err(Error::dim("focal_loss", &[k, c], labels.shape()));
    }
    for i in 0..k {
        let row = &labels.data()[i * c..(i + 1) * c];
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::contract(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// Mean focal loss of `scores` (`K × C` logits) against one-hot `labels`.
pub fn focal_loss(tape: &mut Tape, scores: Var, labels: &Tensor, gamma: f64) -> Result<Var> {
    let (k, c) = tape.value(scores).dims2("focal_loss")?;
    check_one_hot(labels, k, c)?;
    let logp = tape.log_softmax(scores)?;
    let p = tape.exp(logp)?;
    let np = tape.neg(p);
    let q = tape.add_scalar(np, 1.0);
    let w = tape.powf(q, gamma)?;
    let wl = tape.mul(w, logp)?;
    let y = tape.constant(labels.clone());
    let picked = tape.mul(wl, y)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / k as f64))
}

pub fn focal_loss_value(scores: &Tensor, labels: &Tensor, gamma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let l = focal_loss(&mut tape, s, labels, gamma)?;
    tape.value(l).item()
}

/// `K × C` one-hot matrix.
pub fn one_hot(labels: &[usize], c: usize) -> Result<Tensor> {
    if labels.is_empty() || c == 0 {
        return Err(Error::contract(
            "one_hot needs at least one label and one class",
        ));
    }
    let mut t = Tensor::zeros(&[labels.len(), c]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::contract(format!(
                "label {l} out of range for {c} classes"
            )));
        }
        t.data_mut()[i * c + l] = 1.0;
    }
    Ok(t)
}

/// Contrastive weight at epoch `ep`: `λs − (λs − λ0)·ep/EP`.
pub fn lambda_at(ep: usize, cfg: &LossConfig) -> Result<f64> {
    if ep > cfg.total_epochs {
        return Err(Error::contract(format!(
            "epoch {ep} outside 0..={}",
            cfg.total_epochs
        )));
    }
    if !cfg.progressive {
        return Ok(cfg.lambda_0);
    }
    let frac = if cfg.total_epochs == 0 {
        0.0
    } else {
        ep as f64 / cfg.total_epochs as f64
    };
    Ok(cfg.lambda_s - (cfg.lambda_s - cfg.lambda_0) * frac)
}

/// `(contrastive weight, classification weight)` at epoch `ep`.
pub fn loss_weights(ep: usize, cfg: &LossConfig) -> Result<(f64, f64)> {
    if !cfg.alignment {
        lambda_at(ep, cfg)?;
        return Ok((0.0, cfg.lambda_s));
    }
    let l = lambda_at(ep, cfg)?;
    Ok((l, cfg.lambda_s - l))
}

pub fn total_loss(clip: f64, cls: f64, ep: usize, cfg: &LossConfig) -> Result<f64> {
    let (a, b) = loss_weights(ep, cfg)?;
    Ok(a * clip + b * cls)
}
