//! AdamW optimizer state and finite-difference gradient checking.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Per-parameter gradient blocks, shape-congruent with the parameter set
/// they differentiate.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub blocks: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &[Matrix]) -> Self {
        Gradients {
            blocks: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn check_congruent(&self, params: &[Matrix]) -> Result<()> {
        if self.blocks.len() != params.len() {
            return Err(Error::dimension(
                format!("{} parameter blocks", params.len()),
                format!("{} gradient blocks", self.blocks.len()),
            ));
        }
        for (i, (g, p)) in self.blocks.iter().zip(params).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::dimension(
                    format!("block {i}: {}x{}", p.rows(), p.cols()),
                    format!("block {i}: {}x{}", g.rows(), g.cols()),
                ));
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.scale(s);
        }
    }

    pub fn add(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_scaled(b, 1.0)?;
        }
        Ok(())
    }

    /// Max L2 norm over blocks; used to confirm every block receives signal.
    pub fn block_norms(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| super::matrix::l2_norm(b.data()))
            .collect()
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        AdamState {
            step: 0,
            m: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update: adaptive moments with decoupled weight decay.
pub fn adamw_step(
    params: &mut [Matrix],
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    grads.check_congruent(params)?;
    if state.m.len() != params.len() {
        return Err(Error::dimension(
            format!("{} parameter blocks", params.len()),
            format!("{} optimizer blocks", state.m.len()),
        ));
    }
    if lr <= 0.0 {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(&grads.blocks)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = BETA1 * md[i] + (1.0 - BETA1) * gd[i];
            vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + weight_decay * pd[i]);
        }
    }
    Ok(())
}

/// Compare analytic gradients against central differences.
///
/// Returns the max over all parameter entries of
/// `|analytic - numeric| / max(1, |numeric|)` with `numeric` the central
/// difference at step `h`.
pub fn grad_check<F>(
    mut f: F,
    params: &[Matrix],
    analytic: &Gradients,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Contract(format!("step must be in (0, 1e-3], got {h}")));
    }
    analytic.check_congruent(params)?;
    let mut work: Vec<Matrix> = params.to_vec();
    let mut max_rel = 0.0f64;
    for bi in 0..params.len() {
        for i in 0..params[bi].data().len() {
            let orig = work[bi].data()[i];
            work[bi].data_mut()[i] = orig + h;
            let f_plus = f(&work)?;
            work[bi].data_mut()[i] = orig - h;
            let f_minus = f(&work)?;
            work[bi].data_mut()[i] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at perturbed point (block {bi}, entry {i})"
                )));
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let rel = (analytic.blocks[bi].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
