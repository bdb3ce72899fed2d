//! SiSNR, the speaker-ID cross-entropy, their multi-task combination, and
//! utterance-level permutation invariant training.
//!
//! SiSNR works on zero-mean signals. With `s = (<y, x> / <x, x>) x` the
//! projection of the estimate onto the reference and `e = y - s`,
//!
//! ```text
//! SiSNR = 10 log10( (|s|^2 + eps |y|^2) / (|e|^2 + eps |y|^2) ),  eps = 1e-8
//! ```
//!
//! The `eps |y|^2` terms pin the range to about +/-80 dB (perfect and
//! orthogonal estimates) while keeping the value exactly invariant to the
//! scale of either argument.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::linear_softmax_ce;

pub const SISNR_EPS: f64 = 1e-8;

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SiSNR in dB of `estimate` against `reference`.
pub fn sisnr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch(reference.len(), estimate.len()));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("sisnr"));
    }
    let x = centered(reference);
    let y = centered(estimate);
    let xx = dot(&x, &x);
    if xx == 0.0 {
        return Err(Error::ZeroReference);
    }
    let yy = dot(&y, &y);
    if yy == 0.0 {
        return Ok(-10.0 * (1.0 / SISNR_EPS).log10());
    }
    let a = dot(&x, &y) / xx;
    let (mut ps, mut pe) = (0.0, 0.0);
    for (xv, yv) in x.iter().zip(&y) {
        let s = a * xv;
        ps += s * s;
        pe += (yv - s) * (yv - s);
    }
    let floor = SISNR_EPS * yy;
    Ok(10.0 * ((ps + floor) / (pe + floor)).log10())
}

/// Tape version of [`sisnr`]; both inputs are flattened. Returns a `[1]` var.
pub fn sisnr_var(g: &mut Graph, reference: Var, estimate: Var) -> Result<Var> {
    let (n, m) = (g.value(reference).numel(), g.value(estimate).numel());
    if n != m {
        return Err(Error::LengthMismatch(n, m));
    }
    let x = g.reshape(reference, &[n])?;
    let y = g.reshape(estimate, &[n])?;
    let mx = g.mean(x, None)?;
    let my = g.mean(y, None)?;
    let xc = g.sub(x, mx)?;
    let yc = g.sub(y, my)?;
    let xx = {
        let sq = g.mul(xc, xc)?;
        g.sum_all(sq)
    };
    if g.value(xx).item() == 0.0 {
        return Err(Error::ZeroReference);
    }
    let xy = {
        let p = g.mul(xc, yc)?;
        g.sum_all(p)
    };
    let yy = {
        let sq = g.mul(yc, yc)?;
        g.sum_all(sq)
    };
    let alpha = g.div(xy, xx)?;
    let s = g.mul(xc, alpha)?;
    let e = g.sub(yc, s)?;
    let ps = {
        let sq = g.mul(s, s)?;
        g.sum_all(sq)
    };
    let pe = {
        let sq = g.mul(e, e)?;
        g.sum_all(sq)
    };
    if g.value(yy).item() == 0.0 {
        // silent estimate: same floor value as the plain version
        return Ok(g.constant(Tensor::vector(vec![-10.0 * (1.0 / SISNR_EPS).log10()])));
    }
    let floor = g.scale(yy, SISNR_EPS);
    let num = g.add(ps, floor)?;
    let den = g.add(pe, floor)?;
    let ratio = g.div(num, den)?;
    let ln = g.log(ratio);
    Ok(g.scale(ln, 10.0 / std::f64::consts::LN_10))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// SiSNR in dB (the loss uses its negative).
    pub sisnr: f64,
    /// Speaker-ID cross-entropy in nats; 0 when `alpha == 0`.
    pub ce: f64,
    pub alpha: f64,
    /// Output-to-reference assignment chosen by PIT.
    pub permutation: Option<[usize; 2]>,
}

/// `-SiSNR(reference, estimate) + alpha * CE(label, softmax(W e))`.
///
/// `embedding` is `[dim, 1]` and `projection` is `[speakers, dim]`. With
/// `alpha == 0` the cross-entropy is not recorded at all.
pub fn multitask_loss(
    g: &mut Graph,
    reference: Var,
    estimate: Var,
    embedding: Var,
    projection: Var,
    label: usize,
    alpha: f64,
) -> Result<(Var, LossReport)> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be >= 0")));
    }
    let snr = sisnr_var(g, reference, estimate)?;
    let neg = g.scale(snr, -1.0);
    let (total, ce) = if alpha > 0.0 {
        let ce = linear_softmax_ce(g, embedding, projection, label)?;
        let weighted = g.scale(ce, alpha);
        (g.add(neg, weighted)?, g.value(ce).item())
    } else {
        (neg, 0.0)
    };
    let report = LossReport {
        total: g.value(total).item(),
        sisnr: g.value(snr).item(),
        ce,
        alpha,
        permutation: None,
    };
    Ok((total, report))
}

/// Both assignments of two outputs to two references; index 0 is identity.
pub const PERMUTATIONS: [[usize; 2]; 2] = [[0, 1], [1, 0]];

/// Utterance-level PIT: `min over p of -mean_i SiSNR(ref[p[i]], est[i])`.
/// Ties go to the identity assignment.
pub fn pit_loss(g: &mut Graph, references: [Var; 2], estimates: [Var; 2]) -> Result<(Var, LossReport)> {
    let mut best: Option<(Var, f64, [usize; 2], f64)> = None;
    for perm in PERMUTATIONS {
        let a = sisnr_var(g, references[perm[0]], estimates[0])?;
        let b = sisnr_var(g, references[perm[1]], estimates[1])?;
        let sum = g.add(a, b)?;
        let loss = g.scale(sum, -0.5);
        let v = g.value(loss).item();
        if best.as_ref().is_none_or(|(_, bv, _, _)| v < *bv) {
            best = Some((loss, v, perm, -v));
        }
    }
    let (loss, total, perm, snr) = best.expect("two permutations");
    Ok((
        loss,
        LossReport {
            total,
            sisnr: snr,
            ce: 0.0,
            alpha: 0.0,
            permutation: Some(perm),
        },
    ))
}

/// Convenience: leaf for a reference waveform.
pub fn reference_var(g: &mut Graph, samples: &[f64]) -> Var {
    g.constant(Tensor::vector(samples.to_vec()))
}
