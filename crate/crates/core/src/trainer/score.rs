//! Triple scoring.
//!
//! Elementwise arithmetic happens in the parameter type `T`; reductions
//! accumulate in `f64`.

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn from_p(p: u8) -> Result<Self> {
        match p {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            _ => Err(Error::Config(format!("norm must be 1 or 2, got {p}"))),
        }
    }
}

/// A distance-style triple scoring function: lower means more plausible.
///
/// Only the translational model is provided; other models plug in by
/// implementing this trait.
pub trait TripleScorer: Sync {
    fn distance<T: Float>(&self, h: &[T], r: &[T], t: &[T]) -> f64;

    /// Adds `coeff * d(distance)/d(h, r, t)` into the gradient buffers.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_grad<T: Float>(
        &self,
        h: &[T],
        r: &[T],
        t: &[T],
        coeff: T,
        gh: &mut [T],
        gr: &mut [T],
        gt: &mut [T],
    );
}

/// `||h + r - t||_p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransE {
    pub norm: Norm,
}

impl TransE {
    pub fn new(norm: Norm) -> Self {
        Self { norm }
    }
}

impl TripleScorer for TransE {
    fn distance<T: Float>(&self, h: &[T], r: &[T], t: &[T]) -> f64 {
        let residuals = h.iter().zip(r).zip(t).map(|((&h, &r), &t)| h + r - t);
        match self.norm {
            Norm::L1 => residuals.map(|x| x.abs().to_f64().unwrap_or(f64::NAN)).sum(),
            Norm::L2 => residuals
                .map(|x| {
                    let x = x.to_f64().unwrap_or(f64::NAN);
                    x * x
                })
                .sum::<f64>()
                .sqrt(),
        }
    }

    fn accumulate_grad<T: Float>(
        &self,
        h: &[T],
        r: &[T],
        t: &[T],
        coeff: T,
        gh: &mut [T],
        gr: &mut [T],
        gt: &mut [T],
    ) {
        let dim = h.len();
        match self.norm {
            Norm::L1 => {
                for k in 0..dim {
                    let x = h[k] + r[k] - t[k];
                    let s = if x > T::zero() {
                        coeff
                    } else if x < T::zero() {
                        -coeff
                    } else {
                        T::zero()
                    };
                    gh[k] = gh[k] + s;
                    gr[k] = gr[k] + s;
                    gt[k] = gt[k] - s;
                }
            }
            Norm::L2 => {
                let norm = self.distance(h, r, t);
                if norm == 0.0 {
                    return;
                }
                let scale = coeff / T::from(norm).expect("finite norm");
                for k in 0..dim {
                    let g = (h[k] + r[k] - t[k]) * scale;
                    gh[k] = gh[k] + g;
                    gr[k] = gr[k] + g;
                    gt[k] = gt[k] - g;
                }
            }
        }
    }
}

/// `||h + r - t||_p` over `f32` vectors, checking lengths.
pub fn transe_score(h: &[f32], r: &[f32], t: &[f32], p: u8) -> Result<f64> {
    if h.len() != r.len() {
        return Err(Error::Dim {
            left: h.len(),
            right: r.len(),
        });
    }
    if h.len() != t.len() {
        return Err(Error::Dim {
            left: h.len(),
            right: t.len(),
        });
    }
    Ok(TransE::new(Norm::from_p(p)?).distance(h, r, t))
}
