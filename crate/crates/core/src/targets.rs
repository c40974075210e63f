//! Per-anchor training targets and the two training losses.
//!
//! Displacements are in anchor units with the convention `D[t,k] = t - s`,
//! where `s` is the nearest ground-truth action of class `k`; the corrected
//! position of an anchor is therefore `t - D̂[t,k]`.

use crate::seqdata::ActionSet;
use ndarray::{Array2, Zip};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("non-finite {what} at anchor ({t}, {k})")]
    NonFinite {
        what: &'static str,
        t: usize,
        k: usize,
    },
}

/// Target radii. Radii in anchor units are `r·f`, compared inclusively and
/// never rounded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiusConfig {
    pub r_c_seconds: f64,
    pub r_d_seconds: f64,
    pub feature_rate_hz: f64,
}

impl RadiusConfig {
    pub fn new(r_c_seconds: f64, r_d_seconds: f64, feature_rate_hz: f64) -> Self {
        Self {
            r_c_seconds,
            r_d_seconds,
            feature_rate_hz,
        }
    }

    pub fn conf_radius(&self) -> f64 {
        self.r_c_seconds * self.feature_rate_hz
    }

    pub fn disp_radius(&self) -> f64 {
        self.r_d_seconds * self.feature_rate_hz
    }
}

impl Default for RadiusConfig {
    fn default() -> Self {
        Self::new(3.0, 6.0, 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetPack {
    /// `[T × K]` in {0, 1}.
    pub conf: Array2<f64>,
    /// `[T × K]`, meaningful only where `mask` is set (0 elsewhere).
    pub disp: Array2<f64>,
    pub mask: Array2<bool>,
}

/// Inclusive integer range `[ceil(s - r), floor(s + r)]` clipped to `[0, len)`.
fn window(s: usize, radius: f64, len: usize) -> std::ops::Range<usize> {
    let lo = (s as f64 - radius).ceil().max(0.0) as usize;
    let hi = ((s as f64 + radius).floor() + 1.0).max(0.0) as usize;
    lo.min(len)..hi.min(len)
}

pub fn make_confidence_targets(
    g: &ActionSet,
    len: usize,
    num_classes: usize,
    cfg: &RadiusConfig,
) -> Array2<f64> {
    let mut c = Array2::zeros((len, num_classes));
    let r = cfg.conf_radius();
    for a in g.actions() {
        for t in window(a.index, r, len) {
            c[[t, a.class]] = 1.0;
        }
    }
    c
}

/// Displacement targets and support mask. Ties between two equally near
/// actions resolve toward the earlier one.
pub fn make_displacement_targets(
    g: &ActionSet,
    len: usize,
    num_classes: usize,
    cfg: &RadiusConfig,
) -> (Array2<f64>, Array2<bool>) {
    let mut d = Array2::<f64>::zeros((len, num_classes));
    let mut mask = Array2::from_elem((len, num_classes), false);
    let r = cfg.disp_radius();
    // Actions are sorted by index, so visiting them in order and replacing
    // only on a strictly smaller distance keeps the earlier action on ties.
    for a in g.actions() {
        for t in window(a.index, r, len) {
            let cand = t as f64 - a.index as f64;
            let slot = [t, a.class];
            if !mask[slot] || cand.abs() < d[slot].abs() {
                d[slot] = cand;
                mask[slot] = true;
            }
        }
    }
    (d, mask)
}

pub fn make_targets(
    g: &ActionSet,
    len: usize,
    num_classes: usize,
    cfg: &RadiusConfig,
) -> TargetPack {
    let conf = make_confidence_targets(g, len, num_classes, cfg);
    let (disp, mask) = make_displacement_targets(g, len, num_classes, cfg);
    TargetPack { conf, disp, mask }
}

fn check_shapes(a: (usize, usize), b: (usize, usize)) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::Shape(a, b));
    }
    Ok(())
}

fn first_non_finite(x: &Array2<f64>, what: &'static str) -> Result<(), LossError> {
    match x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((t, k), _)) => Err(LossError::NonFinite { what, t, k }),
        None => Ok(()),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Summed binary cross-entropy of `σ(logits)` against (possibly soft)
/// targets, and its gradient `σ(logits) - C` with respect to the logits.
pub fn confidence_loss(
    logits: &Array2<f64>,
    targets: &Array2<f64>,
) -> Result<(f64, Array2<f64>), LossError> {
    check_shapes(logits.dim(), targets.dim())?;
    first_non_finite(logits, "confidence logit")?;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    Zip::from(&mut grad)
        .and(logits)
        .and(targets)
        .for_each(|g, &z, &c| {
            // max(z,0) - z·c + ln(1 + e^{-|z|})
            loss += z.max(0.0) - z * c + (-z.abs()).exp().ln_1p();
            *g = sigmoid(z) - c;
        });
    Ok((loss, grad))
}

pub const HUBER_DELTA: f64 = 1.0;

/// Summed Huber loss over the masked anchors. Unmasked anchors contribute
/// neither loss nor gradient.
pub fn displacement_loss(
    pred: &Array2<f64>,
    targets: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<(f64, Array2<f64>), LossError> {
    check_shapes(pred.dim(), targets.dim())?;
    check_shapes(pred.dim(), mask.dim())?;
    first_non_finite(pred, "displacement prediction")?;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad)
        .and(pred)
        .and(targets)
        .and(mask)
        .for_each(|g, &p, &d, &m| {
            if m {
                let r = p - d;
                if r.abs() <= HUBER_DELTA {
                    loss += 0.5 * r * r;
                    *g = r;
                } else {
                    loss += HUBER_DELTA * (r.abs() - 0.5 * HUBER_DELTA);
                    *g = HUBER_DELTA * r.signum();
                }
            }
        });
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::Action;
    use ndarray::array;

    #[test]
    fn confidence_target_window() {
        let g = ActionSet::from_pairs(&[(10, 2)]);
        let c = make_confidence_targets(&g, 30, 3, &RadiusConfig::new(3.0, 6.0, 2.0));
        for t in 0..30 {
            assert_eq!(
                c[[t, 2]],
                if (4..=16).contains(&t) { 1.0 } else { 0.0 },
                "t={t}"
            );
            assert_eq!(c[[t, 0]], 0.0);
            assert_eq!(c[[t, 1]], 0.0);
        }
        let empty = make_confidence_targets(&ActionSet::default(), 8, 2, &RadiusConfig::default());
        assert!(empty.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fractional_radius_is_not_rounded() {
        // r·f = 2.5: |s - t| ≤ 2.5 keeps t ∈ [8, 12].
        let g = ActionSet::from_pairs(&[(10, 0)]);
        let c = make_confidence_targets(&g, 20, 1, &RadiusConfig::new(1.25, 1.25, 2.0));
        let ones: Vec<usize> = (0..20).filter(|&t| c[[t, 0]] == 1.0).collect();
        assert_eq!(ones, vec![8, 9, 10, 11, 12]);
    }

    #[test]
    fn displacement_examples() {
        let cfg = RadiusConfig::new(3.0, 6.0, 1.0);
        let (d, s) = make_displacement_targets(&ActionSet::from_pairs(&[(10, 0)]), 30, 1, &cfg);
        for t in 0..30 {
            assert_eq!(s[[t, 0]], (4..=16).contains(&t));
        }
        assert_eq!(d[[7, 0]], -3.0);
        assert_eq!(d[[0, 0]], 0.0);

        let g = ActionSet::from_pairs(&[(10, 0), (20, 0)]);
        let (d, _) = make_displacement_targets(&g, 30, 1, &cfg);
        assert_eq!(d[[14, 0]], 4.0);
        assert_eq!(d[[15, 0]], 5.0);
        assert_eq!(d[[16, 0]], -4.0);
    }

    #[test]
    fn bce_examples() {
        let (l, g) = confidence_loss(&array![[0.0]], &array![[1.0]]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[[0, 0]] + 0.5).abs() < 1e-15);

        let mut prev = f64::INFINITY;
        for m in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let (l, _) = confidence_loss(&array![[m, -m]], &array![[1.0, 0.0]]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-13);
        assert!(matches!(
            confidence_loss(&array![[f64::NAN]], &array![[0.0]]),
            Err(LossError::NonFinite { .. })
        ));
        assert!(matches!(
            confidence_loss(&array![[0.0, 1.0]], &array![[0.0]]),
            Err(LossError::Shape(..))
        ));
    }

    #[test]
    fn huber_examples() {
        let m = array![[true]];
        let (l, _) = displacement_loss(&array![[0.5]], &array![[0.0]], &m).unwrap();
        assert_eq!(l, 0.125);
        let (l, g) = displacement_loss(&array![[3.0]], &array![[0.0]], &m).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g[[0, 0]], 1.0);
        let (l, g) = displacement_loss(&array![[3.0]], &array![[0.0]], &array![[false]]).unwrap();
        assert_eq!((l, g[[0, 0]]), (0.0, 0.0));
    }

    #[test]
    fn displacement_consistency_and_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let len = rng.random_range(1..80);
            let k = rng.random_range(1..4);
            let g = ActionSet::new(
                (0..rng.random_range(0..8))
                    .map(|_| Action::new(rng.random_range(0..len), rng.random_range(0..k))),
            );
            let cfg =
                RadiusConfig::new(rng.random_range(0.5..4.0), rng.random_range(0.5..8.0), 2.0);
            let (d, s) = make_displacement_targets(&g, len, k, &cfg);
            let c = make_confidence_targets(&g, len, k, &cfg);
            for ((t, kk), &m) in s.indexed_iter() {
                if m {
                    let src = t as f64 - d[[t, kk]];
                    assert!(src >= 0.0);
                    assert!(g.actions().contains(&Action::new(src as usize, kk)));
                    assert!(d[[t, kk]].abs() <= cfg.disp_radius());
                } else if cfg.r_c_seconds <= cfg.r_d_seconds {
                    assert_eq!(c[[t, kk]], 0.0);
                }
            }
        }
    }
}
