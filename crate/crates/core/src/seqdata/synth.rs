//! Synthetic spotting benchmark.
//!
//! Each class owns a fixed random feature template. A video is i.i.d.
//! Gaussian noise plus, for every action, that class's template scaled by
//! a Gaussian envelope centred on the action time. Action times follow an
//! independent Poisson process per class.
//!
//! Generation is deterministic in the seed: templates come from ChaCha8
//! stream 0 and video `i` from stream `i + 1`, so adding videos never changes
//! earlier ones. Arithmetic is plain IEEE-754 f64 (no fused ops); only
//! `f64::exp` comes from the platform libm.

use super::{seconds_to_anchor, Action, ActionSet, DataError, FeatureSequence};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub video_len_s: f64,
    pub num_classes: usize,
    /// Poisson rate per class, in events per minute.
    pub actions_per_class_per_min: f64,
    /// Standard deviation of the Gaussian envelope, in seconds.
    pub bump_width_s: f64,
    pub noise_sigma: f64,
    pub feature_rate_hz: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 4,
            video_len_s: 600.0,
            num_classes: 3,
            actions_per_class_per_min: 2.0,
            bump_width_s: 2.0,
            noise_sigma: 0.5,
            feature_rate_hz: 2.0,
            feature_dim: 8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.video_len_s)
            || !positive(self.actions_per_class_per_min)
            || !positive(self.bump_width_s)
            || !positive(self.feature_rate_hz)
        {
            return Err(DataError::Invalid(
                "synthetic lengths, rates and widths must be positive".into(),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(DataError::Invalid(
                "noise_sigma must be non-negative".into(),
            ));
        }
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(DataError::Invalid(
                "need at least one class and one feature".into(),
            ));
        }
        if seconds_to_anchor(self.video_len_s, self.feature_rate_hz) == 0 {
            return Err(DataError::Invalid(
                "video shorter than one feature step".into(),
            ));
        }
        Ok(())
    }

    pub fn class_name(k: usize) -> String {
        format!("class_{k}")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub sequence: FeatureSequence,
    pub actions: ActionSet,
    /// Continuous action times in seconds with their class, sorted by time.
    pub events: Vec<(f64, usize)>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Class templates, `[K × P]`, each entry standard normal.
pub fn class_templates(spec: &SyntheticSpec) -> Array2<f64> {
    let mut rng = stream(spec.seed, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_simple_fn((spec.num_classes, spec.feature_dim), || {
        normal.sample(&mut rng)
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticVideo>, DataError> {
    spec.validate()?;
    let templates = class_templates(spec);
    (0..spec.num_videos)
        .map(|i| generate_video(spec, &templates, i))
        .collect()
}

fn generate_video(
    spec: &SyntheticSpec,
    templates: &Array2<f64>,
    index: usize,
) -> Result<SyntheticVideo, DataError> {
    let mut rng = stream(spec.seed, index as u64 + 1);
    let f = spec.feature_rate_hz;
    let total = seconds_to_anchor(spec.video_len_s, f);
    let rate_per_s = spec.actions_per_class_per_min / 60.0;
    let gap = Exp::new(rate_per_s).map_err(|e| DataError::Invalid(e.to_string()))?;

    let mut events = Vec::new();
    for k in 0..spec.num_classes {
        let mut time = gap.sample(&mut rng);
        while time < spec.video_len_s {
            events.push((time, k));
            time += gap.sample(&mut rng);
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut features = if spec.noise_sigma > 0.0 {
        Array2::from_shape_simple_fn((total, spec.feature_dim), || noise.sample(&mut rng))
    } else {
        Array2::zeros((total, spec.feature_dim))
    };

    let w = spec.bump_width_s;
    let reach = 6.0 * w;
    for &(time, k) in &events {
        let lo = ((time - reach) * f).floor().max(0.0) as usize;
        let hi = (((time + reach) * f).ceil() as usize).min(total.saturating_sub(1));
        for t in lo..=hi {
            let dt = t as f64 / f - time;
            let env = (-(dt * dt) / (2.0 * w * w)).exp();
            let mut row = features.row_mut(t);
            row.scaled_add(env, &templates.row(k));
        }
    }

    let actions = ActionSet::new(
        events
            .iter()
            .map(|&(time, k)| Action::new(seconds_to_anchor(time, f).min(total - 1), k)),
    );
    let sequence = FeatureSequence::new(features, f, format!("video_{index:03}"))?;
    Ok(SyntheticVideo {
        sequence,
        actions,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_bump_is_nonzero_at_centre() {
        let spec = SyntheticSpec {
            num_videos: 60,
            noise_sigma: 0.0,
            actions_per_class_per_min: 0.2,
            num_classes: 1,
            ..SyntheticSpec::default()
        };
        let videos = generate_synthetic(&spec).unwrap();
        // Pick a video with exactly one action.
        let v = videos
            .iter()
            .find(|v| v.events.len() == 1)
            .expect("some video with one action");
        let a = v.actions.actions()[0];
        assert!(v.sequence.features.row(a.index).iter().any(|&x| x != 0.0));
        // Far from the action everything is exactly zero.
        let far = if a.index > 200 {
            0
        } else {
            v.sequence.len() - 1
        };
        assert!(v.sequence.features.row(far).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticSpec {
            num_videos: 2,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.events, y.events);
            let xb: Vec<u64> = x.sequence.features.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.sequence.features.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let other = generate_synthetic(&SyntheticSpec {
            seed: 1,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(a[0].events, other[0].events);
    }

    #[test]
    fn adding_videos_keeps_earlier_ones() {
        let spec = SyntheticSpec {
            num_videos: 1,
            ..SyntheticSpec::default()
        };
        let one = generate_synthetic(&spec).unwrap();
        let three = generate_synthetic(&SyntheticSpec {
            num_videos: 3,
            ..spec
        })
        .unwrap();
        assert_eq!(one[0].events, three[0].events);
    }

    #[test]
    fn poisson_action_count() {
        // 2/min over 10 min: mean 20, variance 20. Mean of 500 draws has
        // standard deviation sqrt(20/500) = 0.2.
        let spec = SyntheticSpec {
            num_videos: 500,
            num_classes: 1,
            feature_dim: 1,
            ..SyntheticSpec::default()
        };
        let videos = generate_synthetic(&spec).unwrap();
        let mean = videos.iter().map(|v| v.events.len() as f64).sum::<f64>() / 500.0;
        assert!((mean - 20.0).abs() <= 3.0 * 0.2, "mean = {mean}");
        let var = videos
            .iter()
            .map(|v| (v.events.len() as f64 - mean).powi(2))
            .sum::<f64>()
            / 499.0;
        assert!((var - 20.0).abs() < 5.0, "var = {var}");
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate_synthetic(&SyntheticSpec {
            bump_width_s: 0.0,
            ..SyntheticSpec::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            noise_sigma: -1.0,
            ..SyntheticSpec::default()
        })
        .is_err());
    }
}
