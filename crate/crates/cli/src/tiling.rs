//! Covering a full video with overlapping chunks for inference.

use crate::CliError;
use std::ops::Range;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub start: usize,
    /// Video-global anchors this tile is responsible for.
    pub valid: Range<usize>,
}

/// Chunks at `0, S, 2S, …` until one reaches the end of the video. Each
/// tile keeps the anchors between the midpoints of its overlaps with its
/// neighbours; the first and last tiles extend to the video edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TiledPlan {
    pub chunk_len: usize,
    pub stride: usize,
    pub total: usize,
    pub tiles: Vec<Tile>,
}

impl TiledPlan {
    pub fn new(total: usize, chunk_len: usize, stride: usize) -> Result<Self, CliError> {
        if chunk_len == 0 || stride == 0 || stride > chunk_len {
            return Err(CliError::Config(format!(
                "stride {stride} must lie in [1, {chunk_len}]"
            )));
        }
        let mut starts = vec![0];
        while starts.last().unwrap() + chunk_len < total {
            starts.push(starts.last().unwrap() + stride);
        }
        let cuts: Vec<usize> = starts
            .windows(2)
            .map(|w| (w[1] + w[0] + chunk_len) / 2)
            .collect();
        let tiles = starts
            .iter()
            .enumerate()
            .map(|(i, &start)| {
                let lo = if i == 0 { 0 } else { cuts[i - 1] };
                let hi = if i + 1 == starts.len() {
                    total
                } else {
                    cuts[i]
                };
                Tile {
                    start,
                    valid: lo..hi,
                }
            })
            .collect();
        Ok(Self {
            chunk_len,
            stride,
            total,
            tiles,
        })
    }

    pub fn half_overlap(total: usize, chunk_len: usize) -> Result<Self, CliError> {
        Self::new(total, chunk_len, (chunk_len / 2).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn short_video_is_one_tile() {
        let p = TiledPlan::half_overlap(30, 112).unwrap();
        assert_eq!(
            p.tiles,
            vec![Tile {
                start: 0,
                valid: 0..30
            }]
        );
    }

    #[test]
    fn half_overlap_keeps_central_halves() {
        let p = TiledPlan::half_overlap(400, 112).unwrap();
        let starts: Vec<usize> = p.tiles.iter().map(|t| t.start).collect();
        assert_eq!(starts, vec![0, 56, 112, 168, 224, 280, 336]);
        assert_eq!(p.tiles[0].valid, 0..84);
        assert_eq!(p.tiles[1].valid, 84..140);
        assert_eq!(p.tiles[6].valid, 364..400);
    }

    #[test]
    fn bad_strides() {
        assert!(TiledPlan::new(100, 16, 0).is_err());
        assert!(TiledPlan::new(100, 16, 17).is_err());
        assert!(TiledPlan::new(100, 16, 16).is_ok());
    }

    proptest! {
        #[test]
        fn valid_regions_partition_the_video(total in 1usize..2000, chunk in 1usize..300, frac in 0.01f64..1.0) {
            let stride = ((chunk as f64 * frac) as usize).clamp(1, chunk);
            let p = TiledPlan::new(total, chunk, stride).unwrap();
            let mut next = 0;
            for t in &p.tiles {
                prop_assert_eq!(t.valid.start, next);
                prop_assert!(t.valid.end > t.valid.start);
                prop_assert!(t.valid.start >= t.start && t.valid.end <= t.start + chunk);
                next = t.valid.end;
            }
            prop_assert_eq!(next, total);
        }
    }
}
