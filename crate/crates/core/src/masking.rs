//! Block-structured random key masks.
//!
//! Convention used everywhere in the crate: `keep == true` means the key is
//! attended. Code that needs the opposite ("1 marks a masked token") asks
//! for [`KeyMask::dropped`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-token keep/drop flags over an `grid_h × grid_w` token grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMask {
    grid_h: usize,
    grid_w: usize,
    keep: Vec<bool>,
    /// Block drop probability the mask was drawn with.
    pub ratio: f64,
    /// Block side length in grid cells.
    pub scale: usize,
    /// True when every block was drawn as dropped and one was forced back.
    pub forced_keep: bool,
}

impl KeyMask {
    pub fn all_keep(grid_h: usize, grid_w: usize) -> Self {
        KeyMask {
            grid_h,
            grid_w,
            keep: vec![true; grid_h * grid_w],
            ratio: 0.0,
            scale: 1,
            forced_keep: false,
        }
    }

    /// Wraps explicit keep flags; at least one must be set.
    pub fn from_keep(grid_h: usize, grid_w: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != grid_h * grid_w {
            return Err(Error::dim(format!(
                "{} keep flags for a {grid_h}×{grid_w} grid",
                keep.len()
            )));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Domain("key mask keeps no tokens".into()));
        }
        Ok(KeyMask {
            grid_h,
            grid_w,
            keep,
            ratio: 0.0,
            scale: 1,
            forced_keep: false,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// Inverse view: `true` marks a masked (dropped) token.
    pub fn dropped(&self) -> Vec<bool> {
        self.keep.iter().map(|&k| !k).collect()
    }

    pub fn num_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn drop_fraction(&self) -> f64 {
        1.0 - self.num_kept() as f64 / self.keep.len() as f64
    }

    /// Checks that the dropped cells are exactly a union of aligned
    /// `scale × scale` blocks (clipped at the grid edge).
    pub fn is_block_aligned(&self, scale: usize) -> bool {
        let s = scale.max(1);
        for by in (0..self.grid_h).step_by(s) {
            for bx in (0..self.grid_w).step_by(s) {
                let first = self.keep[by * self.grid_w + bx];
                for y in by..(by + s).min(self.grid_h) {
                    for x in bx..(bx + s).min(self.grid_w) {
                        if self.keep[y * self.grid_w + x] != first {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Draws a key mask: the grid is tiled into `⌈H/s⌉·⌈W/s⌉` aligned blocks and
/// each block is dropped independently with probability `ratio`. If every
/// block is dropped, one block picked uniformly is kept.
pub fn sample_key_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    scale: usize,
    rng: &mut R,
) -> Result<KeyMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("masking ratio {ratio} outside [0, 1)")));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::config("empty token grid"));
    }
    if scale == 0 || scale > grid_h.min(grid_w) {
        return Err(Error::config(format!(
            "masking scale {scale} outside [1, {}]",
            grid_h.min(grid_w)
        )));
    }
    let blocks_h = grid_h.div_ceil(scale);
    let blocks_w = grid_w.div_ceil(scale);
    let mut block_keep: Vec<bool> = (0..blocks_h * blocks_w)
        .map(|_| !rng.gen_bool(ratio))
        .collect();
    let forced_keep = !block_keep.iter().any(|&k| k);
    if forced_keep {
        let pick = rng.gen_range(0..block_keep.len());
        block_keep[pick] = true;
    }
    let mut keep = vec![false; grid_h * grid_w];
    for y in 0..grid_h {
        for x in 0..grid_w {
            keep[y * grid_w + x] = block_keep[(y / scale) * blocks_w + x / scale];
        }
    }
    Ok(KeyMask {
        grid_h,
        grid_w,
        keep,
        ratio,
        scale,
        forced_keep,
    })
}

/// `N×N` switch over the attention affinity matrix; `M(x, y) = keep(y)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AffinityMask {
    n: usize,
    bits: Vec<bool>,
}

impl AffinityMask {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn at(&self, x: usize, y: usize) -> bool {
        self.bits[x * self.n + y]
    }

    pub fn row(&self, x: usize) -> &[bool] {
        &self.bits[x * self.n..(x + 1) * self.n]
    }

    pub fn is_column_constant(&self) -> bool {
        (1..self.n).all(|x| self.row(x) == self.row(0))
    }

    /// Recovers the key mask from any row, reshaped onto the token grid.
    pub fn key_mask_from_row(&self, x: usize, grid_h: usize, grid_w: usize) -> Result<KeyMask> {
        KeyMask::from_keep(grid_h, grid_w, self.row(x).to_vec())
    }
}

/// Column expansion of a key mask.
pub fn expand(mask: &KeyMask) -> AffinityMask {
    let n = mask.len();
    let mut bits = Vec::with_capacity(n * n);
    for _ in 0..n {
        bits.extend_from_slice(&mask.keep);
    }
    AffinityMask { n, bits }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskStats {
    pub ratio: f64,
    pub scale: usize,
    pub mean_drop_fraction: f64,
    pub min_kept: usize,
    pub forced_keep_rate: f64,
    pub block_alignment_ok: bool,
}

impl MaskStats {
    pub const CSV_HEADER: &'static str = "ratio,scale,mean_drop,min_kept,forced_keep_rate";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{:.6}",
            self.ratio, self.scale, self.mean_drop_fraction, self.min_kept, self.forced_keep_rate
        )
    }
}

/// Summary statistics over `trials` masks drawn from a seeded stream.
pub fn mask_stats(
    ratio: f64,
    scale: usize,
    grid_h: usize,
    grid_w: usize,
    trials: usize,
    seed: u64,
) -> Result<MaskStats> {
    if trials == 0 {
        return Err(Error::config("mask_stats needs at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop_sum = 0.0;
    let mut min_kept = usize::MAX;
    let mut forced = 0usize;
    let mut aligned = true;
    for _ in 0..trials {
        let m = sample_key_mask(grid_h, grid_w, ratio, scale, &mut rng)?;
        drop_sum += m.drop_fraction();
        min_kept = min_kept.min(m.num_kept());
        forced += m.forced_keep as usize;
        aligned &= m.is_block_aligned(scale);
    }
    Ok(MaskStats {
        ratio,
        scale,
        mean_drop_fraction: drop_sum / trials as f64,
        min_kept,
        forced_keep_rate: forced as f64 / trials as f64,
        block_alignment_ok: aligned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let m = sample_key_mask(8, 8, 0.0, 4, &mut rng(1)).unwrap();
        assert_eq!(m, KeyMask { ratio: 0.0, scale: 4, ..KeyMask::all_keep(8, 8) });
        let s = mask_stats(0.0, 2, 8, 8, 100, 3).unwrap();
        assert_eq!(s.mean_drop_fraction, 0.0);
    }

    #[test]
    fn invalid_arguments_are_config_errors() {
        let r = &mut rng(0);
        assert!(matches!(sample_key_mask(8, 8, 1.0, 4, r), Err(Error::Config(_))));
        assert!(matches!(sample_key_mask(8, 8, -0.1, 4, r), Err(Error::Config(_))));
        assert!(matches!(sample_key_mask(8, 8, 0.5, 0, r), Err(Error::Config(_))));
        assert!(matches!(sample_key_mask(8, 8, 0.5, 9, r), Err(Error::Config(_))));
    }

    #[test]
    fn per_block_drop_frequency_matches_ratio() {
        // 8×8 grid at scale 4: four blocks, each Bernoulli(0.5) before forcing.
        let r = &mut rng(7);
        let trials = 10_000;
        let mut dropped_blocks = 0usize;
        for _ in 0..trials {
            let m = sample_key_mask(8, 8, 0.5, 4, r).unwrap();
            for (by, bx) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
                dropped_blocks += !m.keep()[by * 8 + bx] as usize;
            }
        }
        let freq = dropped_blocks as f64 / (4 * trials) as f64;
        // forced keep shifts the mean by at most 0.5^4/4 ≈ 0.016
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn clipped_blocks_at_grid_edge() {
        let r = &mut rng(11);
        for _ in 0..500 {
            let m = sample_key_mask(7, 5, 0.6, 3, r).unwrap();
            assert!(m.is_block_aligned(3));
            assert!(m.num_kept() > 0);
        }
    }

    #[test]
    fn expand_definition() {
        let m = KeyMask::from_keep(1, 2, vec![true, false]).unwrap();
        let a = expand(&m);
        assert_eq!(a.row(0), &[true, false]);
        assert_eq!(a.row(1), &[true, false]);
        let all = expand(&KeyMask::all_keep(2, 2));
        assert!((0..4).all(|x| (0..4).all(|y| all.at(x, y))));
    }

    #[test]
    fn forced_keep_keeps_one_whole_block() {
        let s = mask_stats(0.95, 4, 8, 8, 2_000, 5).unwrap();
        assert_eq!(s.min_kept, 16);
        assert!(s.block_alignment_ok);
    }

    #[test]
    fn same_seed_same_sequence() {
        let a: Vec<_> = {
            let r = &mut rng(42);
            (0..20).map(|_| sample_key_mask(8, 8, 0.5, 2, r).unwrap()).collect()
        };
        let b: Vec<_> = {
            let r = &mut rng(42);
            (0..20).map(|_| sample_key_mask(8, 8, 0.5, 2, r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn expansion_is_column_constant_and_row_round_trips(
                h in 1usize..9, w in 1usize..9, ratio in 0.0f64..0.99,
                seed in any::<u64>(), row_pick in any::<usize>()
            ) {
                let scale = 1 + seed as usize % h.min(w);
                let m = sample_key_mask(h, w, ratio, scale, &mut rng(seed)).unwrap();
                let a = expand(&m);
                prop_assert!(a.is_column_constant());
                let x = row_pick % (h * w);
                let back = a.key_mask_from_row(x, h, w).unwrap();
                prop_assert_eq!(back.keep(), m.keep());
                prop_assert!(m.is_block_aligned(scale));
                prop_assert!(m.num_kept() >= 1);
            }
        }
    }
}
