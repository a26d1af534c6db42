//! Class activation maps and everything derived from them: reliable
//! three-way pseudo labels, pairwise affinity labels, token foreground
//! labels and the positive/negative verdict for a masked view.

use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::masking::KeyMask;
use crate::numerics::{matmul_t, upsample_matrix, Tensor};

/// Label value for pixels in the uncertain band.
pub const IGNORE: u8 = 255;

/// Per-class activations on the token grid, `C×H′×W′`, each present class
/// min-max normalised to `[0, 1]` and absent classes zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct Cam {
    pub num_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<f64>,
    /// 1-based encoder layer the activations came from (0 when unknown).
    pub source_layer: usize,
}

impl Cam {
    pub fn from_data(num_classes: usize, grid_h: usize, grid_w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_classes * grid_h * grid_w {
            return Err(Error::dim(format!(
                "{} values for a {num_classes}×{grid_h}×{grid_w} CAM",
                data.len()
            )));
        }
        Ok(Cam {
            num_classes,
            grid_h,
            grid_w,
            data,
            source_layer: 0,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.num_tokens();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, token: usize) -> f64 {
        self.data[c * self.num_tokens() + token]
    }

    /// Resamples every channel through an interpolation matrix of shape
    /// `(height·width)×N`, such as [`upsample_matrix`] produces.
    pub fn resample(&self, interp: &Tensor, height: usize, width: usize) -> Result<Cam> {
        if interp.shape() != [height * width, self.num_tokens()] {
            return Err(Error::dim(format!(
                "interpolation matrix {:?} for {} tokens to {height}×{width}",
                interp.shape(),
                self.num_tokens()
            )));
        }
        let ch = Tensor::new(vec![self.num_classes, self.num_tokens()], self.data.clone())?;
        let out = matmul_t(&ch, false, interp, true)?;
        Ok(Cam {
            num_classes: self.num_classes,
            grid_h: height,
            grid_w: width,
            data: out.into_data(),
            source_layer: self.source_layer,
        })
    }

    /// Bilinear resize to `height × width` with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Cam {
        let u = upsample_matrix(self.grid_h, self.grid_w, height, width);
        self.resample(&u, height, width).expect("matching extents")
    }

    /// Highest activation at a token and the (lowest) class attaining it.
    pub fn max_at(&self, token: usize) -> (usize, f64) {
        let mut best = (0, self.at(0, token));
        for c in 1..self.num_classes {
            let v = self.at(c, token);
            if v > best.1 {
                best = (c, v);
            }
        }
        best
    }
}

/// `F = Wᵀ · Zᵀ` reshaped to `C×H′×W′`, then absent channels zeroed and
/// present channels min-max normalised. Constant channels become zero.
pub fn compute_cam(
    patches: &Tensor,
    weights: &Tensor,
    present: &[bool],
    grid_h: usize,
    grid_w: usize,
) -> Result<Cam> {
    let c = weights.cols();
    if present.len() != c {
        return Err(Error::dim(format!("{} presence flags for {c} classes", present.len())));
    }
    if !present.iter().any(|&p| p) {
        return Err(Error::Domain("CAM needs at least one present class".into()));
    }
    if patches.rows() != grid_h * grid_w {
        return Err(Error::dim(format!(
            "{} tokens on a {grid_h}×{grid_w} grid",
            patches.rows()
        )));
    }
    // (D×C)ᵀ · (N×D)ᵀ = C×N
    let raw = matmul_t(weights, true, patches, true)?;
    let mut data = raw.into_data();
    let n = grid_h * grid_w;
    for (k, &p) in present.iter().enumerate() {
        let ch = &mut data[k * n..(k + 1) * n];
        if !p {
            ch.fill(0.0);
            continue;
        }
        let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            ch.fill(0.0);
            continue;
        }
        for v in ch.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    }
    Cam::from_data(c, grid_h, grid_w, data)
}

/// Pseudo segmentation map over `{0 (background), 1..=C, 255 (uncertain)}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReliableLabel {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl ReliableLabel {
    pub fn count(&self, value: u8) -> usize {
        self.labels.iter().filter(|&&l| l == value).count()
    }

    /// Pixels carrying a class id in `1..=C`.
    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0 && l != IGNORE).count()
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> ReliableLabel {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                labels.push(self.labels[(y / factor) * self.width + x / factor]);
            }
        }
        ReliableLabel {
            height: h,
            width: w,
            labels,
        }
    }
}

fn check_thresholds(bg: f64, fg: f64) -> Result<()> {
    if !(0.0 < bg && bg < fg && fg < 1.0) {
        return Err(Error::config(format!(
            "thresholds must satisfy 0 < bg < fg < 1, got bg={bg} fg={fg}"
        )));
    }
    Ok(())
}

/// Three-way split: argmax class (1-based) where the top activation reaches
/// `fg`, background where it is at most `bg`, uncertain in between.
pub fn partition(cam: &Cam, bg: f64, fg: f64) -> Result<ReliableLabel> {
    check_thresholds(bg, fg)?;
    let labels = (0..cam.num_tokens())
        .map(|t| {
            let (c, v) = cam.max_at(t);
            if v >= fg {
                (c + 1) as u8
            } else if v <= bg {
                0
            } else {
                IGNORE
            }
        })
        .collect();
    Ok(ReliableLabel {
        height: cam.grid_h,
        width: cam.grid_w,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    Positive,
    Negative,
    Ignore,
}

/// Label for every ordered pixel pair `(i, j)` of a reliable label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairAffinityLabel {
    pub n: usize,
    pub kinds: Vec<PairKind>,
}

impl PairAffinityLabel {
    pub fn get(&self, i: usize, j: usize) -> PairKind {
        self.kinds[i * self.n + j]
    }

    pub fn count(&self, kind: PairKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }
}

pub fn affinity_pairs(label: &ReliableLabel) -> PairAffinityLabel {
    let n = label.labels.len();
    let mut kinds = Vec::with_capacity(n * n);
    for &a in &label.labels {
        for &b in &label.labels {
            kinds.push(if a == IGNORE || b == IGNORE {
                PairKind::Ignore
            } else if a == b {
                PairKind::Positive
            } else {
                PairKind::Negative
            });
        }
    }
    PairAffinityLabel { n, kinds }
}

/// Binary foreground map over tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLabel {
    pub grid_h: usize,
    pub grid_w: usize,
    pub bits: Vec<bool>,
}

/// A token is foreground when its top activation reaches `fg`.
pub fn token_label(cam: &Cam, fg: f64) -> TokenLabel {
    TokenLabel {
        grid_h: cam.grid_h,
        grid_w: cam.grid_w,
        bits: (0..cam.num_tokens()).map(|t| cam.max_at(t).1 >= fg).collect(),
    }
}

/// A masked view is positive when its kept tokens are mostly foreground:
/// `#(foreground ∧ kept) > mu · #kept`. Equality counts as negative.
pub fn positiveness(label: &TokenLabel, mask: &KeyMask, mu: f64) -> Result<bool> {
    if label.bits.len() != mask.len() || (label.grid_h, label.grid_w) != mask.grid() {
        return Err(Error::dim("token label and key mask grids differ"));
    }
    let kept = mask.num_kept();
    if kept == 0 {
        return Err(Error::Domain("positiveness of a view with no kept tokens".into()));
    }
    let fg_kept = label
        .bits
        .iter()
        .zip(mask.keep())
        .filter(|(&f, &k)| f && k)
        .count();
    Ok(fg_kept as f64 > mu * kept as f64)
}

/// Post-processing hook applied to a reliable label before it supervises
/// the segmentation decoder.
pub trait Refiner {
    fn refine(&self, label: ReliableLabel, image: &Image) -> ReliableLabel;
}

/// Returns labels unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&self, label: ReliableLabel, _image: &Image) -> ReliableLabel {
        label
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(c: usize, h: usize, w: usize, data: &[f64]) -> Cam {
        Cam::from_data(c, h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_weights_one_hot_patches() {
        // D = C = 2, four tokens on a 2×2 grid
        let patches = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let c = compute_cam(&patches, &Tensor::identity(2), &[true, true], 2, 2).unwrap();
        assert_eq!(c.data, patches.transpose().into_data());
    }

    #[test]
    fn resize_interpolates_between_tokens() {
        let c = cam(1, 2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let r = c.resize(4, 4);
        assert_eq!((r.grid_h, r.grid_w), (4, 4));
        let expect = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for (x, e) in expect.iter().enumerate() {
                assert!((r.at(0, y * 4 + x) - e).abs() < 1e-15);
            }
        }
        assert!(c.resample(&Tensor::zeros(&[3, 4]), 4, 4).is_err());
    }

    #[test]
    fn hand_matmul_then_min_max() {
        let patches = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let w = Tensor::from_rows(&[&[1.0], &[1.0]]);
        let raw = matmul_t(&w, true, &patches, true).unwrap();
        assert_eq!(raw.data(), &[1.0, 2.0]);
        let c = compute_cam(&patches, &w, &[true], 1, 2).unwrap();
        assert_eq!(c.data, vec![0.0, 1.0]);
    }

    #[test]
    fn absent_and_degenerate_channels_are_zero() {
        let patches = Tensor::from_rows(&[&[1.0, 3.0], &[2.0, 3.0]]);
        let w = Tensor::from_rows(&[&[5.0, 0.0], &[-1.0, 1.0]]);
        let c = compute_cam(&patches, &w, &[false, true], 1, 2).unwrap();
        assert_eq!(c.channel(0), &[0.0, 0.0]);
        // channel 1 reads column 1 of the patches, which is constant
        assert_eq!(c.channel(1), &[0.0, 0.0]);
        assert!(compute_cam(&patches, &w, &[false, false], 1, 2).is_err());
    }

    #[test]
    fn partition_threshold_rule() {
        // three classes, three tokens: 0.8 at class 3, max 0.1, max 0.5
        let c = cam(3, 1, 3, &[0.1, 0.05, 0.5, 0.2, 0.1, 0.0, 0.8, 0.0, 0.3]);
        let l = partition(&c, 0.25, 0.7).unwrap();
        assert_eq!(l.labels, vec![3, 0, IGNORE]);
    }

    #[test]
    fn partition_ties_go_to_lowest_class() {
        let c = cam(2, 1, 1, &[0.9, 0.9]);
        assert_eq!(partition(&c, 0.25, 0.7).unwrap().labels, vec![1]);
    }

    #[test]
    fn partition_boundaries_inclusive() {
        let c = cam(1, 1, 2, &[0.7, 0.25]);
        assert_eq!(partition(&c, 0.25, 0.7).unwrap().labels, vec![1, 0]);
    }

    #[test]
    fn partition_rejects_bad_thresholds() {
        let c = cam(1, 1, 1, &[0.5]);
        assert!(partition(&c, 0.7, 0.25).is_err());
        assert!(partition(&c, 0.0, 0.5).is_err());
        assert!(partition(&c, 0.5, 1.0).is_err());
    }

    #[test]
    fn pairs_from_simple_maps() {
        let uniform = ReliableLabel { height: 2, width: 2, labels: vec![2; 4] };
        let p = affinity_pairs(&uniform);
        assert_eq!(p.count(PairKind::Positive), 16);

        let two = ReliableLabel { height: 1, width: 2, labels: vec![1, 0] };
        assert_eq!(affinity_pairs(&two).get(0, 1), PairKind::Negative);

        let with_ignore = ReliableLabel { height: 1, width: 3, labels: vec![1, IGNORE, 1] };
        let p = affinity_pairs(&with_ignore);
        for j in 0..3 {
            assert_eq!(p.get(1, j), PairKind::Ignore);
            assert_eq!(p.get(j, 1), PairKind::Ignore);
        }
        assert_eq!(p.get(0, 2), PairKind::Positive);
    }

    #[test]
    fn token_label_threshold() {
        assert!(token_label(&cam(1, 1, 2, &[0.0, 0.0]), 0.7).bits.iter().all(|b| !b));
        assert_eq!(token_label(&cam(1, 1, 1, &[0.71]), 0.7).bits, vec![true]);
    }

    #[test]
    fn positiveness_cases() {
        let mask = KeyMask::from_keep(2, 2, vec![true; 4]).unwrap();
        let all_fg = TokenLabel { grid_h: 2, grid_w: 2, bits: vec![true; 4] };
        assert!(positiveness(&all_fg, &mask, 0.5).unwrap());
        let all_bg = TokenLabel { grid_h: 2, grid_w: 2, bits: vec![false; 4] };
        assert!(!positiveness(&all_bg, &mask, 0.5).unwrap());
        // 2 of 4 kept tokens foreground: 2 > 2 is false
        let half = TokenLabel { grid_h: 2, grid_w: 2, bits: vec![true, false, true, false] };
        assert!(!positiveness(&half, &mask, 0.5).unwrap());
    }

    #[test]
    fn upsample_nearest() {
        let l = ReliableLabel { height: 1, width: 2, labels: vec![1, IGNORE] };
        let u = l.upsample(2);
        assert_eq!(u.labels, vec![1, 1, IGNORE, IGNORE, 1, 1, IGNORE, IGNORE]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cam_strategy() -> impl Strategy<Value = Cam> {
            proptest::collection::vec(0.0f64..=1.0, 3 * 16)
                .prop_map(|d| Cam::from_data(3, 4, 4, d).unwrap())
        }

        proptest! {
            #[test]
            fn raising_fg_never_adds_foreground(c in cam_strategy(), a in 0.3f64..0.95, b in 0.3f64..0.95) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assume!(hi < 1.0 && lo > 0.25);
                let l1 = partition(&c, 0.25, lo).unwrap();
                let l2 = partition(&c, 0.25, hi).unwrap();
                prop_assert!(l2.foreground_count() <= l1.foreground_count());
            }

            #[test]
            fn lowering_bg_never_adds_background(c in cam_strategy(), a in 0.01f64..0.69, b in 0.01f64..0.69) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let l_hi = partition(&c, hi, 0.7).unwrap();
                let l_lo = partition(&c, lo, 0.7).unwrap();
                prop_assert!(l_lo.count(0) <= l_hi.count(0));
            }

            #[test]
            fn pair_labels_symmetric(labels in proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(2u8), Just(IGNORE)], 1..20)) {
                let l = ReliableLabel { height: 1, width: labels.len(), labels };
                let p = affinity_pairs(&l);
                for i in 0..p.n {
                    for j in 0..p.n {
                        prop_assert_eq!(p.get(i, j), p.get(j, i));
                    }
                }
            }
        }
    }
}
