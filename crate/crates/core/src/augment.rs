//! Seeded image augmentation and the combined training stream.
//!
//! Augmentation is random resized crop, horizontal flip, color jitter and
//! random grayscale. Every draw is seeded from `(policy.seed, draw_seed)`, and
//! [`build_epoch`] derives `draw_seed` from `(epoch, item, view)`, so any item
//! can be materialized independently and in any order.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::float::{self, Float};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    /// Fraction of the image area kept by the random crop.
    pub crop_scale: (Float, Float),
    /// Aspect-ratio range of the crop (sampled log-uniformly).
    pub crop_ratio: (Float, Float),
    pub flip_probability: Float,
    /// Probability of applying color jitter at all.
    pub jitter_probability: Float,
    /// Multiplier bounds: factors are drawn from `[1 - b, 1 + b]`.
    pub brightness: Float,
    pub contrast: Float,
    pub saturation: Float,
    pub grayscale_probability: Float,
    /// Output `(height, width)`.
    pub output_size: (usize, usize),
    pub seed: u64,
}

impl AugmentationPolicy {
    /// SimCLR-style defaults for images of the given size.
    pub fn simclr(output_size: (usize, usize), seed: u64) -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_probability: 0.5,
            jitter_probability: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_probability: 0.2,
            output_size,
            seed,
        }
        .with_jitter_strength(0.5)
    }

    /// Leaves images untouched (apart from resizing to `output_size`).
    pub fn identity(output_size: (usize, usize), seed: u64) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_probability: 0.0,
            jitter_probability: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_probability: 0.0,
            output_size,
            seed,
        }
    }

    /// Sets brightness, contrast and saturation bounds to `0.8 * strength`.
    pub fn with_jitter_strength(mut self, strength: Float) -> Self {
        let b = 0.8 * strength;
        self.brightness = b;
        self.contrast = b;
        self.saturation = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let prob = [
            ("flip_probability", self.flip_probability),
            ("jitter_probability", self.jitter_probability),
            ("grayscale_probability", self.grayscale_probability),
        ];
        for (name, p) in prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} not in [0,1]")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "crop_scale ({lo}, {hi}) must lie within (0, 1]"
            )));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::InvalidConfig("crop_ratio must be positive".into()));
        }
        for b in [self.brightness, self.contrast, self.saturation] {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("jitter bound {b} not in [0,1]")));
            }
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::InvalidConfig("output_size must be positive".into()));
        }
        Ok(())
    }
}

/// Result of augmenting one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub source_index: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Float>,
}

/// Augments `img` deterministically from `(policy.seed, draw_seed)`.
pub fn apply(policy: &AugmentationPolicy, img: &ImageRecord, draw_seed: u64) -> Result<AugmentedView> {
    policy.validate()?;
    let (c, h, w) = img.dims();
    let min_side = float::sqrt(policy.crop_scale.0) * h.min(w) as Float;
    if h == 0 || w == 0 || min_side < 1.0 {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min_crop: 1,
        });
    }
    let mut rng = rng::rng_for(&[policy.seed, draw_seed]);

    let (top, left, ch, cw) = sample_crop(policy, h, w, &mut rng);
    let (oh, ow) = policy.output_size;
    let mut px = resize_crop(&img.pixels, (c, h, w), (top, left, ch, cw), (oh, ow));

    if rng.gen::<Float>() < policy.flip_probability {
        flip_horizontal(&mut px, c, oh, ow);
    }
    if rng.gen::<Float>() < policy.jitter_probability {
        color_jitter(policy, &mut px, c, oh * ow, &mut rng);
    }
    if rng.gen::<Float>() < policy.grayscale_probability {
        to_grayscale(&mut px, c, oh * ow);
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(AugmentedView {
        source_index: img.index,
        channels: c,
        height: oh,
        width: ow,
        pixels: px,
    })
}

fn sample_crop<R: Rng>(p: &AugmentationPolicy, h: usize, w: usize, rng: &mut R) -> (usize, usize, usize, usize) {
    if p.crop_scale.0 >= 1.0 {
        return (0, 0, h, w);
    }
    let area = (h * w) as Float;
    let (lr0, lr1) = (float::ln(p.crop_ratio.0), float::ln(p.crop_ratio.1));
    for _ in 0..10 {
        let target = area * rng::uniform(rng, p.crop_scale.0, p.crop_scale.1);
        let ratio = float::exp(rng::uniform(rng, lr0, lr1));
        let cw = float::round(float::sqrt(target * ratio)) as usize;
        let ch = float::round(float::sqrt(target / ratio)) as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear resize of a crop, half-pixel centers.
fn resize_crop(
    src: &[Float],
    (c, h, w): (usize, usize, usize),
    (top, left, ch, cw): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<Float> {
    let mut out = Vec::with_capacity(c * oh * ow);
    let sy = ch as Float / oh as Float;
    let sx = cw as Float / ow as Float;
    let coord = |o: usize, scale: Float, len: usize| -> (usize, usize, Float) {
        let f = ((o as Float + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as Float);
        let i0 = float::floor(f) as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, f - i0 as Float)
    };
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, sy, ch);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, sx, cw);
                let at = |y: usize, x: usize| plane[(top + y) * w + left + x];
                let v = if fx == 0.0 && fy == 0.0 {
                    at(y0, x0)
                } else {
                    let a = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let b = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    a * (1.0 - fy) + b * fy
                };
                out.push(v);
            }
        }
    }
    out
}

pub fn flip_horizontal(px: &mut [Float], c: usize, h: usize, w: usize) {
    for row in px[..c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

fn luma(px: &[Float], hw: usize, i: usize) -> Float {
    0.299 * px[i] + 0.587 * px[hw + i] + 0.114 * px[2 * hw + i]
}

fn color_jitter<R: Rng>(p: &AugmentationPolicy, px: &mut [Float], c: usize, hw: usize, rng: &mut R) {
    let mut factor = |b: Float| rng::uniform(rng, 1.0 - b, 1.0 + b);
    let fb = factor(p.brightness);
    let fc = factor(p.contrast);
    let fs = factor(p.saturation);
    if p.brightness > 0.0 {
        px.iter_mut().for_each(|v| *v = (*v * fb).clamp(0.0, 1.0));
    }
    if p.contrast > 0.0 {
        let mean = if c == 3 {
            (0..hw).map(|i| luma(px, hw, i)).sum::<Float>() / hw as Float
        } else {
            px.iter().sum::<Float>() / px.len() as Float
        };
        px.iter_mut()
            .for_each(|v| *v = ((*v - mean) * fc + mean).clamp(0.0, 1.0));
    }
    if p.saturation > 0.0 && c == 3 {
        for i in 0..hw {
            let g = luma(px, hw, i);
            for ci in 0..3 {
                let v = &mut px[ci * hw + i];
                *v = ((*v - g) * fs + g).clamp(0.0, 1.0);
            }
        }
    }
}

fn to_grayscale(px: &mut [Float], c: usize, hw: usize) {
    if c != 3 {
        return;
    }
    for i in 0..hw {
        let g = luma(px, hw, i);
        for ci in 0..3 {
            px[ci * hw + i] = g;
        }
    }
}

/// Original images plus mined semantic pairs (and optional duplicated
/// instances for the random-add control).
#[derive(Clone, Debug)]
pub struct CombinedDataset {
    pub originals: Vec<ImageRecord>,
    /// Semantic positive pairs as positions into `originals`.
    pub semantic_pairs: Vec<(usize, usize)>,
    /// Positions into `originals` added once more as ordinary instances.
    pub duplicates: Vec<usize>,
    pub epoch_seed: u64,
}

impl CombinedDataset {
    pub fn new(
        originals: Vec<ImageRecord>,
        semantic_pairs: Vec<(usize, usize)>,
        duplicates: Vec<usize>,
        epoch_seed: u64,
    ) -> Result<Self> {
        let n = originals.len();
        let check = |i: usize| {
            if i < n {
                Ok(())
            } else {
                Err(Error::IndexOutOfRange {
                    what: "combined dataset",
                    index: i,
                    bound: n,
                })
            }
        };
        for &(a, b) in &semantic_pairs {
            check(a)?;
            check(b)?;
        }
        for &d in &duplicates {
            check(d)?;
        }
        Ok(Self {
            originals,
            semantic_pairs,
            duplicates,
            epoch_seed,
        })
    }
}

/// Where a positive pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    /// Two views of one original image.
    Instance,
    /// One view each of two different images judged semantically similar.
    Semantic,
    /// Two views of a randomly duplicated original (random-add control).
    Duplicate,
}

/// One entry of an epoch before its views are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemSpec {
    pub origin: Origin,
    /// Positions into `originals`. Equal for instance and duplicate items.
    pub sources: (usize, usize),
    /// Stable position in the unshuffled item list; keys the view seeds.
    pub item_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairItem {
    pub spec: ItemSpec,
    pub views: (AugmentedView, AugmentedView),
}

/// Shuffled positive-pair items of one epoch; views are drawn on demand.
pub struct EpochStream<'a> {
    dataset: &'a CombinedDataset,
    policy: &'a AugmentationPolicy,
    epoch: u64,
    plan: Vec<ItemSpec>,
    cursor: usize,
}

/// Builds the epoch's item list: one instance item per original, one per
/// semantic pair, one per duplicate, shuffled by `epoch_seed ^ epoch`.
pub fn build_epoch<'a>(
    ds: &'a CombinedDataset,
    policy: &'a AugmentationPolicy,
    epoch: u64,
) -> EpochStream<'a> {
    let mut plan = Vec::with_capacity(ds.originals.len() + ds.semantic_pairs.len() + ds.duplicates.len());
    plan.extend((0..ds.originals.len()).map(|i| (Origin::Instance, (i, i))));
    plan.extend(ds.semantic_pairs.iter().map(|&p| (Origin::Semantic, p)));
    plan.extend(ds.duplicates.iter().map(|&d| (Origin::Duplicate, (d, d))));
    let mut plan: Vec<ItemSpec> = plan
        .into_iter()
        .enumerate()
        .map(|(item_index, (origin, sources))| ItemSpec {
            origin,
            sources,
            item_index,
        })
        .collect();
    let mut r = rng::rng_for(&[ds.epoch_seed ^ epoch, 0xE90C]);
    plan.shuffle(&mut r);
    EpochStream {
        dataset: ds,
        policy,
        epoch,
        plan,
        cursor: 0,
    }
}

impl EpochStream<'_> {
    pub fn plan(&self) -> &[ItemSpec] {
        &self.plan
    }

    /// Seed for view `view` (0 or 1) of an item.
    pub fn view_seed(&self, item_index: usize, view: u64) -> u64 {
        rng::derive_seed(&[self.epoch, item_index as u64, view])
    }

    /// Draws the two views of an item.
    pub fn materialize(&self, spec: &ItemSpec) -> Result<PairItem> {
        let originals = &self.dataset.originals;
        let a = apply(self.policy, &originals[spec.sources.0], self.view_seed(spec.item_index, 0))?;
        let b = apply(self.policy, &originals[spec.sources.1], self.view_seed(spec.item_index, 1))?;
        Ok(PairItem {
            spec: *spec,
            views: (a, b),
        })
    }

    /// Draws a single view of `source` for an item (view index `view`).
    pub fn view(&self, spec: &ItemSpec, view: u64) -> Result<AugmentedView> {
        let src = if view == 0 { spec.sources.0 } else { spec.sources.1 };
        apply(
            self.policy,
            &self.dataset.originals[src],
            self.view_seed(spec.item_index, view),
        )
    }
}

impl Iterator for EpochStream<'_> {
    type Item = Result<PairItem>;

    fn next(&mut self) -> Option<Self::Item> {
        let spec = *self.plan.get(self.cursor)?;
        self.cursor += 1;
        Some(self.materialize(&spec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn image(index: usize, c: usize, h: usize, w: usize) -> ImageRecord {
        let n = c * h * w;
        let px = (0..n).map(|i| ((i * 37 + index * 11) % 101) as Float / 100.0).collect();
        ImageRecord::new(index, (c, h, w), px, Some(0)).unwrap()
    }

    #[test]
    fn identity_policy_returns_input() {
        let img = image(0, 3, 8, 6);
        let p = AugmentationPolicy::identity((8, 6), 1);
        for s in 0..5 {
            assert_eq!(apply(&p, &img, s).unwrap().pixels, img.pixels);
        }
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let img = image(0, 3, 5, 7);
        let mut p = AugmentationPolicy::identity((5, 7), 1);
        p.flip_probability = 1.0;
        let once = apply(&p, &img, 3).unwrap();
        assert_ne!(once.pixels, img.pixels);
        assert_eq!(once.pixels[6], img.pixels[0]);
        let mirrored = ImageRecord::new(0, (3, 5, 7), once.pixels.clone(), None).unwrap();
        assert_eq!(apply(&p, &mirrored, 9).unwrap().pixels, img.pixels);
    }

    #[test]
    fn same_seeds_same_view() {
        let img = image(2, 3, 16, 16);
        let p = AugmentationPolicy::simclr((12, 12), 5);
        let a = apply(&p, &img, 42).unwrap();
        let b = apply(&p, &img, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels.len(), 3 * 12 * 12);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let c = apply(&p, &img, 43).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn tiny_images_are_rejected() {
        let img = image(0, 1, 1, 1);
        let mut p = AugmentationPolicy::identity((1, 1), 0);
        p.crop_scale = (0.2, 1.0);
        assert!(matches!(apply(&p, &img, 0), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn bad_policy_is_rejected() {
        let img = image(0, 1, 4, 4);
        let mut p = AugmentationPolicy::identity((4, 4), 0);
        p.flip_probability = 1.5;
        assert!(apply(&p, &img, 0).is_err());
        let mut p = AugmentationPolicy::identity((4, 4), 0);
        p.crop_scale = (0.0, 1.0);
        assert!(apply(&p, &img, 0).is_err());
    }

    #[test]
    fn epoch_counts_and_origins() {
        let originals: Vec<_> = (0..10).map(|i| image(i, 1, 4, 4)).collect();
        let ds = CombinedDataset::new(originals, vec![(0, 1), (2, 3), (4, 9)], vec![], 7).unwrap();
        let p = AugmentationPolicy::identity((4, 4), 0);
        let items: Vec<_> = build_epoch(&ds, &p, 0).collect::<Result<_>>().unwrap();
        assert_eq!(items.len(), 13);
        let sem = items.iter().filter(|i| i.spec.origin == Origin::Semantic).count();
        assert_eq!(sem, 3);
        for it in &items {
            let (a, b) = it.spec.sources;
            assert_eq!(it.views.0.pixels, ds.originals[a].pixels);
            assert_eq!(it.views.1.pixels, ds.originals[b].pixels);
        }
    }

    #[test]
    fn empty_pairs_reduce_to_instance_stream() {
        let originals: Vec<_> = (0..6).map(|i| image(i, 1, 4, 4)).collect();
        let p = AugmentationPolicy::simclr((4, 4), 3);
        let plain = CombinedDataset::new(originals.clone(), vec![], vec![], 1).unwrap();
        let a: Vec<_> = build_epoch(&plain, &p, 2).collect::<Result<_>>().unwrap();
        assert!(a.iter().all(|i| i.spec.origin == Origin::Instance));
        let b: Vec<_> = build_epoch(&plain, &p, 2).collect::<Result<_>>().unwrap();
        assert_eq!(a, b);
        let c: Vec<_> = build_epoch(&plain, &p, 3).collect::<Result<_>>().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn combined_dataset_checks_indices() {
        let originals: Vec<_> = (0..3).map(|i| image(i, 1, 2, 2)).collect();
        assert!(CombinedDataset::new(originals.clone(), vec![(0, 3)], vec![], 0).is_err());
        assert!(CombinedDataset::new(originals, vec![], vec![5], 0).is_err());
    }
}
