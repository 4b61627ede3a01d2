//! Synthetic re-identification data with known latent factors.
//!
//! Each identity is one combination of four categorical factors, from low
//! level to high level: torso colour, torso texture, clothing layout and a
//! carried bag. Every identity is photographed by two synthetic cameras
//! ("views") that differ in gain, offset and colour cast; each image adds
//! its own spatial jitter, brightness jitter, background clutter and noise.
//! Pixel values are multiples of 1/255 so 8-bit exports round-trip exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HEIGHT: usize = 32;
pub const WIDTH: usize = 16;
pub const CHANNELS: usize = 3;

pub const FACTOR_NAMES: [&str; 4] = ["color", "texture", "layout", "carry"];

/// Torso palette in RGB.
pub const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.18, 0.15],
    [0.18, 0.72, 0.22],
    [0.18, 0.30, 0.88],
    [0.88, 0.80, 0.16],
    [0.70, 0.20, 0.80],
    [0.15, 0.78, 0.80],
];

pub const TEXTURE_NAMES: [&str; 3] = ["solid", "stripes", "checks"];

/// Camera model of one view: `gain · tint · x + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewNuisance {
    pub gain: f64,
    pub offset: f64,
    pub tint: [f64; 3],
}

pub const VIEWS: [ViewNuisance; 2] = [
    ViewNuisance { gain: 1.0, offset: 0.0, tint: [1.0, 1.0, 1.0] },
    ViewNuisance { gain: 0.85, offset: 0.08, tint: [1.05, 1.0, 0.92] },
];

/// Cardinality of each factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FactorSpec {
    pub colors: usize,
    pub textures: usize,
    pub layouts: usize,
    pub carry: usize,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self { colors: 4, textures: 3, layouts: 2, carry: 2 }
    }
}

impl FactorSpec {
    pub fn cardinalities(&self) -> [usize; 4] {
        [self.colors, self.textures, self.layouts, self.carry]
    }

    pub fn identity_space(&self) -> usize {
        self.cardinalities().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.cardinalities();
        let max = [PALETTE.len(), TEXTURE_NAMES.len(), 2, 2];
        for i in 0..4 {
            if c[i] < 2 || c[i] > max[i] {
                return Err(Error::Config(format!("{} factor needs 2..={} values, got {}", FACTOR_NAMES[i], max[i], c[i])));
            }
        }
        Ok(())
    }

    /// Factor values of combination `k` (mixed-radix, colour most significant).
    pub fn decode(&self, mut k: usize) -> [usize; 4] {
        let c = self.cardinalities();
        let mut out = [0; 4];
        for i in (0..4).rev() {
            out[i] = k % c[i];
            k /= c[i];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Per-image nuisance magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nuisance {
    /// Maximum horizontal and vertical shift of the figure, in pixels.
    pub jitter_x: u32,
    pub jitter_y: u32,
    /// Mirror the figure with probability one half.
    pub mirror: bool,
    /// Number of grey background rectangles.
    pub clutter: u32,
    /// Half-width of the uniform brightness offset.
    pub brightness: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Interpolates each camera between identity (0) and its full model (1).
    pub camera: f64,
}

impl Default for Nuisance {
    fn default() -> Self {
        Self { jitter_x: 2, jitter_y: 4, mirror: true, clutter: 5, brightness: 0.05, noise: 0.03, camera: 1.0 }
    }
}

impl Nuisance {
    pub fn validate(&self) -> Result<()> {
        if self.jitter_x > 2 || self.jitter_y > 6 {
            return Err(Error::Config(format!("jitter ({}, {}) would push the figure out of frame", self.jitter_x, self.jitter_y)));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.brightness) || !ok(self.noise) || !ok(self.camera) {
            return Err(Error::Config(String::from("brightness, noise and camera must be finite and non-negative")));
        }
        Ok(())
    }

    fn camera(&self, view: usize) -> ViewNuisance {
        let v = VIEWS[view];
        let lerp = |a: f64, b: f64| a + self.camera * (b - a);
        ViewNuisance { gain: lerp(1.0, v.gain), offset: lerp(0.0, v.offset), tint: v.tint.map(|t| lerp(1.0, t)) }
    }
}

/// Generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub spec: FactorSpec,
    pub train_ids: usize,
    pub test_ids: usize,
    pub imgs_per_view: usize,
    pub views: usize,
    pub nuisance: Nuisance,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: FactorSpec::default(),
            train_ids: 32,
            test_ids: 16,
            imgs_per_view: 8,
            views: 2,
            nuisance: Nuisance::default(),
            seed: 0,
        }
    }
}

/// Images with identity, view and ground-truth attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    /// `[N, 3, 32, 16]`, values in `[0, 1]`.
    pub images: Tensor<T>,
    /// Identity of each image, an index into `attributes`.
    pub ids: Vec<usize>,
    pub views: Vec<usize>,
    /// Per-view image counter of each image.
    pub shots: Vec<usize>,
    /// Factor values per identity.
    pub attributes: Vec<[usize; 4]>,
    pub splits: Vec<Split>,
    pub spec: FactorSpec,
}

fn image_seed(seed: u64, id: usize, view: usize, shot: usize) -> u64 {
    // splitmix64 over the packed coordinates
    let mut z = seed ^ ((id as u64) << 32 | (view as u64) << 16 | shot as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Canvas {
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill_rect(&mut self, top: i32, left: i32, h: i32, w: i32, mut color: impl FnMut(i32, i32) -> [f64; 3]) {
        for i in top.max(0)..(top + h).min(HEIGHT as i32) {
            for j in left.max(0)..(left + w).min(WIDTH as i32) {
                self.px[i as usize * WIDTH + j as usize] = color(i - top, j - left);
            }
        }
    }
}

fn texture_gain(texture: usize, i: i32, j: i32) -> f64 {
    let dark = match texture {
        1 => (i / 2) % 2 == 1,
        2 => ((i / 2) + (j / 2)) % 2 == 1,
        _ => false,
    };
    if dark {
        0.45
    } else {
        1.0
    }
}

/// Render one image of an identity with factor values `attrs`.
pub fn render(attrs: [usize; 4], view: &ViewNuisance, nuisance: &Nuisance, rng: &mut ChaCha8Rng) -> [Vec<f64>; 3] {
    let [color, texture, layout, carry] = attrs;
    let bg: f64 = rng.gen_range(0.3..0.6);
    let mut c = Canvas { px: vec![[bg; 3]; HEIGHT * WIDTH] };
    for _ in 0..nuisance.clutter {
        let rgb = [rng.gen_range(0.1..0.9); 3];
        let (t, l) = (rng.gen_range(0..HEIGHT as i32), rng.gen_range(0..WIDTH as i32));
        let (h, w) = (rng.gen_range(2..8), rng.gen_range(2..5));
        c.fill_rect(t, l, h, w, |_, _| rgb);
    }
    let (jx, jy) = (nuisance.jitter_x as i32, nuisance.jitter_y as i32);
    let dy = rng.gen_range(-jy..=jy);
    let dx = rng.gen_range(-jx..=jx);
    let skin = [0.87, 0.68, 0.55];
    let trousers = [0.16, 0.15, 0.18];
    let base = PALETTE[color];
    let cloth = |i: i32, j: i32| {
        let g = texture_gain(texture, i, j);
        [base[0] * g, base[1] * g, base[2] * g]
    };
    c.fill_rect(2 + dy, 6 + dx, 6, 4, |_, _| skin);
    let torso_rows = if layout == 1 { 18 } else { 12 };
    c.fill_rect(20 + dy, 4 + dx, 11, 3, |_, _| trousers);
    c.fill_rect(20 + dy, 9 + dx, 11, 3, |_, _| trousers);
    c.fill_rect(8 + dy, 4 + dx, torso_rows, 8, cloth);
    if carry == 1 {
        c.fill_rect(13 + dy, 12 + dx, 8, 2, |_, _| [0.42, 0.27, 0.12]);
    }
    if nuisance.mirror && rng.gen_bool(0.5) {
        for row in c.px.chunks_mut(WIDTH) {
            row.reverse();
        }
    }
    let jitter: f64 = if nuisance.brightness > 0.0 { rng.gen_range(-nuisance.brightness..nuisance.brightness) } else { 0.0 };
    let noise = Normal::new(0.0, nuisance.noise).expect("validated sigma");
    let mut planes = [vec![0.0; HEIGHT * WIDTH], vec![0.0; HEIGHT * WIDTH], vec![0.0; HEIGHT * WIDTH]];
    for (k, p) in c.px.iter().enumerate() {
        for ch in 0..3 {
            let v = view.gain * view.tint[ch] * p[ch] + view.offset + jitter + noise.sample(rng);
            planes[ch][k] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    planes
}

/// Render `n_ids` identities, `imgs_per_view` images in each of `views`
/// views. Identities are distinct factor combinations in a seed-shuffled
/// order; the first `train_ids` of them form the training split.
pub fn generate<T: Scalar>(cfg: &DataConfig) -> Result<Dataset<T>> {
    cfg.spec.validate()?;
    cfg.nuisance.validate()?;
    let n_ids = cfg.train_ids + cfg.test_ids;
    if n_ids > cfg.spec.identity_space() {
        return Err(Error::Capacity(format!(
            "{} identities requested but the factor space holds {}",
            n_ids,
            cfg.spec.identity_space()
        )));
    }
    if cfg.views == 0 || cfg.views > VIEWS.len() || cfg.imgs_per_view == 0 || n_ids == 0 {
        return Err(Error::Config(format!("need 1..={} views and at least one image and identity", VIEWS.len())));
    }
    let mut order: Vec<usize> = (0..cfg.spec.identity_space()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let attributes: Vec<[usize; 4]> = order[..n_ids].iter().map(|&k| cfg.spec.decode(k)).collect();
    let splits = (0..n_ids).map(|i| if i < cfg.train_ids { Split::Train } else { Split::Test }).collect();

    let cameras: Vec<ViewNuisance> = (0..cfg.views).map(|v| cfg.nuisance.camera(v)).collect();
    let n = n_ids * cfg.views * cfg.imgs_per_view;
    let plane = HEIGHT * WIDTH;
    let mut data = Vec::with_capacity(n * CHANNELS * plane);
    let (mut ids, mut views, mut shots) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (id, &attrs) in attributes.iter().enumerate() {
        for view in 0..cfg.views {
            for shot in 0..cfg.imgs_per_view {
                let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, id, view, shot));
                for p in render(attrs, &cameras[view], &cfg.nuisance, &mut rng) {
                    data.extend(p.into_iter().map(T::from_f64_lossy));
                }
                ids.push(id);
                views.push(view);
                shots.push(shot);
            }
        }
    }
    Ok(Dataset {
        images: Tensor::new(&[n, CHANNELS, HEIGHT, WIDTH], data)?,
        ids,
        views,
        shots,
        attributes,
        splits,
        spec: cfg.spec,
    })
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.attributes.len()
    }

    /// Image indices whose identity belongs to `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[self.ids[i]] == split).collect()
    }

    /// Training images with class labels `0..train_ids`.
    pub fn train_set(&self) -> Result<(Tensor<T>, Vec<usize>)> {
        let idx = self.indices(Split::Train);
        let labels = idx.iter().map(|&i| self.ids[i]).collect();
        Ok((self.images.select_rows(&idx)?, labels))
    }

    pub fn num_classes(&self) -> usize {
        self.splits.iter().filter(|&&s| s == Split::Train).count()
    }

    /// Attribute row of image `i`.
    pub fn image_attributes(&self, i: usize) -> [usize; 4] {
        self.attributes[self.ids[i]]
    }
}

/// Cross-view evaluation split of the test identities: probes from the
/// lowest view, gallery from the next. Probe order is shuffled by `seed`;
/// the gallery keeps dataset order, which fixes ranking tie-breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GalleryProbe {
    pub probes: Vec<usize>,
    pub gallery: Vec<usize>,
}

pub fn split_gallery_probe<T: Scalar>(ds: &Dataset<T>, seed: u64) -> Result<GalleryProbe> {
    let test = ds.indices(Split::Test);
    let mut views: Vec<usize> = test.iter().map(|&i| ds.views[i]).collect();
    views.sort_unstable();
    views.dedup();
    if views.len() < 2 {
        return Err(Error::Config(format!("cross-view matching needs two views, found {}", views.len())));
    }
    let (pv, gv) = (views[0], views[1]);
    let mut probes: Vec<usize> = test.iter().copied().filter(|&i| ds.views[i] == pv).collect();
    let gallery: Vec<usize> = test.iter().copied().filter(|&i| ds.views[i] == gv).collect();
    for &p in &probes {
        if !gallery.iter().any(|&g| ds.ids[g] == ds.ids[p]) {
            return Err(Error::Eval(format!("identity {} has no image in view {}", ds.ids[p], gv)));
        }
    }
    probes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(GalleryProbe { probes, gallery })
}

/// Colour rule used to validate the renderer: chromaticity of the mean torso
/// centre, matched to the nearest palette entry.
pub fn color_oracle<T: Scalar>(images: &Tensor<T>, i: usize, colors: usize) -> usize {
    let mut mean = [0.0; 3];
    let mut count = 0.0;
    for (ch, m) in mean.iter_mut().enumerate() {
        for row in 13..16 {
            for col in 6..10 {
                *m += images.at(&[i, ch, row, col]).as_f64();
            }
        }
    }
    count += 12.0;
    let chroma = |c: [f64; 3]| {
        let s = c[0] + c[1] + c[2];
        [c[0] / s, c[1] / s, c[2] / s]
    };
    let seen = chroma(mean.map(|v| v / count));
    let dist = |k: usize| {
        let p = chroma(PALETTE[k]);
        (0..3).map(|c| (p[c] - seen[c]).powi(2)).sum::<f64>()
    };
    (0..colors).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("at least two colours")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_ds() -> Dataset<f64> {
        generate(&DataConfig::default()).unwrap()
    }

    #[test]
    fn counts() {
        let cfg = DataConfig { train_ids: 32, test_ids: 0, imgs_per_view: 4, ..DataConfig::default() };
        let ds: Dataset<f64> = generate(&cfg).unwrap();
        assert_eq!(ds.len(), 256);
        assert_eq!(ds.images.shape(), &[256, 3, 32, 16]);
        let mut rows = ds.attributes.clone();
        rows.sort_unstable();
        rows.dedup();
        assert_eq!(rows.len(), 32);
        let full = default_ds();
        assert_eq!(full.len(), 48 * 16);
        assert_eq!(full.num_classes(), 32);
    }

    #[test]
    fn deterministic() {
        assert_eq!(default_ds(), default_ds());
        let other: Dataset<f64> = generate(&DataConfig { seed: 1, ..DataConfig::default() }).unwrap();
        assert_ne!(other.images, default_ds().images);
    }

    #[test]
    fn capacity_is_enforced() {
        let cfg = DataConfig { train_ids: 40, test_ids: 9, ..DataConfig::default() };
        assert!(matches!(generate::<f64>(&cfg), Err(Error::Capacity(_))));
    }

    #[test]
    fn pixels_are_quantised_and_bounded() {
        let ds = default_ds();
        for &v in ds.images.data() {
            assert!((0.0..=1.0).contains(&v));
            let q = v * 255.0;
            assert_eq!(q, q.round());
        }
    }

    #[test]
    fn splits_are_identity_disjoint() {
        let ds = default_ds();
        let train: Vec<usize> = ds.indices(Split::Train).iter().map(|&i| ds.ids[i]).collect();
        let test: Vec<usize> = ds.indices(Split::Test).iter().map(|&i| ds.ids[i]).collect();
        assert!(train.iter().all(|t| !test.contains(t)));
        let (x, y) = ds.train_set().unwrap();
        assert_eq!(x.shape()[0], 512);
        assert!(y.iter().all(|&l| l < 32));
    }

    #[test]
    fn colour_factor_is_recoverable() {
        let ds = default_ds();
        let hits = (0..ds.len()).filter(|&i| color_oracle(&ds.images, i, 4) == ds.image_attributes(i)[0]).count();
        let acc = hits as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "colour rule accuracy {}", acc);
    }

    #[test]
    fn gallery_probe_protocol() {
        let ds = default_ds();
        let gp = split_gallery_probe(&ds, 3).unwrap();
        assert_eq!(gp.probes.len(), gp.gallery.len());
        assert_eq!(gp.probes.len(), 16 * 8);
        assert!(gp.probes.iter().all(|&p| ds.views[p] == 0));
        assert!(gp.gallery.iter().all(|&g| ds.views[g] == 1));
        assert!(gp.probes.iter().all(|p| !gp.gallery.contains(p)));
        let single: Dataset<f64> = generate(&DataConfig { views: 1, ..DataConfig::default() }).unwrap();
        assert!(split_gallery_probe(&single, 0).is_err());
    }

    #[test]
    fn decode_covers_the_space() {
        let spec = FactorSpec::default();
        let mut all: Vec<[usize; 4]> = (0..spec.identity_space()).map(|k| spec.decode(k)).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 48);
    }
}
