//! Online augmentation of `(SliceStack, mask)` pairs.
//!
//! A single backward coordinate map (flip, scale about the centre, elastic
//! displacement) is built per sample and applied to every channel of the
//! stack bilinearly and to the mask by nearest neighbour. Gaussian noise then
//! perturbs the image only.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::SliceStack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub scale_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    /// Displacement strength as a fraction of image width; `None` disables
    /// elastic deformation.
    pub elastic_alpha_range: Option<[f64; 2]>,
    /// Gaussian smoothing of the displacement field as a fraction of image width.
    pub elastic_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            scale_range: [0.8, 1.2],
            noise_sigma_range: [0.0, 0.3],
            elastic_alpha_range: Some([0.35, 0.5]),
            elastic_sigma: 0.25,
            seed: 0,
        }
    }
}

fn ordered(r: [f64; 2]) -> [f64; 2] {
    if r[0] <= r[1] {
        r
    } else {
        [r[1], r[0]]
    }
}

impl AugmentConfig {
    /// Configuration under which [`augment`] is the identity.
    pub fn identity() -> Self {
        Self {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            scale_range: [1.0, 1.0],
            noise_sigma_range: [0.0, 0.0],
            elastic_alpha_range: None,
            elastic_sigma: 0.25,
            seed: 0,
        }
    }

    /// Validates probabilities and puts every range in ascending order.
    pub fn canonical(&self) -> Result<Self> {
        for p in [self.flip_h_prob, self.flip_v_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        let scale = ordered(self.scale_range);
        if scale[0] <= 0.0 {
            return Err(Error::Config(format!("scale range must be positive: {scale:?}")));
        }
        let noise = ordered(self.noise_sigma_range);
        if noise[0] < 0.0 {
            return Err(Error::Config(format!("noise sigma must be >= 0: {noise:?}")));
        }
        if self.elastic_sigma <= 0.0 {
            return Err(Error::Config("elastic_sigma must be > 0".into()));
        }
        Ok(Self {
            scale_range: scale,
            noise_sigma_range: noise,
            elastic_alpha_range: self.elastic_alpha_range.map(ordered),
            ..self.clone()
        })
    }
}

/// Generator keyed by `(seed, sample index)`: the index selects the ChaCha
/// stream, so samples can be produced in any order or in parallel.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Per-sample transform parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale: f64,
    pub noise_sigma: f64,
    /// Backward displacement field `(dy, dx)` in pixels, if any.
    pub displacement: Option<(Array2<f64>, Array2<f64>)>,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            scale: 1.0,
            noise_sigma: 0.0,
            displacement: None,
        }
    }

    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let uniform = |rng: &mut dyn rand::RngCore, r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..=r[1])
            }
        };
        let flip_h = rng.random_bool(cfg.flip_h_prob);
        let flip_v = rng.random_bool(cfg.flip_v_prob);
        let scale = uniform(rng, cfg.scale_range);
        let noise_sigma = uniform(rng, cfg.noise_sigma_range);
        let displacement = cfg.elastic_alpha_range.map(|r| {
            let alpha = uniform(rng, r) * w as f64;
            let sigma = cfg.elastic_sigma * w as f64;
            let mut field = || {
                let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..=1.0));
                gaussian_blur(&raw, sigma).mapv(|v| v * alpha)
            };
            let dy = field();
            let dx = field();
            (dy, dx)
        });
        Self {
            flip_h,
            flip_v,
            scale,
            noise_sigma,
            displacement,
        }
    }

    /// Source coordinate for output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (mut sy, mut sx) = (y as f64, x as f64);
        if let Some((dy, dx)) = &self.displacement {
            sy += dy[[y, x]];
            sx += dx[[y, x]];
        }
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        sy = cy + (sy - cy) / self.scale;
        sx = cx + (sx - cx) / self.scale;
        if self.flip_v {
            sy = h as f64 - 1.0 - sy;
        }
        if self.flip_h {
            sx = w as f64 - 1.0 - sx;
        }
        (sy, sx)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflected borders.
pub(crate) fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut i = i.rem_euclid(period);
        if i >= n {
            i = period - i;
        }
        i as usize
    };
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * img[[y, reflect(x as isize + j as isize - r, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * tmp[[reflect(y as isize + j as isize - r, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn sample_bilinear_zero(img: &ndarray::ArrayView2<'_, f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[[yy as usize, xx as usize]]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bot = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Apply a sampled transform. Integer-aligned identity mappings copy exactly.
pub fn apply(
    x: &SliceStack,
    y: &Array2<u8>,
    t: &Transform,
    rng: &mut impl Rng,
) -> Result<(SliceStack, Array2<u8>)> {
    let (c, h, w) = x.channels.dim();
    if y.dim() != (h, w) {
        return Err(Error::Shape(format!("stack {h}x{w} vs mask {:?}", y.dim())));
    }
    let coords: Vec<(f64, f64)> = (0..h * w).map(|i| t.source(i / w, i % w, h, w)).collect();
    let mut channels = Array3::zeros((c, h, w));
    for (k, src) in x.channels.outer_iter().enumerate() {
        let mut dst = channels.index_axis_mut(Axis(0), k);
        for (i, &(sy, sx)) in coords.iter().enumerate() {
            dst[[i / w, i % w]] = sample_bilinear_zero(&src, sy, sx);
        }
    }
    let mask = Array2::from_shape_fn((h, w), |(yy, xx)| {
        let (sy, sx) = coords[yy * w + xx];
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
            0
        } else {
            y[[ry as usize, rx as usize]]
        }
    });
    if t.noise_sigma > 0.0 {
        let n = Normal::new(0.0, t.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in channels.iter_mut() {
            *v += n.sample(rng) as f32;
        }
    }
    channels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok((
        SliceStack {
            channels,
            center_index: x.center_index,
        },
        mask,
    ))
}

/// Augment sample `index` under `cfg`; deterministic in `(cfg.seed, index, input)`.
pub fn augment(x: &SliceStack, y: &Array2<u8>, cfg: &AugmentConfig, index: u64) -> Result<(SliceStack, Array2<u8>)> {
    let cfg = cfg.canonical()?;
    let mut rng = sample_rng(cfg.seed, index);
    let t = Transform::sample(&cfg, x.height(), x.width(), &mut rng);
    apply(x, y, &t, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_pair() -> (SliceStack, Array2<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let channels = Array3::from_shape_fn((3, 24, 32), |_| rng.random_range(0.0..1.0f32));
        let mask = Array2::from_shape_fn((24, 32), |(y, x)| u8::from((6..18).contains(&y) && (8..20).contains(&x)));
        (SliceStack { channels, center_index: 2 }, mask)
    }

    #[test]
    fn identity_config_is_noop() {
        let (x, y) = sample_pair();
        let (x2, y2) = augment(&x, &y, &AugmentConfig::identity(), 9).unwrap();
        assert_eq!(x2, x);
        assert_eq!(y2, y);
    }

    #[test]
    fn double_horizontal_flip_restores_input() {
        let (x, y) = sample_pair();
        let t = Transform {
            flip_h: true,
            ..Transform::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x1, y1) = apply(&x, &y, &t, &mut rng).unwrap();
        assert_ne!(x1, x);
        let (x2, y2) = apply(&x1, &y1, &t, &mut rng).unwrap();
        assert_eq!(x2, x);
        assert_eq!(y2, y);
    }

    #[test]
    fn mask_stays_binary_and_noise_leaves_it_alone() {
        let (x, y) = sample_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AugmentConfig::default();
        let mut t = Transform::sample(&cfg.canonical().unwrap(), 24, 32, &mut rng);
        t.scale = 1.1;
        t.noise_sigma = 0.0;
        let (_, m1) = apply(&x, &y, &t, &mut rng).unwrap();
        assert!(m1.iter().all(|&v| v <= 1));
        t.noise_sigma = 0.3;
        let (xn, m2) = apply(&x, &y, &t, &mut rng).unwrap();
        assert_eq!(m1, m2);
        assert!(xn.channels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn reproducible_per_index() {
        let (x, y) = sample_pair();
        let cfg = AugmentConfig { seed: 77, ..AugmentConfig::default() };
        let a = augment(&x, &y, &cfg, 3).unwrap();
        let b = augment(&x, &y, &cfg, 3).unwrap();
        let c = augment(&x, &y, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn channels_share_geometry() {
        // identical channels stay identical without noise
        let (x, y) = sample_pair();
        let plane = x.channels.index_axis(Axis(0), 0).to_owned();
        let mut same = x.clone();
        for mut c in same.channels.outer_iter_mut() {
            c.assign(&plane);
        }
        let cfg = AugmentConfig {
            noise_sigma_range: [0.0, 0.0],
            ..AugmentConfig::default()
        };
        let (out, _) = augment(&same, &y, &cfg, 5).unwrap();
        let c0 = out.channels.index_axis(Axis(0), 0);
        for c in out.channels.outer_iter() {
            assert_eq!(c, c0);
        }
    }

    #[test]
    fn reversed_ranges_are_canonicalised() {
        let cfg = AugmentConfig {
            elastic_alpha_range: Some([0.5, 0.35]),
            ..AugmentConfig::default()
        };
        assert_eq!(cfg.canonical().unwrap().elastic_alpha_range, Some([0.35, 0.5]));
        let bad = AugmentConfig { flip_h_prob: 1.5, ..AugmentConfig::default() };
        assert!(bad.canonical().is_err());
    }
}
