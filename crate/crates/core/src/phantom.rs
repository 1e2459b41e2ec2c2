//! Synthetic ultrasound-like prostate volumes for desk-scale experiments.
//!
//! Each case is a smooth ellipsoid with low-order angular bumps inside a
//! fan- or sector-shaped field of view, with textured background,
//! multiplicative speckle, a bright capsule rim, optional acoustic shadow
//! wedges and a gamma curve. The mask is the exact analytic interior.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::gaussian_blur;
use crate::error::{Error, Result};
use crate::volume::{Case, Dataset, MaskVolume, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// Apex above the image, beam opening downwards (end-fire-like).
    Fan,
    /// Apex below the image, wide beam opening upwards (side-fire-like).
    Sector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomDomainSpec {
    pub name: String,
    pub geometry: Geometry,
    /// `(depth, height, width)` in voxels.
    pub dims: [usize; 3],
    /// Semi-axis ranges `[min, max]` in voxels along z, y, x.
    pub semi_axes: [[f64; 2]; 3],
    /// Relative amplitude of the angular bumps.
    pub bump_amplitude: f64,
    pub gland_intensity: f64,
    pub background_intensity: f64,
    pub rim_intensity: f64,
    pub gamma: f64,
    pub speckle: f64,
    pub shadow_prob: f64,
    /// Angular width of a shadow wedge in degrees.
    pub shadow_width_deg: f64,
    /// Gaussian sigma (voxels) of the background texture.
    pub texture_scale: f64,
    pub texture_strength: f64,
    pub spacing_mm: f64,
}

impl PhantomDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("phantom spec {}: {m}", self.name)));
        if self.dims.iter().any(|&d| d < 4) {
            return fail(format!("dims too small: {:?}", self.dims));
        }
        for (i, r) in self.semi_axes.iter().enumerate() {
            let limit = self.dims[i] as f64 / 2.0;
            if !(r[0] > 0.0 && r[0] <= r[1]) || r[1] * (1.0 + self.bump_amplitude) >= limit {
                return fail(format!("semi-axis range {r:?} invalid for dimension {}", self.dims[i]));
            }
        }
        for p in [self.shadow_prob] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("probability {p} outside [0, 1]"));
            }
        }
        if !(self.gamma > 0.0 && self.spacing_mm > 0.0 && self.texture_scale > 0.0) {
            return fail("gamma, spacing and texture scale must be positive".into());
        }
        if !(0.0..0.5).contains(&self.bump_amplitude) {
            return fail(format!("bump amplitude {} outside [0, 0.5)", self.bump_amplitude));
        }
        Ok(())
    }

    pub fn spacing(&self) -> Spacing {
        Spacing::isotropic(self.spacing_mm)
    }

    /// Same domain at reduced size: dims and semi-axes scaled per axis.
    pub fn resized(&self, dims: [usize; 3]) -> Self {
        let mut s = self.clone();
        for i in 0..3 {
            let f = dims[i] as f64 / self.dims[i] as f64;
            s.semi_axes[i] = [self.semi_axes[i][0] * f, self.semi_axes[i][1] * f];
        }
        s.texture_scale = self.texture_scale * dims[2] as f64 / self.dims[2] as f64;
        s.dims = dims;
        s
    }

    /// 16 × 64 × 80 variant used by the quick experiments.
    pub fn desk(&self) -> Self {
        self.resized([16, 64, 80])
    }
}

/// Presets A, B, C: A and B share fan geometry with a mild intensity shift,
/// C uses sector geometry with inverted gland contrast.
pub fn default_domains() -> (PhantomDomainSpec, PhantomDomainSpec, PhantomDomainSpec) {
    let a = PhantomDomainSpec {
        name: "A".into(),
        geometry: Geometry::Fan,
        dims: [64, 128, 160],
        semi_axes: [[18.0, 24.0], [26.0, 34.0], [34.0, 44.0]],
        bump_amplitude: 0.12,
        gland_intensity: 0.25,
        background_intensity: 0.55,
        rim_intensity: 0.85,
        gamma: 1.0,
        speckle: 0.35,
        shadow_prob: 0.2,
        shadow_width_deg: 6.0,
        texture_scale: 4.0,
        texture_strength: 0.25,
        spacing_mm: 0.25,
    };
    let b = PhantomDomainSpec {
        name: "B".into(),
        gland_intensity: 0.28,
        background_intensity: 0.5,
        gamma: 1.15,
        speckle: 0.4,
        ..a.clone()
    };
    let c = PhantomDomainSpec {
        name: "C".into(),
        geometry: Geometry::Sector,
        gland_intensity: 0.7,
        background_intensity: 0.3,
        rim_intensity: 0.45,
        gamma: 0.6,
        speckle: 0.6,
        shadow_prob: 0.5,
        shadow_width_deg: 10.0,
        texture_scale: 2.0,
        texture_strength: 0.4,
        ..a.clone()
    };
    (a, b, c)
}

pub fn domain_by_name(name: &str) -> Result<PhantomDomainSpec> {
    let (a, b, c) = default_domains();
    match name.to_ascii_uppercase().as_str() {
        "A" => Ok(a),
        "B" => Ok(b),
        "C" => Ok(c),
        _ => Err(Error::Config(format!("unknown phantom domain {name:?}, expected A, B or C"))),
    }
}

/// Angular harmonic `amp · cos(order · θ + phase)` on the in-plane azimuth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amp: f64,
    pub order: f64,
    pub phase: f64,
}

/// Analytic gland shape in voxel coordinates `(z, y, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProstateShape {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// In-plane rotation in radians.
    pub rotation: f64,
    pub harmonics: Vec<Harmonic>,
    /// Coefficient of the elevation (z) term of the radius.
    pub tilt: f64,
}

impl ProstateShape {
    /// Normalized radius and boundary radius of a point.
    fn radii(&self, z: f64, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let dz = z - self.center[0];
        let dy = y - self.center[1];
        let dx = x - self.center[2];
        let u = (c * dx + s * dy) / self.semi_axes[2];
        let v = (-s * dx + c * dy) / self.semi_axes[1];
        let w = dz / self.semi_axes[0];
        let rho = (u * u + v * v + w * w).sqrt();
        if rho == 0.0 {
            return (0.0, 1.0);
        }
        let planar = (u * u + v * v).sqrt() / rho;
        let theta = v.atan2(u);
        let mut r = 1.0 + self.tilt * w / rho;
        for h in &self.harmonics {
            r += planar * h.amp * (h.order * theta + h.phase).cos();
        }
        (rho, r)
    }

    pub fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let (rho, r) = self.radii(z, y, x);
        rho < r
    }

    /// Signed normalized distance to the boundary (negative inside).
    pub fn boundary_offset(&self, z: f64, y: f64, x: f64) -> f64 {
        let (rho, r) = self.radii(z, y, x);
        rho - r
    }

    pub fn mask(&self, dims: [usize; 3]) -> MaskVolume {
        let labels = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(z, y, x)| {
            u8::from(self.contains(z as f64, y as f64, x as f64))
        });
        MaskVolume { labels }
    }

    /// Largest extent factor of the bumped surface relative to the ellipsoid.
    fn max_radius(&self) -> f64 {
        1.0 + self.tilt.abs() + self.harmonics.iter().map(|h| h.amp.abs()).sum::<f64>()
    }
}

/// Beam geometry of one slice plane: apex position, opening angle and radial range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOfView {
    pub apex: [f64; 2],
    /// Beam axis direction: +1 opens downwards, -1 upwards.
    pub direction: f64,
    pub half_angle: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl FieldOfView {
    pub fn for_geometry(g: Geometry, h: usize, w: usize) -> Self {
        let (h, w) = (h as f64, w as f64);
        match g {
            Geometry::Fan => Self {
                apex: [-0.3 * h, (w - 1.0) / 2.0],
                direction: 1.0,
                half_angle: 40f64.to_radians(),
                r_min: 0.35 * h,
                r_max: 1.28 * h,
            },
            Geometry::Sector => Self {
                apex: [1.05 * h, (w - 1.0) / 2.0],
                direction: -1.0,
                half_angle: 65f64.to_radians(),
                r_min: 0.12 * h,
                r_max: 1.02 * h,
            },
        }
    }

    /// `(radius, angle from beam axis)` of an in-plane point.
    pub fn polar(&self, y: f64, x: f64) -> (f64, f64) {
        let dy = (y - self.apex[0]) * self.direction;
        let dx = x - self.apex[1];
        ((dy * dy + dx * dx).sqrt(), dx.atan2(dy))
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (r, a) = self.polar(y, x);
        r >= self.r_min && r <= self.r_max && a.abs() <= self.half_angle
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Seeds are mixed with the domain name so domains never share draws.
fn case_rng(name: &str, seed: u64, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.set_stream(index);
    rng
}

/// Shape of case `index`; the same draw [`generate_case`] uses.
pub fn sample_shape(spec: &PhantomDomainSpec, seed: u64, index: u64) -> Result<ProstateShape> {
    spec.validate()?;
    let mut rng = case_rng(&spec.name, seed, index);
    draw_shape(spec, &mut rng)
}

fn draw_shape(spec: &PhantomDomainSpec, rng: &mut ChaCha8Rng) -> Result<ProstateShape> {
    let [d, h, w] = spec.dims;
    let fov = FieldOfView::for_geometry(spec.geometry, h, w);
    for _ in 0..200 {
        let semi_axes = [
            uniform(rng, spec.semi_axes[0]),
            uniform(rng, spec.semi_axes[1]),
            uniform(rng, spec.semi_axes[2]),
        ];
        let a = spec.bump_amplitude;
        let harmonics = (2..=4)
            .map(|order| Harmonic {
                amp: a * rng.random_range(0.2..1.0) / (order as f64 - 1.0),
                order: order as f64,
                phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect();
        let shape = ProstateShape {
            center: [
                (d as f64 - 1.0) / 2.0 + rng.random_range(-0.05..0.05) * d as f64,
                (h as f64 - 1.0) / 2.0 + rng.random_range(-0.08..0.08) * h as f64,
                (w as f64 - 1.0) / 2.0 + rng.random_range(-0.08..0.08) * w as f64,
            ],
            semi_axes,
            rotation: rng.random_range(-0.3..0.3),
            harmonics,
            tilt: a * rng.random_range(-0.5..0.5),
        };
        if shape_fits(&shape, spec.dims, &fov) {
            return Ok(shape);
        }
    }
    Err(Error::Config(format!(
        "phantom spec {}: could not place the gland inside the field of view",
        spec.name
    )))
}

/// The bounding ellipse of the gland must lie inside the volume and the beam.
fn shape_fits(s: &ProstateShape, dims: [usize; 3], fov: &FieldOfView) -> bool {
    let m = s.max_radius();
    let bound = s.semi_axes.iter().map(|a| a * m).fold(0.0, f64::max);
    let ext_z = s.semi_axes[0] * m;
    if s.center[0] - ext_z < 0.0 || s.center[0] + ext_z > dims[0] as f64 - 1.0 {
        return false;
    }
    let (sn, cs) = s.rotation.sin_cos();
    let (ay, ax) = (s.semi_axes[1] * m, s.semi_axes[2] * m);
    let n = 64;
    (0..n).all(|k| {
        let t = 2.0 * PI * k as f64 / n as f64;
        let (u, v) = (ax * t.cos(), ay * t.sin());
        let x = s.center[2] + cs * u - sn * v;
        let y = s.center[1] + sn * u + cs * v;
        y >= 0.0 && x >= 0.0 && y <= dims[1] as f64 - 1.0 && x <= dims[2] as f64 - 1.0 && fov.contains(y, x)
    }) && bound > 0.0
        && fov.contains(s.center[1], s.center[2])
}

fn smooth_noise(d: usize, h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut out = Array3::zeros((d, h, w));
    for z in 0..d {
        let raw = Array2::from_shape_fn((h, w), |_| StandardNormal.sample(rng));
        let b = gaussian_blur(&raw, sigma);
        // rescale to unit variance
        let var = b.iter().map(|v| v * v).sum::<f64>() / b.len() as f64;
        let k = if var > 0.0 { var.sqrt().recip() } else { 0.0 };
        out.index_axis_mut(ndarray::Axis(0), z).assign(&(b * k));
    }
    if d > 1 {
        let src = out.clone();
        for z in 0..d {
            let lo = z.saturating_sub(1);
            let hi = (z + 1).min(d - 1);
            let mut plane = src.index_axis(ndarray::Axis(0), z).to_owned() * 0.5;
            plane.scaled_add(0.25, &src.index_axis(ndarray::Axis(0), lo));
            plane.scaled_add(0.25, &src.index_axis(ndarray::Axis(0), hi));
            out.index_axis_mut(ndarray::Axis(0), z).assign(&plane);
        }
    }
    out
}

/// Generates case `index` of a domain, returning it with its analytic shape.
pub fn generate_case(spec: &PhantomDomainSpec, seed: u64, index: u64) -> Result<(Case, ProstateShape)> {
    spec.validate()?;
    let mut rng = case_rng(&spec.name, seed, index);
    let shape = draw_shape(spec, &mut rng)?;
    let [d, h, w] = spec.dims;
    let fov = FieldOfView::for_geometry(spec.geometry, h, w);

    let texture = smooth_noise(d, h, w, spec.texture_scale, &mut rng);
    let speckle = smooth_noise(d, h, w, 0.8, &mut rng);

    let mut shadows = Vec::new();
    if rng.random_bool(spec.shadow_prob) {
        // wedge aimed at a point on the gland boundary so it crosses it
        let t = rng.random_range(0.0..2.0 * PI);
        let by = shape.center[1] + shape.semi_axes[1] * t.sin();
        let bx = shape.center[2] + shape.semi_axes[2] * t.cos();
        let (r, a) = fov.polar(by, bx);
        shadows.push((a, spec.shadow_width_deg.to_radians() / 2.0, r * 0.9));
    }
    let rim_width = 0.08;

    let mut voxels = Array3::<f32>::zeros((d, h, w));
    for ((z, y, x), v) in voxels.indexed_iter_mut() {
        let (yf, xf) = (y as f64, x as f64);
        if !fov.contains(yf, xf) {
            continue;
        }
        let off = shape.boundary_offset(z as f64, yf, xf);
        let mut i = if off < 0.0 { spec.gland_intensity } else { spec.background_intensity };
        if off.abs() < rim_width {
            let t = 1.0 - off.abs() / rim_width;
            i += (spec.rim_intensity - i) * t * t;
        }
        i *= 1.0 + spec.texture_strength * texture[[z, y, x]];
        let (r, a) = fov.polar(yf, xf);
        i *= 1.0 - 0.35 * (r - fov.r_min) / (fov.r_max - fov.r_min);
        for &(sa, half, start) in &shadows {
            if (a - sa).abs() < half && r > start {
                i *= 0.3;
            }
        }
        i *= (1.0 + spec.speckle * speckle[[z, y, x]]).max(0.0);
        *v = i.clamp(0.0, 1.0).powf(spec.gamma) as f32;
    }
    let volume = Volume::new(voxels, spec.spacing())?;
    let mask = shape.mask(spec.dims);
    let case = Case::new(format!("{}_{seed}_{index:03}", spec.name), volume, mask)?;
    Ok((case, shape))
}

/// `n` cases, each fully determined by `(spec, seed, index)`.
pub fn generate_domain(spec: &PhantomDomainSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("phantom count must be >= 1".into()));
    }
    let items = (0..n as u64)
        .map(|i| generate_case(spec, seed, i).map(|c| c.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(items, spec.name.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(spec: &PhantomDomainSpec) -> PhantomDomainSpec {
        spec.resized([8, 32, 40])
    }

    #[test]
    fn presets() {
        let (a, b, c) = default_domains();
        assert_ne!(a.geometry, c.geometry);
        assert_eq!(a.geometry, b.geometry);
        for s in [&a, &b, &c] {
            assert_eq!(s.spacing_mm, 0.25);
            s.validate().unwrap();
            s.desk().validate().unwrap();
        }
        assert_eq!(a.desk().dims, [16, 64, 80]);
        assert!(domain_by_name("d").is_err());
    }

    #[test]
    fn deterministic_and_in_range() {
        let (a, _, c) = default_domains();
        for s in [tiny(&a), tiny(&c)] {
            let d1 = generate_domain(&s, 3, 11).unwrap();
            let d2 = generate_domain(&s, 3, 11).unwrap();
            assert_eq!(d1, d2);
            let d3 = generate_domain(&s, 3, 12).unwrap();
            assert_ne!(d1.items[0].volume.voxels, d3.items[0].volume.voxels);
            for case in &d1.items {
                assert!(case.volume.voxels.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn masks_nonempty_and_inside_fov() {
        let (a, b, c) = default_domains();
        for s in [a.desk(), b.desk(), c.desk()] {
            let fov = FieldOfView::for_geometry(s.geometry, s.dims[1], s.dims[2]);
            let ds = generate_domain(&s, 4, 3).unwrap();
            for case in &ds.items {
                assert!(!case.mask.is_empty());
                for ((_, y, x), &l) in case.mask.labels.indexed_iter() {
                    if l != 0 {
                        assert!(fov.contains(y as f64, x as f64));
                    }
                }
            }
        }
    }

    #[test]
    fn bump_free_shape_is_plain_ellipsoid() {
        let s = ProstateShape {
            center: [3.5, 10.0, 12.0],
            semi_axes: [3.0, 6.0, 9.0],
            rotation: 0.0,
            harmonics: vec![],
            tilt: 0.0,
        };
        let m = s.mask([8, 20, 24]);
        for ((z, y, x), &l) in m.labels.indexed_iter() {
            let q = ((z as f64 - 3.5) / 3.0).powi(2) + ((y as f64 - 10.0) / 6.0).powi(2) + ((x as f64 - 12.0) / 9.0).powi(2);
            assert_eq!(l == 1, q < 1.0);
        }
    }

    #[test]
    fn sample_shape_matches_generated_case() {
        let (a, _, _) = default_domains();
        let s = tiny(&a);
        let (case, shape) = generate_case(&s, 5, 2).unwrap();
        assert_eq!(sample_shape(&s, 5, 2).unwrap(), shape);
        assert_eq!(case.mask, shape.mask(s.dims));
    }

    #[test]
    fn degenerate_spec_rejected() {
        let (mut a, _, _) = default_domains();
        a.semi_axes[0] = [10.0, 40.0];
        assert!(generate_domain(&a, 1, 0).is_err());
        assert!(generate_domain(&default_domains().0, 0, 0).is_err());
    }
}
