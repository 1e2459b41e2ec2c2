//! Deterministic preprocessing: min-max normalisation, in-plane resampling,
//! aspect-preserving resize with zero padding, CLAHE and 2.5D stacking.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Case, MaskVolume, SliceStack, Spacing, Volume};

pub const TARGET_SPACING_MM: f64 = 0.25;
pub const NETWORK_HEIGHT: usize = 128;
pub const NETWORK_WIDTH: usize = 160;

/// Map voxels to `[0, 1]`; a constant volume maps to all zeros.
pub fn minmax_normalize(v: &Volume) -> Volume {
    let (lo, hi) = crate::volume::min_max(v.voxels.iter().copied());
    let range = hi - lo;
    let voxels = if range > 0.0 && range.is_finite() {
        v.voxels.mapv(|x| ((x - lo) / range).clamp(0.0, 1.0))
    } else {
        Array3::zeros(v.voxels.raw_dim())
    };
    Volume {
        voxels,
        spacing: v.spacing,
        intensity_range: v.intensity_range,
    }
}

/// Bilinear sample with edge clamping at fractional `(y, x)`.
fn bilinear_at(img: &ArrayView2<'_, f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// How output pixel indices map back into the source grid.
#[derive(Clone, Copy, Debug)]
enum GridMap {
    /// Physical resampling with a shared origin at pixel 0: `src = dst * ratio`.
    Origin,
    /// Image resize with aligned pixel areas: `src = (dst + 0.5) * ratio - 0.5`.
    HalfPixel,
}

fn src_coord(dst: usize, ratio: f64, map: GridMap) -> f64 {
    match map {
        GridMap::Origin => dst as f64 * ratio,
        GridMap::HalfPixel => (dst as f64 + 0.5) * ratio - 0.5,
    }
}

fn resize_bilinear(img: &ArrayView2<'_, f32>, oh: usize, ow: usize, ry: f64, rx: f64, map: GridMap) -> Array2<f32> {
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        bilinear_at(img, src_coord(y, ry, map), src_coord(x, rx, map))
    })
}

fn resize_nearest(img: &ArrayView2<'_, u8>, oh: usize, ow: usize, ry: f64, rx: f64, map: GridMap) -> Array2<u8> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = src_coord(y, ry, map).round().clamp(0.0, (h - 1) as f64) as usize;
        let sx = src_coord(x, rx, map).round().clamp(0.0, (w - 1) as f64) as usize;
        img[[sy, sx]]
    })
}

fn resampled_dims(v_dims: (usize, usize), spacing: &Spacing, target: f64) -> (usize, usize) {
    let h = ((v_dims.0 as f64 * spacing.y / target).round() as usize).max(1);
    let w = ((v_dims.1 as f64 * spacing.x / target).round() as usize).max(1);
    (h, w)
}

/// Bilinearly resample each axial slice to `target` mm in-plane; z untouched.
pub fn resample_inplane(v: &Volume, target: f64) -> Result<Volume> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Invalid(format!("target spacing must be > 0, got {target}")));
    }
    let (d, h, w) = v.dims();
    let (oh, ow) = resampled_dims((h, w), &v.spacing, target);
    let (ry, rx) = (target / v.spacing.y, target / v.spacing.x);
    let mut out = Array3::zeros((d, oh, ow));
    for z in 0..d {
        let r = resize_bilinear(&v.slice(z), oh, ow, ry, rx, GridMap::Origin);
        out.index_axis_mut(Axis(0), z).assign(&r);
    }
    Ok(Volume {
        voxels: out,
        spacing: Spacing {
            z: v.spacing.z,
            y: target,
            x: target,
        },
        intensity_range: v.intensity_range,
    })
}

/// Nearest-neighbour counterpart of [`resample_inplane`] for masks.
pub fn resample_mask_inplane(m: &MaskVolume, spacing: &Spacing, target: f64) -> Result<MaskVolume> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Invalid(format!("target spacing must be > 0, got {target}")));
    }
    let (d, h, w) = m.dims();
    let (oh, ow) = resampled_dims((h, w), spacing, target);
    let (ry, rx) = (target / spacing.y, target / spacing.x);
    let mut out = Array3::zeros((d, oh, ow));
    for z in 0..d {
        let r = resize_nearest(&m.slice(z), oh, ow, ry, rx, GridMap::Origin);
        out.index_axis_mut(Axis(0), z).assign(&r);
    }
    Ok(MaskVolume { labels: out })
}

/// Placement of resized content inside the fixed network canvas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizeInfo {
    pub scale: f64,
    pub content_height: usize,
    pub content_width: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ResizeInfo {
    pub fn compute(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        let scale = (out_h as f64 / h as f64).min(out_w as f64 / w as f64);
        let ch = ((h as f64 * scale).round() as usize).clamp(1, out_h);
        let cw = ((w as f64 * scale).round() as usize).clamp(1, out_w);
        Self {
            scale,
            content_height: ch,
            content_width: cw,
            pad_top: (out_h - ch) / 2,
            pad_left: (out_w - cw) / 2,
        }
    }
}

/// Uniformly scale a slice to fit `out_h × out_w`, centred, zero padded.
pub fn resize_with_aspect_to(slice: &ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> (Array2<f32>, ResizeInfo) {
    let (h, w) = slice.dim();
    let info = ResizeInfo::compute(h, w, out_h, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    let content = if (info.content_height, info.content_width) == (h, w) {
        slice.to_owned()
    } else {
        let ry = h as f64 / info.content_height as f64;
        let rx = w as f64 / info.content_width as f64;
        resize_bilinear(slice, info.content_height, info.content_width, ry, rx, GridMap::HalfPixel)
    };
    out.slice_mut(s![
        info.pad_top..info.pad_top + info.content_height,
        info.pad_left..info.pad_left + info.content_width
    ])
    .assign(&content);
    (out, info)
}

/// [`resize_with_aspect_to`] at the network size of 128 × 160.
pub fn resize_with_aspect(slice: &ArrayView2<'_, f32>) -> (Array2<f32>, ResizeInfo) {
    resize_with_aspect_to(slice, NETWORK_HEIGHT, NETWORK_WIDTH)
}

/// Nearest-neighbour mask version of [`resize_with_aspect_to`].
pub fn resize_mask_with_aspect_to(slice: &ArrayView2<'_, u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = slice.dim();
    let info = ResizeInfo::compute(h, w, out_h, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    let ry = h as f64 / info.content_height as f64;
    let rx = w as f64 / info.content_width as f64;
    let content = resize_nearest(slice, info.content_height, info.content_width, ry, rx, GridMap::HalfPixel);
    out.slice_mut(s![
        info.pad_top..info.pad_top + info.content_height,
        info.pad_left..info.pad_left + info.content_width
    ])
    .assign(&content);
    out
}

const CLAHE_BINS: usize = 256;

/// Contrast-limited adaptive histogram equalisation on a `[0, 1]` slice.
///
/// The image is split into a `tiles_y × tiles_x` grid; each tile gets a
/// clipped-histogram equalisation lookup table (256 bins, clip at
/// `clip_limit × tile pixels`, excess spread evenly) and every pixel is
/// mapped through the bilinear blend of the four nearest tile tables.
/// When the grid is finer than the image, a single global tile is used.
pub fn clahe(slice: &ArrayView2<'_, f32>, tiles: (usize, usize), clip_limit: f64) -> Array2<f32> {
    let (h, w) = slice.dim();
    let (mut ty, mut tx) = (tiles.0.max(1), tiles.1.max(1));
    if ty > h || tx > w {
        ty = 1;
        tx = 1;
    }
    let bin_of = |v: f32| ((v.clamp(0.0, 1.0) * CLAHE_BINS as f32) as usize).min(CLAHE_BINS - 1);
    let bounds = |n: usize, t: usize, i: usize| (i * n / t, (i + 1) * n / t);

    let mut luts = vec![[0f32; CLAHE_BINS]; ty * tx];
    for iy in 0..ty {
        let (y0, y1) = bounds(h, ty, iy);
        for ix in 0..tx {
            let (x0, x1) = bounds(w, tx, ix);
            let mut hist = [0usize; CLAHE_BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin_of(slice[[y, x]])] += 1;
                }
            }
            let area = (y1 - y0) * (x1 - x0);
            luts[iy * tx + ix] = clipped_lut(&mut hist, area, clip_limit);
        }
    }

    // Tile centres for interpolation.
    let centers = |n: usize, t: usize| -> Vec<f64> {
        (0..t)
            .map(|i| {
                let (a, b) = bounds(n, t, i);
                (a + b) as f64 / 2.0 - 0.5
            })
            .collect()
    };
    let cy = centers(h, ty);
    let cx = centers(w, tx);
    let locate = |c: &[f64], p: f64| -> (usize, usize, f32) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        let last = c.len() - 1;
        if p >= c[last] {
            return (last, last, 0.0);
        }
        let i = c.partition_point(|&v| v <= p) - 1;
        let f = (p - c[i]) / (c[i + 1] - c[i]);
        (i, i + 1, f as f32)
    };

    Array2::from_shape_fn((h, w), |(y, x)| {
        let b = bin_of(slice[[y, x]]);
        let (ya, yb, fy) = locate(&cy, y as f64);
        let (xa, xb, fx) = locate(&cx, x as f64);
        let l = |iy: usize, ix: usize| luts[iy * tx + ix][b];
        let top = l(ya, xa) * (1.0 - fx) + l(ya, xb) * fx;
        let bot = l(yb, xa) * (1.0 - fx) + l(yb, xb) * fx;
        (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0)
    })
}

fn clipped_lut(hist: &mut [usize; CLAHE_BINS], area: usize, clip_limit: f64) -> [f32; CLAHE_BINS] {
    let mut lut = [0f32; CLAHE_BINS];
    if area == 0 {
        return lut;
    }
    if clip_limit > 0.0 {
        let limit = ((clip_limit * area as f64) as usize).max(1);
        let mut excess = 0usize;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let per_bin = excess / CLAHE_BINS;
        let mut rest = excess % CLAHE_BINS;
        for h in hist.iter_mut() {
            *h += per_bin;
        }
        // remainder spread at a regular stride so the total is preserved
        if rest > 0 {
            let step = (CLAHE_BINS / rest).max(1);
            let mut i = 0;
            while rest > 0 && i < CLAHE_BINS {
                hist[i] += 1;
                rest -= 1;
                i += step;
            }
        }
    }
    let total: usize = hist.iter().sum();
    let mut acc = 0usize;
    for (l, &h) in lut.iter_mut().zip(hist.iter()) {
        acc += h;
        *l = acc as f32 / total as f32;
    }
    lut
}

/// `c` slices centred on `index`, replicating the edge slice past either end.
pub fn extract_stack(v: &Volume, index: usize, c: usize) -> Result<SliceStack> {
    let (d, h, w) = v.dims();
    if c % 2 == 0 {
        return Err(Error::Invalid(format!("slice count must be odd, got {c}")));
    }
    if index >= d {
        return Err(Error::Invalid(format!("slice {index} out of range for depth {d}")));
    }
    let half = (c / 2) as isize;
    let mut channels = Array3::zeros((c, h, w));
    for (k, off) in (-half..=half).enumerate() {
        let src = (index as isize + off).clamp(0, d as isize - 1) as usize;
        channels.index_axis_mut(Axis(0), k).assign(&v.slice(src));
    }
    Ok(SliceStack {
        channels,
        center_index: index,
    })
}

/// Settings for the whole chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub spacing_mm: f64,
    pub out_height: usize,
    pub out_width: usize,
    pub clahe_tiles: usize,
    pub clahe_clip: f64,
    pub apply_clahe: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            spacing_mm: TARGET_SPACING_MM,
            out_height: NETWORK_HEIGHT,
            out_width: NETWORK_WIDTH,
            clahe_tiles: 4,
            clahe_clip: 0.01,
            apply_clahe: true,
        }
    }
}

/// Normalise → resample in-plane → aspect resize with zero pad → CLAHE,
/// with the mask following the same geometry through nearest neighbour.
pub fn preprocess_case(case: &Case, cfg: &PreprocessConfig) -> Result<(Case, ResizeInfo)> {
    let v = minmax_normalize(&case.volume);
    let v = resample_inplane(&v, cfg.spacing_mm)?;
    let m = resample_mask_inplane(&case.mask, &case.volume.spacing, cfg.spacing_mm)?;
    let (d, h, w) = v.dims();
    let info = ResizeInfo::compute(h, w, cfg.out_height, cfg.out_width);
    let mut vox = Array3::zeros((d, cfg.out_height, cfg.out_width));
    let mut lab = Array3::zeros((d, cfg.out_height, cfg.out_width));
    for z in 0..d {
        let (mut r, _) = resize_with_aspect_to(&v.slice(z), cfg.out_height, cfg.out_width);
        if cfg.apply_clahe {
            r = clahe(&r.view(), (cfg.clahe_tiles, cfg.clahe_tiles), cfg.clahe_clip);
        }
        vox.index_axis_mut(Axis(0), z).assign(&r);
        let mr = resize_mask_with_aspect_to(&m.slice(z), cfg.out_height, cfg.out_width);
        lab.index_axis_mut(Axis(0), z).assign(&mr);
    }
    let spacing = Spacing {
        z: v.spacing.z,
        y: v.spacing.y / info.scale,
        x: v.spacing.x / info.scale,
    };
    let volume = Volume {
        voxels: vox,
        spacing,
        intensity_range: case.volume.intensity_range,
    };
    Ok((Case::new(case.id.clone(), volume, MaskVolume { labels: lab })?, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vol(data: Array3<f32>, sp: f64) -> Volume {
        Volume::new(data, Spacing::isotropic(sp)).unwrap()
    }

    #[test]
    fn minmax_examples() {
        let v = vol(Array3::from_shape_fn((1, 16, 16), |(_, y, x)| (y * 16 + x) as f32), 1.0);
        let n = minmax_normalize(&v);
        assert_eq!(n.voxels[[0, 15, 15]], 1.0);
        assert_eq!(n.voxels[[0, 0, 0]], 0.0);
        assert!((n.voxels[[0, 0, 1]] - 1.0 / 255.0).abs() < 1e-7);

        let c = minmax_normalize(&vol(Array3::from_elem((2, 2, 2), 7.0), 1.0));
        assert!(c.voxels.iter().all(|&x| x == 0.0));

        let t = minmax_normalize(&vol(array![[[10.0f32, 30.0]]], 1.0));
        assert_eq!(t.voxels.as_slice().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn resample_doubles_dims_at_half_spacing() {
        let v = Volume::new(Array3::zeros((3, 100, 100)), Spacing::new(1.0, 0.5, 0.5).unwrap()).unwrap();
        let r = resample_inplane(&v, 0.25).unwrap();
        assert_eq!(r.dims(), (3, 200, 200));
        assert_eq!(r.spacing.z, 1.0);
        assert!(resample_inplane(&v, 0.0).is_err());
        assert!(resample_inplane(&v, -1.0).is_err());
    }

    #[test]
    fn resample_identity_at_target_spacing() {
        let v = vol(Array3::from_shape_fn((2, 5, 7), |(z, y, x)| (z + y * x) as f32 * 0.1), 0.25);
        let r = resample_inplane(&v, 0.25).unwrap();
        assert_eq!(r.dims(), v.dims());
        for (a, b) in r.voxels.iter().zip(v.voxels.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_midpoint_of_two_by_two() {
        let v = Volume::new(array![[[0.0f32, 0.0], [1.0, 1.0]]], Spacing::new(1.0, 0.5, 0.5).unwrap()).unwrap();
        let r = resample_inplane(&v, 0.25).unwrap();
        assert_eq!(r.dims(), (1, 4, 4));
        // output row 1 sits halfway between the two source rows
        for x in 0..4 {
            assert!((r.voxels[[0, 1, x]] - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn resize_cases() {
        let img = Array2::from_shape_fn((128, 160), |(y, x)| (y * x) as f32 / 20000.0);
        let (out, info) = resize_with_aspect(&img.view());
        assert_eq!(out, img);
        assert_eq!(info.scale, 1.0);

        let (out, info) = resize_with_aspect(&Array2::from_elem((256, 320), 1.0f32).view());
        assert_eq!(info.scale, 0.5);
        assert_eq!((info.pad_top, info.pad_left), (0, 0));
        assert!(out.iter().all(|&v| v == 1.0));

        let (out, info) = resize_with_aspect(&Array2::from_elem((256, 160), 1.0f32).view());
        assert_eq!(info.scale, 0.5);
        assert_eq!((info.content_height, info.content_width), (128, 80));
        assert_eq!(info.pad_left, 40);
        for y in 0..128 {
            for x in 0..160 {
                let inside = (40..120).contains(&x);
                assert_eq!(out[[y, x]], if inside { 1.0 } else { 0.0 }, "({y},{x})");
            }
        }
    }

    #[test]
    fn clahe_constant_and_range() {
        let flat = Array2::from_elem((32, 40), 0.3f32);
        let out = clahe(&flat.view(), (4, 4), 0.01);
        assert!(out.iter().all(|&v| (v - out[[0, 0]]).abs() < 1e-7));
    }

    fn entropy(img: &Array2<f32>) -> f64 {
        let mut hist = [0usize; 256];
        for &v in img.iter() {
            hist[((v * 256.0) as usize).min(255)] += 1;
        }
        let n = img.len() as f64;
        hist.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    }

    #[test]
    fn clahe_increases_entropy_of_two_level_image() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let img = Array2::from_shape_fn((64, 80), |(y, _)| {
            let p = if y < 32 { 0.8 } else { 0.3 };
            if rng.random_bool(p) { 0.45f32 } else { 0.55 }
        });
        let out = clahe(&img.view(), (4, 4), 0.01);
        assert!(entropy(&out) >= entropy(&img), "{} < {}", entropy(&out), entropy(&img));
    }

    #[test]
    fn clahe_falls_back_to_global_for_tiny_images() {
        let img = array![[0.1f32, 0.9], [0.5, 0.2]];
        let out = clahe(&img.view(), (4, 4), 0.01);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        // global equalisation keeps the order of intensities
        assert!(out[[0, 1]] > out[[1, 0]] && out[[1, 0]] > out[[1, 1]] && out[[1, 1]] > out[[0, 0]]);
    }

    #[test]
    fn stack_indices() {
        let v = vol(Array3::from_shape_fn((10, 2, 2), |(z, _, _)| z as f32), 1.0);
        let centre = |s: &SliceStack| -> Vec<f32> { s.channels.outer_iter().map(|c| c[[0, 0]]).collect() };
        assert_eq!(centre(&extract_stack(&v, 5, 3).unwrap()), vec![4.0, 5.0, 6.0]);
        assert_eq!(centre(&extract_stack(&v, 0, 3).unwrap()), vec![0.0, 0.0, 1.0]);
        assert_eq!(centre(&extract_stack(&v, 9, 5).unwrap()), vec![7.0, 8.0, 9.0, 9.0, 9.0]);
        let one = extract_stack(&v, 3, 1).unwrap();
        assert_eq!(one.channels.index_axis(Axis(0), 0), v.slice(3));
        assert!(extract_stack(&v, 3, 2).is_err());
        assert!(extract_stack(&v, 10, 3).is_err());
    }
}
