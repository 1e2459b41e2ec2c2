//! Boundary extraction and exact anisotropic Euclidean distance transforms.

use ndarray::Array3;

use crate::volume::{MaskVolume, Spacing};

/// Foreground voxels with at least one background 6-neighbour. Voxels on the
/// volume border count as boundary (outside is background).
pub fn boundary_voxels(m: &MaskVolume) -> Vec<[usize; 3]> {
    let (d, h, w) = m.dims();
    let l = &m.labels;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if l[[z, y, x]] == 0 {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if edge
                    || l[[z - 1, y, x]] == 0
                    || l[[z + 1, y, x]] == 0
                    || l[[z, y - 1, x]] == 0
                    || l[[z, y + 1, x]] == 0
                    || l[[z, y, x - 1]] == 0
                    || l[[z, y, x + 1]] == 0
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Squared distance (mm²) from every voxel to the nearest seed voxel.
///
/// Separable lower-envelope-of-parabolas transform applied along x, y, then
/// z with per-axis spacing; exact for Euclidean distance.
pub fn squared_distance_to(dims: (usize, usize, usize), seeds: &[[usize; 3]], spacing: &Spacing) -> Array3<f64> {
    let (d, h, w) = dims;
    let mut f = Array3::from_elem(dims, f64::INFINITY);
    for s in seeds {
        f[[s[0], s[1], s[2]]] = 0.0;
    }
    let mut buf = Vec::new();
    let mut out = Vec::new();
    // x
    for z in 0..d {
        for y in 0..h {
            buf.clear();
            buf.extend((0..w).map(|x| f[[z, y, x]]));
            edt_1d(&buf, spacing.x, &mut out);
            for x in 0..w {
                f[[z, y, x]] = out[x];
            }
        }
    }
    // y
    for z in 0..d {
        for x in 0..w {
            buf.clear();
            buf.extend((0..h).map(|y| f[[z, y, x]]));
            edt_1d(&buf, spacing.y, &mut out);
            for y in 0..h {
                f[[z, y, x]] = out[y];
            }
        }
    }
    // z
    for y in 0..h {
        for x in 0..w {
            buf.clear();
            buf.extend((0..d).map(|z| f[[z, y, x]]));
            edt_1d(&buf, spacing.z, &mut out);
            for z in 0..d {
                f[[z, y, x]] = out[z];
            }
        }
    }
    f
}

/// 1-D squared distance transform of sampled function `f` with grid step `step`.
fn edt_1d(f: &[f64], step: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    let s2 = step * step;
    let pos = |q: usize| q as f64;
    // envelope vertices and the boundaries between them
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let intersect = |q: usize, p: usize| -> f64 {
        ((f[q] + s2 * pos(q) * pos(q)) - (f[p] + s2 * pos(p) * pos(p))) / (2.0 * s2 * (pos(q) - pos(p)))
    };
    for &q in &finite {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = intersect(q, p);
                    if s <= z[z.len() - 1] {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    z.push(s);
                    break;
                }
            }
        }
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = i as f64;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let dq = (i as f64 - v[k] as f64) * step;
        *o = dq * dq + f[v[k]];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edt_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let dims = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..8));
            let sp = Spacing::new(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0), rng.random_range(0.2..3.0)).unwrap();
            let n = rng.random_range(1..5);
            let seeds: Vec<[usize; 3]> = (0..n)
                .map(|_| [rng.random_range(0..dims.0), rng.random_range(0..dims.1), rng.random_range(0..dims.2)])
                .collect();
            let dt = squared_distance_to(dims, &seeds, &sp);
            for ((z, y, x), &got) in dt.indexed_iter() {
                let want = seeds
                    .iter()
                    .map(|s| {
                        let dz = (z as f64 - s[0] as f64) * sp.z;
                        let dy = (y as f64 - s[1] as f64) * sp.y;
                        let dx = (x as f64 - s[2] as f64) * sp.x;
                        dz * dz + dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn solid_cube_boundary() {
        let mut m = MaskVolume::zeros((5, 5, 5));
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    m.labels[[z, y, x]] = 1;
                }
            }
        }
        // 27 voxels, only the centre is interior
        assert_eq!(boundary_voxels(&m).len(), 26);
    }
}
