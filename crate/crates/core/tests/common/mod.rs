#![allow(dead_code)]

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trus_seg::losses::{kd_loss_grad, one_hot, soft_dice_loss_grad};
use trus_seg::model::{CoordDrUNet, ModelConfig};
use trus_seg::nn::{softmax_channels, Mode, Tensor};
use trus_seg::volume::{MaskVolume, Spacing};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random binary mask with the given foreground density.
pub fn random_mask(dims: (usize, usize, usize), density: f64, r: &mut impl Rng) -> MaskVolume {
    MaskVolume::new(Array3::from_shape_fn(dims, |_| u8::from(r.random_bool(density)))).unwrap()
}

pub fn count_dice(a: &MaskVolume, b: &MaskVolume) -> f64 {
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (idx, &x) in a.labels.indexed_iter() {
        let y = b.labels[idx];
        if x == 1 {
            na += 1;
        }
        if y == 1 {
            nb += 1;
        }
        if x == 1 && y == 1 {
            inter += 1;
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Surface voxels found by checking the six face neighbours directly.
pub fn surface(m: &MaskVolume) -> Vec<(usize, usize, usize)> {
    let (d, h, w) = m.dims();
    let mut out = vec![];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if m.labels[[z, y, x]] == 0 {
                    continue;
                }
                let nbrs = [
                    (z as i64 - 1, y as i64, x as i64),
                    (z as i64 + 1, y as i64, x as i64),
                    (z as i64, y as i64 - 1, x as i64),
                    (z as i64, y as i64 + 1, x as i64),
                    (z as i64, y as i64, x as i64 - 1),
                    (z as i64, y as i64, x as i64 + 1),
                ];
                let edge = nbrs.iter().any(|&(a, b, c)| {
                    a < 0
                        || b < 0
                        || c < 0
                        || a >= d as i64
                        || b >= h as i64
                        || c >= w as i64
                        || m.labels[[a as usize, b as usize, c as usize]] == 0
                });
                if edge {
                    out.push((z, y, x));
                }
            }
        }
    }
    out
}

fn nearest(p: (usize, usize, usize), set: &[(usize, usize, usize)], s: &Spacing) -> f64 {
    set.iter()
        .map(|q| {
            let dz = (p.0 as f64 - q.0 as f64) * s.z;
            let dy = (p.1 as f64 - q.1 as f64) * s.y;
            let dx = (p.2 as f64 - q.2 as f64) * s.x;
            (dz * dz + dy * dy + dx * dx).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// All-pairs pooled surface distances.
pub fn all_pairs_distances(a: &MaskVolume, b: &MaskVolume, s: &Spacing) -> Vec<f64> {
    let (sa, sb) = (surface(a), surface(b));
    let mut d: Vec<f64> = sa.iter().map(|&p| nearest(p, &sb, s)).collect();
    d.extend(sb.iter().map(|&p| nearest(p, &sa, s)));
    d
}

/// numpy-style linear percentile.
pub fn linear_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn brute_hd95(a: &MaskVolume, b: &MaskVolume, s: &Spacing) -> f64 {
    linear_percentile(all_pairs_distances(a, b, s), 95.0)
}

pub fn random_tensor(shape: [usize; 4], r: &mut impl Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Passes when the two values agree to `tol` relative error; gradients below
/// `floor` in magnitude only need to agree to `floor · tol` absolutely.
pub fn close(analytic: f64, numeric: f64, tol: f64, floor: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= tol * scale.max(floor)
}

pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_rel: f64,
}

impl GradReport {
    fn new() -> Self {
        Self { checked: 0, failures: vec![], max_rel: 0.0 }
    }

    fn record(&mut self, what: String, a: f64, n: f64, tol: f64, floor: f64) {
        self.checked += 1;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        self.max_rel = self.max_rel.max(rel);
        if !close(a, n, tol, floor) {
            self.failures.push(format!("{what}: analytic {a:e} numeric {n:e}"));
        }
    }
}

const H: f64 = 1e-6;
pub const TOL: f64 = 1e-3;
pub const FLOOR: f64 = 1e-6;

/// Soft-Dice gradient against central differences on a softmax-normalized prediction.
pub fn check_dice(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let (n, k, h, w) = (r.random_range(1..3), 2 + r.random_range(0..2), r.random_range(2..5), r.random_range(2..5));
    let logits = random_tensor([n, k, h, w], &mut r, -2.0, 2.0);
    let yhat = softmax_channels(&logits);
    let masks: Vec<ndarray::Array2<u8>> = (0..n)
        .map(|_| ndarray::Array2::from_shape_fn((h, w), |_| r.random_range(0..k as u8)))
        .collect();
    let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    let y: Tensor<f64> = one_hot(&views, k);
    let (_, g) = soft_dice_loss_grad(&y, &yhat).unwrap();
    let mut rep = GradReport::new();
    for i in 0..yhat.len() {
        let mut p = yhat.clone();
        p.data_mut()[i] += H;
        let up = soft_dice_loss_grad(&y, &p).unwrap().0;
        p.data_mut()[i] -= 2.0 * H;
        let dn = soft_dice_loss_grad(&y, &p).unwrap().0;
        rep.record(format!("dice[{seed}] elem {i}"), g.data()[i], (up - dn) / (2.0 * H), TOL, FLOOR);
    }
    rep
}

pub fn check_kd(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let shape = [r.random_range(1..4), r.random_range(1..5), r.random_range(1..4), r.random_range(1..4)];
    let z = random_tensor(shape, &mut r, -3.0, 3.0);
    let zp = random_tensor(shape, &mut r, -3.0, 3.0);
    let nt = r.random_range(1..9);
    let (_, g) = kd_loss_grad(&z, &zp, nt).unwrap();
    let mut rep = GradReport::new();
    for i in 0..z.len() {
        let mut p = z.clone();
        p.data_mut()[i] += H;
        let up = kd_loss_grad(&p, &zp, nt).unwrap().0;
        p.data_mut()[i] -= 2.0 * H;
        let dn = kd_loss_grad(&p, &zp, nt).unwrap().0;
        rep.record(format!("kd[{seed}] elem {i}"), g.data()[i], (up - dn) / (2.0 * H), TOL, FLOOR);
    }
    rep
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        encoder_depth: 2,
        base_channels: 4,
        dilation_rates: vec![1, 2, 4, 8],
        input_height: 16,
        input_width: 16,
        ..Default::default()
    }
}

/// Training-mode loss `soft_dice + λ·kd` of the tiny network in f64.
fn network_loss(net: &mut CoordDrUNet<f64>, x: &Tensor<f64>, y: &Tensor<f64>, zt: &Tensor<f64>, lambda: f64) -> f64 {
    let out = net.forward(x, Mode::Train).unwrap();
    let (seg, _) = soft_dice_loss_grad(y, &out.probs).unwrap();
    let (kd, _) = kd_loss_grad(&out.latent, zt, x.batch()).unwrap();
    seg + lambda * kd
}

/// Checks every parameter when `per_tensor` is `None`, else that many
/// random entries of each parameter tensor.
pub fn check_network(cfg: &ModelConfig, seed: u64, per_tensor: Option<usize>) -> GradReport {
    let mut r = rng(seed);
    let mut net = CoordDrUNet::<f64>::new(cfg.clone(), seed).unwrap();
    let b = 2;
    let x = random_tensor([b, cfg.in_channels, cfg.input_height, cfg.input_width], &mut r, 0.0, 1.0);
    let masks: Vec<ndarray::Array2<u8>> = (0..b)
        .map(|_| ndarray::Array2::from_shape_fn((cfg.input_height, cfg.input_width), |_| u8::from(r.random_bool(0.4))))
        .collect();
    let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    let y: Tensor<f64> = one_hot(&views, cfg.num_classes);
    let [c, lh, lw] = cfg.latent_shape();
    let noise = random_tensor([b, c, lh, lw], &mut r, -0.05, 0.05);
    let mut zt = net.forward(&x, Mode::Train).unwrap().latent;
    zt.add_assign(&noise);
    let lambda = 0.2;

    net.zero_grad();
    let out = net.forward(&x, Mode::Train).unwrap();
    let (_, g) = soft_dice_loss_grad(&y, &out.probs).unwrap();
    let (_, mut gl) = kd_loss_grad(&out.latent, &zt, b).unwrap();
    gl.scale(lambda);
    net.backward(&g, Some(&gl));

    let mut analytic: Vec<(String, Vec<f64>)> = vec![];
    net.visit_params(|name, p| analytic.push((name.to_string(), p.grad.clone())));

    let mut rep = GradReport::new();
    for (t, (name, grads)) in analytic.iter().enumerate() {
        let picks: Vec<usize> = match per_tensor {
            None => (0..grads.len()).collect(),
            Some(k) => (0..k.min(grads.len())).map(|_| r.random_range(0..grads.len())).collect(),
        };
        for i in picks {
            let mut eval = |delta: f64| {
                let mut seen = 0;
                net.visit_params(|_, p| {
                    if seen == t {
                        p.value[i] += delta;
                    }
                    seen += 1;
                });
                network_loss(&mut net, &x, &y, &zt, lambda)
            };
            let up = eval(H);
            let dn = eval(-2.0 * H);
            eval(H);
            rep.record(format!("net[{seed}] {name}[{i}]"), grads[i], (up - dn) / (2.0 * H), TOL, FLOOR);
        }
    }
    rep
}
