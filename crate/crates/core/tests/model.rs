mod common;

use common::{random_tensor, rng};
use trus_seg::model::{CoordDrUNet, DilatedCascade, ModelConfig};
use trus_seg::nn::{Mode, Tensor};

fn small(c: usize) -> ModelConfig {
    ModelConfig {
        in_channels: c,
        encoder_depth: 3,
        base_channels: 8,
        input_height: 32,
        input_width: 40,
        ..Default::default()
    }
}

fn shapes(cfg: ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut net = CoordDrUNet::<f32>::new(cfg, 0).unwrap();
    let mut v = vec![];
    net.visit_params(|n, p| v.push((n.to_string(), p.shape.clone())));
    v
}

#[test]
fn dilated_cascade_receptive_field_is_31() {
    let ch = 2;
    let mut cascade = DilatedCascade::<f64>::new(ch, &[1, 2, 4, 8], &mut rng(3));
    for u in cascade.units_mut() {
        u.conv.weight.value.fill(0.1);
        u.conv.bias.value.fill(0.0);
    }
    let (h, w) = (64, 64);
    let x = Tensor::full([1, ch, h, w], 1.0);
    let y = cascade.forward(&x, Mode::Eval);
    assert_eq!(y.shape(), x.shape());
    let mut g = Tensor::zeros(y.shape());
    g.set(0, 0, h / 2, w / 2, 1.0);
    let gx = cascade.backward(&g);
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for c in 0..ch {
        for yy in 0..h {
            for xx in 0..w {
                if gx.get(0, c, yy, xx) != 0.0 {
                    y0 = y0.min(yy);
                    y1 = y1.max(yy);
                    x0 = x0.min(xx);
                    x1 = x1.max(xx);
                }
            }
        }
    }
    assert_eq!((y1 - y0 + 1, x1 - x0 + 1), (31, 31));
    assert_eq!((y0, x0), (h / 2 - 15, w / 2 - 15));
}

#[test]
fn dilated_cascade_zero_in_zero_out() {
    let mut cascade = DilatedCascade::<f64>::new(4, &[1, 2, 4, 8], &mut rng(1));
    let x = Tensor::zeros([2, 4, 12, 10]);
    let y = cascade.forward(&x, Mode::Eval);
    assert_eq!(y.shape(), [2, 4, 12, 10]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

fn unit(cin: usize, cout: usize) -> usize {
    cin * cout * 9 + cout + 2 * cout
}

fn plain_unet_params(c_in: usize, base: usize, depth: usize, k: usize) -> usize {
    let ch = |i: usize| base * 2usize.pow(i as u32);
    let mut n = 0;
    let mut cin = c_in;
    for i in 0..depth {
        n += unit(cin, ch(i)) + unit(ch(i), ch(i));
        cin = ch(i);
    }
    n += unit(ch(depth - 1), ch(depth)) + unit(ch(depth), ch(depth));
    for i in 0..depth {
        n += unit(ch(i + 1), ch(i)) + unit(2 * ch(i), ch(i)) + unit(ch(i), ch(i));
    }
    n + base * k + k
}

#[test]
fn plain_unet_parameter_count() {
    for (c, base, depth) in [(3, 32, 4), (1, 16, 3), (5, 8, 2)] {
        let cfg = ModelConfig {
            in_channels: c,
            base_channels: base,
            encoder_depth: depth,
            ..Default::default()
        }
        .plain_unet();
        let mut net = CoordDrUNet::<f32>::new(cfg, 0).unwrap();
        assert_eq!(net.num_params(), plain_unet_params(c, base, depth, 2), "c={c} base={base} depth={depth}");
    }
}

#[test]
fn default_forward_shapes() {
    let cfg = ModelConfig::default();
    let mut net = CoordDrUNet::<f32>::new(cfg, 0).unwrap();
    let x: Tensor<f32> = random_tensor([2, 3, 128, 160], &mut rng(0), 0.0, 1.0).cast();
    let out = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(out.probs.shape(), [2, 2, 128, 160]);
    assert_eq!(out.latent.shape(), [2, 512, 8, 10]);
}

#[test]
fn zeroed_head_gives_uniform_probabilities() {
    let mut net = CoordDrUNet::<f64>::new(small(3), 2).unwrap();
    net.head_mut().weight.value.fill(0.0);
    net.head_mut().bias.value.fill(0.0);
    let x = random_tensor([2, 3, 32, 40], &mut rng(5), 0.0, 1.0);
    let out = net.forward(&x, Mode::Eval).unwrap();
    assert!(out.probs.data().iter().all(|&p| p == 0.5));
}

#[test]
fn latent_is_deterministic_in_eval_and_matches_forward() {
    let mut net = CoordDrUNet::<f32>::new(small(3), 4).unwrap();
    let x: Tensor<f32> = random_tensor([3, 3, 32, 40], &mut rng(6), 0.0, 1.0).cast();
    let a = net.encode_latent(&x, Mode::Eval).unwrap();
    let b = net.encode_latent(&x, Mode::Eval).unwrap();
    let c = net.forward(&x, Mode::Eval).unwrap().latent;
    assert_eq!(a.data(), b.data());
    assert_eq!(a.data(), c.data());
}

#[test]
fn slice_count_only_changes_first_layer() {
    for c in [1, 5, 7] {
        let a = shapes(small(3));
        let b = shapes(small(c));
        assert_eq!(a.len(), b.len());
        for ((na, sa), (nb, sb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            if sa != sb {
                assert!(na == "enc0.unit1.conv.weight" || na == "enc0.proj.weight", "{na}");
                assert_eq!(sb[1], c);
            }
        }
        let mut net = CoordDrUNet::<f32>::new(small(c), 0).unwrap();
        let x = Tensor::zeros([1, c, 32, 40]);
        assert_eq!(net.encode_latent(&x, Mode::Eval).unwrap().shape(), [1, 64, 4, 5]);
    }
}

#[test]
fn toggles_change_parameter_count() {
    let full = shapes(small(3)).len();
    let plain = shapes(small(3).plain_unet()).len();
    assert!(full > plain);
    let names: Vec<String> = shapes(small(3)).into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().any(|n| n.contains("attention")));
    assert!(names.iter().any(|n| n.contains("dilated3")));
    assert!(names.iter().any(|n| n.contains("proj")));
}
