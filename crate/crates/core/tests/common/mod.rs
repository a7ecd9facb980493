//! Checks shared by the acceptance suite and the focused integration tests.

#![allow(dead_code)]

use poleimg::encoder::layers::{self, ConvShape};
use poleimg::encoder::{backward, flatten, forward, grad_check, EncoderParams, GradCheckReport};
use poleimg::rng::{purpose, SplitMix64};
use poleimg::training::{nt_xent_loss, sl_bce_loss, SlCalibration};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const MIN_SAMPLES: usize = 50;

pub fn rng(index: u64) -> SplitMix64 {
    SplitMix64::stream(2024, purpose::TEST, index)
}

pub fn normals(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

pub fn unit(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    let v = normals(rng, dim, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Convolution with loss `r · conv(x)` over weights, bias and input.
fn conv_check() -> GradCheckReport {
    let mut g = rng(1);
    let s = ConvShape { c_in: 2, h_in: 7, w_in: 6, c_out: 3 };
    let (nw, nb, nx) = (s.c_out * s.patch_len(), s.c_out, s.in_len());
    let theta = normals(&mut g, nw + nb + nx, 1.0);
    let r = normals(&mut g, s.out_len(), 1.0);
    let eval = |t: &[f64]| {
        let mut col = vec![0.0; s.patch_len() * s.out_pixels()];
        let mut out = vec![0.0; s.out_len()];
        layers::conv_forward(&t[nw + nb..], &s, &t[..nw], &t[nw..nw + nb], &mut col, &mut out);
        (dot(&r, &out), col)
    };
    let (_, col) = eval(&theta);
    let mut dw = vec![0.0; nw];
    let mut db = vec![0.0; nb];
    let mut dx = vec![0.0; nx];
    layers::conv_backward(&r, &s, &theta[..nw], &col, &mut dw, &mut db, Some(&mut dx), &mut Vec::new());
    let analytic = [dw, db, dx].concat();
    grad_check(&theta, &analytic, |t| eval(t).0, 80, FD_STEP, 1).unwrap()
}

fn gap_check() -> GradCheckReport {
    let mut g = rng(2);
    let (channels, pixels) = (4, 16);
    let x = normals(&mut g, channels * pixels, 1.0);
    let r = normals(&mut g, channels, 1.0);
    let analytic = layers::gap_backward(&r, pixels);
    grad_check(&x, &analytic, |t| dot(&r, &layers::gap_forward(t, channels, pixels)), 64, FD_STEP, 2).unwrap()
}

fn linear_check() -> GradCheckReport {
    let mut g = rng(3);
    let (n_in, n_out) = (8, 6);
    let theta = normals(&mut g, n_out * n_in + n_out + n_in, 1.0);
    let r = normals(&mut g, n_out, 1.0);
    let (nw, nb) = (n_out * n_in, n_out);
    let eval = |t: &[f64]| dot(&r, &layers::linear_forward(&t[nw + nb..], &t[..nw], &t[nw..nw + nb]));
    let mut dw = vec![0.0; nw];
    let mut db = vec![0.0; nb];
    let dx = layers::linear_backward(&theta[nw + nb..], &theta[..nw], &r, &mut dw, &mut db);
    let analytic = [dw, db, dx].concat();
    grad_check(&theta, &analytic, eval, 62, FD_STEP, 3).unwrap()
}

fn normalize_check() -> GradCheckReport {
    let mut g = rng(4);
    let y = normals(&mut g, 64, 0.5);
    let r = normals(&mut g, 64, 1.0);
    let analytic = layers::l2_normalize_backward(&y, &r);
    grad_check(&y, &analytic, |t| dot(&r, &layers::l2_normalize(t).0), 64, FD_STEP, 4).unwrap()
}

fn nt_xent_check() -> GradCheckReport {
    let mut g = rng(5);
    let (n, dim) = (3, 10);
    let emb: Vec<Vec<f64>> = (0..2 * n).map(|_| unit(&mut g, dim)).collect();
    let (_, grads) = nt_xent_loss(&emb, 0.07).unwrap();
    let flat: Vec<f64> = emb.concat();
    let analytic: Vec<f64> = grads.concat();
    let loss = |t: &[f64]| {
        let e: Vec<Vec<f64>> = t.chunks(dim).map(<[f64]>::to_vec).collect();
        nt_xent_loss(&e, 0.07).unwrap().0
    };
    grad_check(&flat, &analytic, loss, flat.len(), FD_STEP, 5).unwrap()
}

/// Pairwise BCE over both descriptors and the two calibration scalars.
fn sl_check(label: u8, index: u64) -> GradCheckReport {
    let mut g = rng(6 + index);
    let dim = 32;
    let (di, dj) = (unit(&mut g, dim), unit(&mut g, dim));
    let calib = SlCalibration { alpha: 3.0 + g.next_f64(), beta: g.normal() * 0.5 };
    let r = sl_bce_loss(&di, &dj, label, calib).unwrap();
    let theta = [di, dj, vec![calib.alpha, calib.beta]].concat();
    let analytic = [r.grad_i, r.grad_j, vec![r.grad_alpha, r.grad_beta]].concat();
    let loss = |t: &[f64]| {
        let c = SlCalibration { alpha: t[2 * dim], beta: t[2 * dim + 1] };
        sl_bce_loss(&t[..dim], &t[dim..2 * dim], label, c).unwrap().loss
    };
    grad_check(&theta, &analytic, loss, theta.len(), FD_STEP, 6 + index).unwrap()
}

/// Small encoder with non-zero biases and continuous inputs so that no
/// pre-activation sits exactly on a ReLU kink.
fn small_encoder(seed: u64) -> (EncoderParams, Vec<Vec<f64>>) {
    let mut params = EncoderParams::init((12, 20), 8, seed).unwrap();
    let mut g = rng(20 + seed);
    for t in params.tensors.iter_mut().filter(|t| t.shape.len() == 1) {
        for v in &mut t.data {
            *v = 0.1 * g.normal();
        }
    }
    let images = (0..4).map(|_| (0..240).map(|_| g.next_f64()).collect()).collect();
    (params, images)
}

fn encoder_loss(params: &EncoderParams, images: &[Vec<f64>]) -> f64 {
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let (desc, _) = forward(params, &refs).unwrap();
    let emb: Vec<Vec<f64>> = desc.into_iter().map(|d| d.0).collect();
    nt_xent_loss(&emb, 0.5).unwrap().0
}

/// Encoder plus NT-Xent, checked tensor by tensor so every layer is covered.
fn encoder_checks() -> Vec<(String, GradCheckReport)> {
    let (params, images) = small_encoder(7);
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let (desc, cache) = forward(&params, &refs).unwrap();
    let emb: Vec<Vec<f64>> = desc.into_iter().map(|d| d.0).collect();
    let (_, gdesc) = nt_xent_loss(&emb, 0.5).unwrap();
    let grads = backward(&params, &cache, &gdesc).unwrap();

    let mut out = Vec::new();
    for (ti, grad) in grads.iter().enumerate() {
        let base = params.tensors[ti].data.clone();
        let loss = |t: &[f64]| {
            let mut p = params.clone();
            p.tensors[ti].data.copy_from_slice(t);
            encoder_loss(&p, &images)
        };
        let rep = grad_check(&base, &grad.data, loss, MIN_SAMPLES, FD_STEP, 100 + ti as u64).unwrap();
        out.push((format!("encoder+nt-xent {}", grad.name), rep));
    }
    let flat = flatten(&params.tensors);
    let analytic = flatten(&grads);
    let loss = |t: &[f64]| {
        let mut p = params.clone();
        poleimg::encoder::unflatten_into(t, &mut p.tensors);
        encoder_loss(&p, &images)
    };
    out.push(("encoder+nt-xent all".into(), grad_check(&flat, &analytic, loss, 100, FD_STEP, 99).unwrap()));
    out
}

/// Every gradient check; each entry holds at least [`MIN_SAMPLES`]
/// coordinates unless the tensor is smaller.
pub fn gradient_suite() -> Vec<(String, GradCheckReport)> {
    let mut out = vec![
        ("conv layer".to_string(), conv_check()),
        ("global average pool".to_string(), gap_check()),
        ("linear layer".to_string(), linear_check()),
        ("l2 normalize".to_string(), normalize_check()),
        ("nt-xent".to_string(), nt_xent_check()),
        ("sl-bce label 1".to_string(), sl_check(1, 0)),
        ("sl-bce label 0".to_string(), sl_check(0, 1)),
    ];
    out.extend(encoder_checks());
    out
}

use poleimg::cloud::{Point3, PointCloud};
use poleimg::detect::PoleDetection;

/// Points placed in polar coordinates around `pole` with every angle at
/// least `margin` degrees inside its 1° bin and every range well inside
/// `radius`. Returns the cloud rotated by `k` degrees alongside the original.
pub fn polar_cloud_pair(seed: u64, pole: &PoleDetection, k: u32, radius: f64, n: usize) -> (PointCloud, PointCloud) {
    let mut g = rng(1000 + seed);
    let margin = 1e-5;
    let mut base = PointCloud::new(0);
    let mut rotated = PointCloud::new(0);
    // Clustered angular support so the circular mean is well defined.
    let centre = g.uniform(0.0, 360.0);
    for _ in 0..n {
        let theta_bin = (centre + 60.0 * g.normal()).rem_euclid(360.0).floor();
        let theta = theta_bin + g.uniform(margin, 1.0 - margin);
        let r = g.uniform(0.05, radius - 0.05);
        let z = g.uniform(0.05, 7.95);
        let at = |deg: f64| {
            let deg = deg.rem_euclid(360.0);
            let a = deg.to_radians();
            Point3::new(pole.center_x + r * a.cos(), pole.center_y + r * a.sin(), pole.base_z + z)
        };
        base.points.push(at(theta));
        rotated.points.push(at(theta + f64::from(k)));
    }
    (base, rotated)
}
