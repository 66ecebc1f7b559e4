//! Generator gradients against finite differences and the modulation identity
//! against a direct-loop convolution stack.

mod common;

use std::collections::BTreeMap;

use common::{central_diff, rel_err};
use hyperedit_core::autograd::{Graph, Var};
use hyperedit_core::rng::seeded;
use hyperedit_core::toygen::{GenConfig, GenModel, LatentCode, DEMOD_EPS};
use hyperedit_core::Tensor;

fn micro_model() -> GenModel {
    GenModel::new(&GenConfig::micro(), 5).unwrap()
}

fn random_code(cfg: &GenConfig, seed: u64) -> LatentCode {
    LatentCode::new(Tensor::randn(&[cfg.layers(), cfg.d_w], 1.0, &mut seeded(seed))).unwrap()
}

/// Scalar contraction of the image with fixed weights.
fn loss_of(model: &GenModel, g: &mut Graph, w: &[Var], kernels: &BTreeMap<usize, Var>) -> Var {
    let y = model.generator.forward(g, w, kernels);
    let weights = g.constant(Tensor::randn(g.shape(y), 1.0, &mut seeded(99)));
    let p = g.mul(y, weights);
    g.sum(p)
}

#[test]
fn synthesize_gradient_matches_finite_differences() {
    let model = micro_model();
    let cfg = model.config().clone();
    let code = random_code(&cfg, 1);
    let latents = LatentCode::batch_tensors(&[&code]);
    let kernels: Vec<Tensor> = (1..=cfg.layers()).map(|l| model.generator.kernel(l).clone()).collect();

    let eval = |ks: &[Tensor], ws: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        g.freeze(&model);
        let wv: Vec<Var> = ws.iter().map(|t| g.constant(t.clone())).collect();
        let kv: BTreeMap<usize, Var> = ks.iter().enumerate().map(|(i, t)| (i + 1, g.constant(t.clone()))).collect();
        let l = loss_of(&model, &mut g, &wv, &kv);
        g.value(l).item()
    };

    let mut g = Graph::new();
    g.freeze(&model);
    let wv: Vec<Var> = latents.iter().map(|t| g.leaf(t.clone())).collect();
    let kv: BTreeMap<usize, Var> = kernels.iter().enumerate().map(|(i, t)| (i + 1, g.leaf(t.clone()))).collect();
    let l = loss_of(&model, &mut g, &wv, &kv);
    let grads = g.backward(l);

    let mut worst: f64 = 0.0;
    for (i, k) in kernels.iter().enumerate() {
        let analytic = grads.wrt(kv[&(i + 1)]).unwrap();
        for j in 0..k.numel() {
            let mut f = |t: &Tensor| {
                let mut ks = kernels.clone();
                ks[i] = t.clone();
                eval(&ks, &latents)
            };
            let n = central_diff(k, j, 1e-6, &mut f);
            worst = worst.max(rel_err(analytic.data()[j], n));
        }
    }
    for (i, w) in latents.iter().enumerate() {
        let analytic = grads.wrt(wv[i]).unwrap();
        for j in 0..w.numel() {
            let mut f = |t: &Tensor| {
                let mut ws = latents.clone();
                ws[i] = t.clone();
                eval(&kernels, &ws)
            };
            let n = central_diff(w, j, 1e-6, &mut f);
            worst = worst.max(rel_err(analytic.data()[j], n));
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

fn lrelu(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        0.2 * v
    }
}

/// Same-padded convolution by direct summation: `x: [C, H, W]`, `w: [O, C, k, k]`.
fn conv_loop(x: &[f64], c: usize, h: usize, w: &Tensor) -> Vec<f64> {
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let p = k as isize / 2;
    let mut out = vec![0.0; o * h * h];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..h {
                let mut s = 0.0;
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - p;
                            let sx = xx as isize + kx as isize - p;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= h as isize {
                                continue;
                            }
                            s += x[(ic * h + sy as usize) * h + sx as usize] * w.data()[((oc * c + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out[(oc * h + y) * h + xx] = s;
            }
        }
    }
    out
}

#[test]
fn unit_styles_reduce_to_plain_normalised_convolutions() {
    let mut model = micro_model();
    for layer in &mut model.generator.layers {
        *layer.affine.weight.value_mut() = Tensor::zeros(layer.affine.weight.shape());
        *layer.affine.bias.value_mut() = Tensor::ones(layer.affine.bias.shape());
        *layer.bias.value_mut() = Tensor::randn(layer.bias.shape(), 0.3, &mut seeded(4));
    }
    let cfg = model.config().clone();
    let image = model.synthesize(&random_code(&cfg, 2)).unwrap();

    let gen = &model.generator;
    let mut h = cfg.base_res;
    let mut c = cfg.in_channels(1);
    let mut x = gen.constant.value().data().to_vec();
    for (i, layer) in gen.layers.iter().enumerate() {
        let kernel = layer.kernel.value();
        let o = kernel.shape()[0];
        let per_out = kernel.numel() / o;
        let mut y = conv_loop(&x, c, h, kernel);
        for oc in 0..o {
            let energy: f64 = kernel.data()[oc * per_out..(oc + 1) * per_out].iter().map(|v| v * v).sum();
            let d = 1.0 / (energy + DEMOD_EPS).sqrt();
            for v in &mut y[oc * h * h..(oc + 1) * h * h] {
                *v = lrelu(*v * d + layer.bias.value().data()[oc]);
            }
        }
        c = o;
        x = y;
        if cfg.upsample_after.contains(&(i + 1)) {
            let mut up = vec![0.0; c * 4 * h * h];
            for ch in 0..c {
                for yy in 0..2 * h {
                    for xx in 0..2 * h {
                        up[(ch * 2 * h + yy) * 2 * h + xx] = x[(ch * h + yy / 2) * h + xx / 2];
                    }
                }
            }
            x = up;
            h *= 2;
        }
    }
    let rgb = gen.to_rgb.weight.value();
    let bias = gen.to_rgb.bias.value();
    let mut worst: f64 = 0.0;
    for ch in 0..3 {
        for p in 0..h * h {
            let mut s = bias.data()[ch];
            for ic in 0..c {
                s += rgb.data()[ch * c + ic] * x[ic * h * h + p];
            }
            let v = 1.0 / (1.0 + (-s).exp());
            worst = worst.max((v - image.data()[ch * h * h + p]).abs());
        }
    }
    assert!(worst < 1e-12, "max deviation {worst}");
}
