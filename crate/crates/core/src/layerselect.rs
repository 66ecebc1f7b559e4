//! Chooses which generator layers receive hypernetwork heads by probing how
//! far each layer's latent moves under a short directional optimisation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use log::{debug, info};

use crate::autograd::{Graph, Var};
use crate::embedspace::{directional_loss_graph, EmbedModel};
use crate::tensor::Tensor;
use crate::toygen::{GenModel, LatentCode};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA_STD: f64 = 0.6;

/// Probe schedule: `steps` normalised-gradient steps of length `step_size`
/// from the latents of each seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub step_size: f64,
    pub seeds: Vec<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 50, step_size: 0.01, seeds: vec![0, 1, 2, 3] }
    }
}

/// The selected layers (1-based, ascending) and the statistics behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSelection {
    pub layers: Vec<usize>,
    pub lambda_std: f64,
    pub delta_omega: Vec<f64>,
    pub phi: f64,
}

impl LayerSelection {
    /// Every one of `n` layers, without probe statistics.
    pub fn all(n: usize) -> Self {
        LayerSelection { layers: (1..=n).collect(), lambda_std: 0.0, delta_omega: vec![0.0; n], phi: 0.0 }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }
}

/// Per-layer latent displacement `Δω_i = mean_d |ω_i^m − ω_i^0|`, averaged over seeds.
///
/// Each step moves all layer latents together along the negative gradient
/// of the directional loss, scaled to global length `step_size`.
pub fn probe_optimize(gen: &GenModel, embed: &EmbedModel, target: &str, source: &str, cfg: &ProbeConfig) -> Result<Vec<f64>> {
    if cfg.seeds.is_empty() {
        return Err(Error::Input(String::from("probe needs at least one seed")));
    }
    let dt = embed.prompt_direction(target, source)?;
    let n = gen.config().layers();
    let mut total = vec![0.0; n];
    for &seed in &cfg.seeds {
        let w0 = gen.sample_latent(seed);
        let x0 = gen.synthesize(&w0)?;
        let e0 = embed.encode_image(&x0)?;
        let mut w = LatentCode::batch_tensors(&[&w0]);
        for step in 0..cfg.steps {
            let grads = probe_gradient(gen, embed, &w, &e0, &dt);
            let norm = libm::sqrt(grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum());
            if !norm.is_finite() {
                return Err(Error::Diverged { step, detail: format!("probe gradient for seed {seed} is not finite") });
            }
            if norm == 0.0 {
                break;
            }
            let scale = cfg.step_size / norm;
            for (wl, gl) in w.iter_mut().zip(&grads) {
                for (a, b) in wl.data_mut().iter_mut().zip(gl.data()) {
                    *a -= scale * b;
                }
            }
        }
        for (l, wl) in w.iter().enumerate() {
            let d = w0.layer(l + 1).iter().zip(wl.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / wl.numel() as f64;
            if !d.is_finite() {
                return Err(Error::Diverged { step: cfg.steps, detail: format!("probe latent for seed {seed} is not finite") });
            }
            total[l] += d / cfg.seeds.len() as f64;
        }
        debug!("probe seed {seed} done");
    }
    info!("probe displacements {total:?}");
    Ok(total)
}

fn probe_gradient(gen: &GenModel, embed: &EmbedModel, w: &[Tensor], e0: &[f64], dt: &[f64]) -> Vec<Tensor> {
    let mut g = Graph::new();
    g.freeze(gen);
    g.freeze(embed);
    let wv: Vec<Var> = w.iter().map(|t| g.leaf(t.clone())).collect();
    let y = gen.generator.forward(&mut g, &wv, &BTreeMap::new());
    let ey = embed.image.forward(&mut g, y);
    let ex = g.constant(Tensor::from_slice(&[1, e0.len()], e0));
    let d = g.constant(Tensor::from_slice(&[1, dt.len()], dt));
    let loss = directional_loss_graph(&mut g, ey, ex, d);
    let grads = g.backward(loss);
    wv.iter().zip(w).map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect()
}

/// `φ = mean(dw) + λ_std · std(dw)` with the population standard deviation.
pub fn adaptive_threshold(dw: &[f64], lambda_std: f64) -> Result<f64> {
    if dw.is_empty() {
        return Err(Error::Input(String::from("threshold of an empty displacement list")));
    }
    if dw.iter().any(|v| !v.is_finite()) || !lambda_std.is_finite() {
        return Err(Error::Input(format!("non-finite displacement or lambda: {dw:?}, {lambda_std}")));
    }
    let n = dw.len() as f64;
    let mut sum = 0.0;
    for v in dw {
        sum += v;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for v in dw {
        ss += (v - mean) * (v - mean);
    }
    Ok(mean + lambda_std * libm::sqrt(ss / n))
}

/// Layers (1-based) with `Δω_i ≥ φ`; may be empty.
pub fn passing_layers(dw: &[f64], lambda_std: f64) -> Result<Vec<usize>> {
    let phi = adaptive_threshold(dw, lambda_std)?;
    Ok(dw.iter().enumerate().filter(|(_, v)| **v >= phi).map(|(i, _)| i + 1).collect())
}

/// The layers passing `φ`, or the single largest-displacement layer if none does.
pub fn select_layers(dw: &[f64], lambda_std: f64) -> Result<LayerSelection> {
    let phi = adaptive_threshold(dw, lambda_std)?;
    let mut layers = passing_layers(dw, lambda_std)?;
    if layers.is_empty() {
        layers.push(argmax_layer(dw));
    }
    Ok(LayerSelection { layers, lambda_std, delta_omega: dw.to_vec(), phi })
}

/// Index (1-based) of the largest displacement; ties go to the lower layer.
pub fn argmax_layer(dw: &[f64]) -> usize {
    dw.iter().enumerate().fold(0, |b, (i, v)| if *v > dw[b] { i } else { b }) + 1
}

/// Probes once and selects for each `λ_std` in `lambdas`.
pub fn lambda_sweep(dw: &[f64], lambdas: &[f64]) -> Result<Vec<LayerSelection>> {
    lambdas.iter().map(|&l| select_layers(dw, l)).collect()
}
