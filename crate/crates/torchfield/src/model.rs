//! The torch-unit radiance network: positional encoding, distance-aware
//! convolution layers, patch heads, and the coarse/fine model pair.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Arr, Tape, Tensor};

const NORM_EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.9;

/// Frequency encoding: `concat(x, sin(2^l pi x), cos(2^l pi x))` for
/// `l = 0..levels`.
pub fn positional_encode(x: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), levels));
    out.extend_from_slice(x);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * PI;
        for &v in x {
            out.push((f * v).sin());
        }
        for &v in x {
            out.push((f * v).cos());
        }
    }
    out
}

pub fn encoded_len(dim: usize, levels: usize) -> usize {
    dim * (1 + 2 * levels)
}

/// Cosine tap weights for one window of sample locations: distances to the
/// anchor are normalized so the farthest tap lands at pi/4.
pub fn distance_weights(t_window: &[f64], anchor_index: usize) -> Result<Vec<f64>> {
    if let Some(bad) = t_window.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value(format!("non-finite sample location {bad}")));
    }
    if anchor_index >= t_window.len() {
        return Err(Error::Bounds(format!(
            "anchor {anchor_index} outside window of {}",
            t_window.len()
        )));
    }
    let ta = t_window[anchor_index];
    let d: Vec<f64> = t_window.iter().map(|t| (ta - t).abs()).collect();
    let d_max = d.iter().fold(0.0f64, |a, b| a.max(*b));
    let denom = 2.0 * (d_max + 1e-8);
    Ok(d.iter().map(|dk| (FRAC_PI_2 * dk / denom).cos()).collect())
}

/// Per-sample, per-tap scale matrix for `Tensor::conv1d`: row `n` holds the
/// distance weights of sample `n`'s window. Windows clamp at segment edges.
pub fn conv_scale(t: &[f64], seg_len: usize, kernel_size: usize) -> Result<Array2<f64>> {
    if seg_len == 0 || t.len() % seg_len != 0 {
        return Err(Error::Shape(format!(
            "{} samples do not split into segments of {seg_len}",
            t.len()
        )));
    }
    let half = (kernel_size / 2) as isize;
    let mut out = Array2::zeros((t.len(), kernel_size));
    let mut window = Vec::with_capacity(kernel_size);
    for n in 0..t.len() {
        let base = (n / seg_len) * seg_len;
        let (lo, hi) = (base as isize, (base + seg_len - 1) as isize);
        window.clear();
        for j in 0..kernel_size as isize {
            let m = (n as isize + j - half).clamp(lo, hi);
            window.push(t[m as usize]);
        }
        let w = distance_weights(&window, half as usize)?;
        for (j, wj) in w.into_iter().enumerate() {
            out[[n, j]] = wj;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub patch_size: usize,
    pub kernel_size: usize,
    pub channels: Vec<usize>,
    pub l_pos: usize,
    pub l_dir: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            patch_size: 5,
            kernel_size: 3,
            channels: vec![128, 128, 128, 256, 256, 256, 512, 512],
            l_pos: 10,
            l_dir: 4,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::Config(format!(
                "patch size must be odd and positive, got {}",
                self.patch_size
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("channel plan must be non-empty".into()));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "channel plan must be ascending, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// One distance-aware convolution layer plus its batch-wise normalization.
#[derive(Debug, Clone)]
pub struct DistanceAwareConvLayer {
    /// K x C_in x C_out.
    pub kernel: Arc<Arr>,
    pub bias: Arc<Arr>,
    pub norm_scale: Arc<Arr>,
    pub norm_shift: Arc<Arr>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct TorchFieldNetwork {
    pub config: NetworkConfig,
    pub layers: Vec<DistanceAwareConvLayer>,
    /// C_last x p^2 and p^2.
    pub density_w: Arc<Arr>,
    pub density_b: Arc<Arr>,
    /// (C_last + encoded direction) x 3p^2 and 3p^2.
    pub color_w: Arc<Arr>,
    pub color_b: Arc<Arr>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Arr::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape matches length")
}

impl TorchFieldNetwork {
    pub fn init(config: NetworkConfig, seed: u64) -> Result<TorchFieldNetwork> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let in_dim = encoded_len(3, config.l_pos);
        let mut layers = Vec::with_capacity(config.channels.len());
        let mut c_in = in_dim;
        for &c_out in &config.channels {
            let bound = (1.0 / (k * c_in) as f64).sqrt();
            layers.push(DistanceAwareConvLayer {
                kernel: Arc::new(uniform(&mut rng, &[k, c_in, c_out], bound)),
                bias: Arc::new(Arr::zeros(ndarray::IxDyn(&[c_out]))),
                norm_scale: Arc::new(Arr::ones(ndarray::IxDyn(&[c_out]))),
                norm_shift: Arc::new(Arr::zeros(ndarray::IxDyn(&[c_out]))),
                running_mean: Array1::zeros(c_out),
                running_var: Array1::ones(c_out),
            });
            c_in = c_out;
        }
        let pp = config.patch_size * config.patch_size;
        let dir_dim = encoded_len(3, config.l_dir);
        let density_bound = (1.0 / c_in as f64).sqrt();
        let color_bound = (1.0 / (c_in + dir_dim) as f64).sqrt();
        Ok(TorchFieldNetwork {
            density_w: Arc::new(uniform(&mut rng, &[c_in, pp], density_bound)),
            density_b: Arc::new(Arr::zeros(ndarray::IxDyn(&[pp]))),
            color_w: Arc::new(uniform(&mut rng, &[c_in + dir_dim, 3 * pp], color_bound)),
            color_b: Arc::new(Arr::zeros(ndarray::IxDyn(&[3 * pp]))),
            config,
            layers,
        })
    }

    /// All trainable parameters in a fixed order (layer kernel, bias, scale,
    /// shift, then the two heads). Running statistics are not included.
    pub fn params(&self) -> Vec<Arc<Arr>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.kernel.clone());
            out.push(layer.bias.clone());
            out.push(layer.norm_scale.clone());
            out.push(layer.norm_shift.clone());
        }
        out.push(self.density_w.clone());
        out.push(self.density_b.clone());
        out.push(self.color_w.clone());
        out.push(self.color_b.clone());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        let mut out: Vec<&mut Arr> = Vec::new();
        for layer in &mut self.layers {
            out.push(Arc::make_mut(&mut layer.kernel));
            out.push(Arc::make_mut(&mut layer.bias));
            out.push(Arc::make_mut(&mut layer.norm_scale));
            out.push(Arc::make_mut(&mut layer.norm_shift));
        }
        out.push(Arc::make_mut(&mut self.density_w));
        out.push(Arc::make_mut(&mut self.density_b));
        out.push(Arc::make_mut(&mut self.color_w));
        out.push(Arc::make_mut(&mut self.color_b));
        out
    }

    pub fn set_params(&mut self, values: Vec<Arr>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, value) in slots.iter_mut().zip(values) {
            if slot.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            **slot = value;
        }
        Ok(())
    }

    /// Fold per-forward batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(Array1<f64>, Array1<f64>)]) {
        assert_eq!(stats.len(), self.layers.len(), "one stat pair per layer");
        for (layer, (mean, var)) in self.layers.iter_mut().zip(stats) {
            layer.running_mean.zip_mut_with(mean, |r, b| {
                *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * b
            });
            layer.running_var.zip_mut_with(var, |r, b| {
                *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * b
            });
        }
    }

    /// Create leaf nodes for every parameter on `tape`.
    pub fn bind<'a>(&'a self, tape: &Tape, grad_enabled: bool) -> BoundNetwork<'a> {
        let param_tensors = self
            .params()
            .into_iter()
            .map(|p| tape.leaf_shared(p, grad_enabled))
            .collect();
        BoundNetwork {
            net: self,
            tape: tape.clone(),
            param_tensors,
        }
    }
}

/// One sample point's patch outputs.
#[derive(Debug, Clone)]
pub struct RadianceSample {
    /// p x p, non-negative.
    pub density_patch: Array2<f64>,
    /// p x p x 3, each channel in (0, 1).
    pub color_patch: ndarray::Array3<f64>,
}

/// One ray's sample locations: `positions[n] = origin + t[n] * direction`.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub direction: [f64; 3],
}

impl RaySamples {
    pub fn from_ray(origin: [f64; 3], direction: [f64; 3], t: Vec<f64>) -> RaySamples {
        let positions = t
            .iter()
            .map(|&tv| [0, 1, 2].map(|i| origin[i] + tv * direction[i]))
            .collect();
        RaySamples {
            t,
            positions,
            direction,
        }
    }
}

/// A network's parameters registered as leaves on one tape.
pub struct BoundNetwork<'a> {
    net: &'a TorchFieldNetwork,
    tape: Tape,
    /// Same order as `TorchFieldNetwork::params`.
    pub param_tensors: Vec<Tensor>,
}

pub struct ForwardOutput {
    /// (rays * samples) x p^2, relu-activated.
    pub sigma: Tensor,
    /// (rays * samples) x 3p^2 channel-major, sigmoid-activated; absent when
    /// density_only.
    pub color: Option<Tensor>,
    /// Per-layer (mean, var) over this forward's rows; empty unless training.
    pub batch_stats: Vec<(Array1<f64>, Array1<f64>)>,
}

impl BoundNetwork<'_> {
    fn layer_tensors(&self, idx: usize) -> (&Tensor, &Tensor, &Tensor, &Tensor) {
        let base = idx * 4;
        (
            &self.param_tensors[base],
            &self.param_tensors[base + 1],
            &self.param_tensors[base + 2],
            &self.param_tensors[base + 3],
        )
    }

    /// Run every ray through the trunk and heads in one batch. All rays must
    /// carry the same number of samples.
    pub fn forward(
        &self,
        rays: &[RaySamples],
        density_only: bool,
        training: bool,
    ) -> Result<ForwardOutput> {
        let n = match rays.first() {
            Some(r) if !r.t.is_empty() => r.t.len(),
            _ => return Err(Error::Shape("forward needs at least one sample".into())),
        };
        if rays.iter().any(|r| r.t.len() != n || r.positions.len() != n) {
            return Err(Error::Shape(
                "all rays in a forward batch must have the same sample count".into(),
            ));
        }
        let cfg = &self.net.config;
        let rows = rays.len() * n;
        let in_dim = encoded_len(3, cfg.l_pos);
        let mut x0 = Array2::zeros((rows, in_dim));
        let mut t_all = Vec::with_capacity(rows);
        for (r, ray) in rays.iter().enumerate() {
            let norm = ray.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                eprintln!("warning: ray direction not unit-norm ({norm}); normalizing");
            }
            for (s, pos) in ray.positions.iter().enumerate() {
                let enc = positional_encode(pos, cfg.l_pos);
                for (c, v) in enc.into_iter().enumerate() {
                    x0[[r * n + s, c]] = v;
                }
            }
            t_all.extend_from_slice(&ray.t);
        }
        let scale = self
            .tape
            .constant(conv_scale(&t_all, n, cfg.kernel_size)?.into_dyn());
        let mut h = self.tape.constant(x0.into_dyn());
        let mut batch_stats = Vec::new();
        for (idx, layer) in self.net.layers.iter().enumerate() {
            let (kernel, bias, norm_scale, norm_shift) = self.layer_tensors(idx);
            h = Tensor::conv1d(&h, kernel, &scale, n)?;
            h = h.add(bias)?;
            h = if training {
                let (y, mean, var) =
                    Tensor::batch_norm(&h, norm_scale, norm_shift, NORM_EPS)?;
                batch_stats.push((Array1::from_vec(mean), Array1::from_vec(var)));
                y
            } else {
                let rm = self.tape.constant(layer.running_mean.clone().into_dyn());
                let rv = self.tape.constant(layer.running_var.clone().into_dyn());
                h.sub(&rm)?
                    .div(&rv.add_scalar(NORM_EPS).sqrt())?
                    .mul(norm_scale)?
                    .add(norm_shift)?
            };
            h = h.relu();
        }
        let base = self.net.layers.len() * 4;
        let sigma = h
            .matmul(&self.param_tensors[base])?
            .add(&self.param_tensors[base + 1])?
            .relu();
        let color = if density_only {
            None
        } else {
            let dir_dim = encoded_len(3, cfg.l_dir);
            let mut dirs = Array2::zeros((rows, dir_dim));
            for (r, ray) in rays.iter().enumerate() {
                let norm = ray.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                let unit = ray.direction.map(|v| v / norm);
                let enc = positional_encode(&unit, cfg.l_dir);
                for s in 0..n {
                    for (c, v) in enc.iter().enumerate() {
                        dirs[[r * n + s, c]] = *v;
                    }
                }
            }
            let dir_enc = self.tape.constant(dirs.into_dyn());
            let cat = Tensor::concat(&[&h, &dir_enc], 1)?;
            Some(
                cat.matmul(&self.param_tensors[base + 2])?
                    .add(&self.param_tensors[base + 3])?
                    .sigmoid(),
            )
        };
        Ok(ForwardOutput {
            sigma,
            color,
            batch_stats,
        })
    }
}

/// Training-free coarse model synced from the trainable fine model.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub coarse: TorchFieldNetwork,
    pub fine: TorchFieldNetwork,
    pub sync_period: usize,
    pub iterations_since_sync: usize,
}

impl ModelPair {
    pub fn new(fine: TorchFieldNetwork, sync_period: usize) -> Result<ModelPair> {
        if sync_period == 0 {
            return Err(Error::Config("sync period must be positive".into()));
        }
        Ok(ModelPair {
            coarse: fine.clone(),
            fine,
            sync_period,
            iterations_since_sync: 0,
        })
    }

    pub fn sync_coarse_from_fine(&mut self) -> Result<()> {
        let fine_shapes: Vec<_> = self.fine.params().iter().map(|p| p.shape().to_vec()).collect();
        let coarse_shapes: Vec<_> = self
            .coarse
            .params()
            .iter()
            .map(|p| p.shape().to_vec())
            .collect();
        if fine_shapes != coarse_shapes {
            return Err(Error::Config(
                "coarse and fine parameter shapes differ".into(),
            ));
        }
        self.coarse = self.fine.clone();
        self.iterations_since_sync = 0;
        Ok(())
    }

    /// Count one optimizer step; sync when the period elapses. Returns
    /// whether a sync happened.
    pub fn step_and_maybe_sync(&mut self) -> Result<bool> {
        self.iterations_since_sync += 1;
        if self.iterations_since_sync >= self.sync_period {
            self.sync_coarse_from_fine()?;
            Ok(true)
        } else {
            Ok(false)
        }
    }
}
