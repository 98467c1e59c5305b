//! Alpha compositing of radiance patches and full-image assembly in
//! center-pixel or stride mode.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::model::{ModelPair, RadianceSample, RaySamples};
use crate::sampling::{
    compositing_weights, generate_ray, hierarchical_resample, stratified_sample, Camera,
};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct RenderedPatch {
    /// p x p x 3, clamped to [0, 1].
    pub rgb: Array3<f64>,
    pub center: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Center,
    Stride,
}

impl RenderMode {
    pub fn parse(s: &str) -> Result<RenderMode> {
        match s {
            "center" => Ok(RenderMode::Center),
            "stride" => Ok(RenderMode::Stride),
            other => Err(Error::Config(format!(
                "unknown render mode '{other}' (expected center|stride)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub mode: RenderMode,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub white_background: bool,
    /// Rays per network forward.
    pub batch: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            mode: RenderMode::Center,
            n_coarse: 64,
            n_fine: 192,
            white_background: false,
            batch: 128,
        }
    }
}

/// Composite one ray's samples per patch pixel. Rows of `sigma` are samples
/// (p^2 wide); `color` rows are 3p^2 channel-major. Returns the accumulated
/// rgb vector and the per-pixel leftover transmittance.
fn composite_values(
    sigma: ArrayView2<'_, f64>,
    color: ArrayView2<'_, f64>,
    deltas: &[f64],
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (n, pp) = sigma.dim();
    if color.dim() != (n, 3 * pp) || deltas.len() != n {
        return Err(Error::Shape(format!(
            "compositing shapes disagree: sigma {:?}, color {:?}, {} deltas",
            sigma.dim(),
            color.dim(),
            deltas.len()
        )));
    }
    let mut rgb = Array1::zeros(3 * pp);
    let mut depth = Array1::<f64>::zeros(pp);
    for s in 0..n {
        for q in 0..pp {
            let a = sigma[[s, q]] * deltas[s];
            if a.is_nan() {
                return Err(Error::Numerical(format!(
                    "NaN optical depth at sample {s} pixel {q}"
                )));
            }
            let alpha = -(-a).exp_m1(); // 1 - exp(-a)
            let w = (-depth[q]).exp() * alpha;
            for ch in 0..3 {
                let c = color[[s, ch * pp + q]];
                if c.is_nan() {
                    return Err(Error::Numerical(format!(
                        "NaN color at sample {s} pixel {q}"
                    )));
                }
                rgb[ch * pp + q] += w * c;
            }
            depth[q] += a;
        }
    }
    let transmittance = depth.mapv(|d| (-d).exp());
    Ok((rgb, transmittance))
}

/// Eq.-style per-pixel compositing of radiance sample patches.
pub fn composite_patch(
    samples: &[RadianceSample],
    deltas: &[f64],
    center: (usize, usize),
) -> Result<RenderedPatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("composite_patch needs at least one sample".into()))?;
    let p = first.density_patch.nrows();
    let pp = p * p;
    let mut sigma = Array2::zeros((samples.len(), pp));
    let mut color = Array2::zeros((samples.len(), 3 * pp));
    for (s, sample) in samples.iter().enumerate() {
        if sample.density_patch.dim() != (p, p) || sample.color_patch.dim() != (p, p, 3) {
            return Err(Error::Shape("inconsistent patch shapes".into()));
        }
        for q in 0..pp {
            sigma[[s, q]] = sample.density_patch[[q / p, q % p]];
            for ch in 0..3 {
                color[[s, ch * pp + q]] = sample.color_patch[[q / p, q % p, ch]];
            }
        }
    }
    let (rgb, _) = composite_values(sigma.view(), color.view(), deltas)?;
    let mut out = Array3::zeros((p, p, 3));
    for q in 0..pp {
        for ch in 0..3 {
            out[[q / p, q % p, ch]] = rgb[ch * pp + q].clamp(0.0, 1.0);
        }
    }
    Ok(RenderedPatch { rgb: out, center })
}

/// Differentiable compositing for training: same math as `composite_values`
/// on the tape. Returns the un-clamped 3p^2 rgb vector.
pub fn composite_patch_graph(sigma: &Tensor, color: &Tensor, deltas: &[f64]) -> Result<Tensor> {
    let shape = sigma.value().shape().to_vec();
    if shape.len() != 2 || shape[0] != deltas.len() {
        return Err(Error::Shape(format!(
            "sigma must be (samples x p^2), got {shape:?} with {} deltas",
            deltas.len()
        )));
    }
    let (n, pp) = (shape[0], shape[1]);
    let tape = sigma.tape().clone();
    let delta = tape.constant(Array2::from_shape_fn((n, pp), |(r, _)| deltas[r]).into_dyn());
    let a = sigma.mul(&delta)?;
    let transmittance = a.cumsum_exclusive().neg().exp();
    let alpha = a.neg().exp().neg().add_scalar(1.0);
    let w = transmittance.mul(&alpha)?;
    let w3 = Tensor::concat(&[&w, &w, &w], 1)?;
    w3.mul(color)?.sum_axis(0)
}

/// One ray's footprint: the pixel it is cast through and the image region it
/// owns (half-open), which its patch fills.
#[derive(Debug, Clone, Copy)]
pub struct PatchSpec {
    pub center: (usize, usize),
    pub own_x: (usize, usize),
    pub own_y: (usize, usize),
}

fn clamp_center(k: usize, p: usize, dim: usize) -> usize {
    let half = p / 2;
    (k * p + half).clamp(half, dim - 1 - half)
}

/// Ray layout for an image. Center mode: one ray per pixel owning that
/// pixel. Stride mode: one ray per p x p block; border blocks shift inward
/// so the whole patch stays inside the image while ownership stays disjoint.
pub fn ray_layout(width: usize, height: usize, p: usize, mode: RenderMode) -> Result<Vec<PatchSpec>> {
    if mode == RenderMode::Stride && (width < p || height < p) {
        return Err(Error::Config(format!(
            "stride mode needs the image ({width}x{height}) to fit one {p}x{p} patch"
        )));
    }
    let mut out = Vec::new();
    match mode {
        RenderMode::Center => {
            for j in 0..height {
                for i in 0..width {
                    out.push(PatchSpec {
                        center: (i, j),
                        own_x: (i, i + 1),
                        own_y: (j, j + 1),
                    });
                }
            }
        }
        RenderMode::Stride => {
            let blocks = |dim: usize| dim.div_ceil(p);
            for ky in 0..blocks(height) {
                for kx in 0..blocks(width) {
                    out.push(PatchSpec {
                        center: (clamp_center(kx, p, width), clamp_center(ky, p, height)),
                        own_x: (kx * p, ((kx + 1) * p).min(width)),
                        own_y: (ky * p, ((ky + 1) * p).min(height)),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Render one view with the coarse-then-fine pipeline. Returns the image and
/// the number of rays cast.
pub fn render_image(
    pair: &ModelPair,
    camera: &Camera,
    opts: &RenderOptions,
) -> Result<(Image, usize)> {
    let p = pair.fine.config.patch_size;
    let pp = p * p;
    let specs = ray_layout(camera.width, camera.height, p, opts.mode)?;
    let mut image = Image::zeros(camera.width, camera.height);
    let coarse_set = stratified_sample(camera.near, camera.far, opts.n_coarse, false, 0);
    for (chunk_idx, chunk) in specs.chunks(opts.batch).enumerate() {
        let rays: Vec<_> = chunk
            .iter()
            .map(|s| generate_ray(camera, s.center.0, s.center.1))
            .collect::<Result<_>>()?;
        let coarse_inputs: Vec<RaySamples> = rays
            .iter()
            .map(|r| RaySamples::from_ray(r.origin, r.direction, coarse_set.t.clone()))
            .collect();
        let tape = Tape::new();
        let coarse_out =
            pair.coarse
                .bind(&tape, false)
                .forward(&coarse_inputs, true, false)?;
        let coarse_sigma = coarse_out.sigma.value();
        let n_c = opts.n_coarse;
        let fine_inputs: Vec<RaySamples> = rays
            .iter()
            .enumerate()
            .map(|(r, ray)| {
                let center_sigma: Vec<f64> = (0..n_c)
                    .map(|s| coarse_sigma[ndarray::IxDyn(&[r * n_c + s, pp / 2])])
                    .collect();
                let weights = compositing_weights(&center_sigma, &coarse_set.deltas)?;
                let seed = (chunk_idx * opts.batch + r) as u64;
                let union = hierarchical_resample(
                    &coarse_set,
                    &weights,
                    opts.n_fine,
                    seed,
                    camera.near,
                    camera.far,
                );
                Ok(RaySamples::from_ray(ray.origin, ray.direction, union.t))
            })
            .collect::<Result<_>>()?;
        let n_u = fine_inputs[0].t.len();
        let tape = Tape::new();
        let fine_out = pair.fine.bind(&tape, false).forward(&fine_inputs, false, false)?;
        let sigma = fine_out.sigma.value();
        let color = fine_out.color.expect("full forward").value();
        let sigma2 = sigma
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("sigma is rank 2");
        let color2 = color
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("color is rank 2");
        for (r, (spec, input)) in chunk.iter().zip(&fine_inputs).enumerate() {
            let deltas: Vec<f64> = {
                let mut d: Vec<f64> = input.t.windows(2).map(|w| w[1] - w[0]).collect();
                d.push(camera.far - input.t[n_u - 1]);
                d
            };
            let rows = sigma2.slice_axis(Axis(0), (r * n_u..(r + 1) * n_u).into());
            let crows = color2.slice_axis(Axis(0), (r * n_u..(r + 1) * n_u).into());
            let (mut rgb, transmittance) = composite_values(rows, crows, &deltas)?;
            if opts.white_background {
                for q in 0..pp {
                    for ch in 0..3 {
                        rgb[ch * pp + q] += transmittance[q];
                    }
                }
            }
            let (cx, cy) = spec.center;
            // the patch origin can poke past the image border in center mode
            let (px0, py0) = (cx as isize - (p / 2) as isize, cy as isize - (p / 2) as isize);
            for y in spec.own_y.0..spec.own_y.1 {
                for x in spec.own_x.0..spec.own_x.1 {
                    let q = (y as isize - py0) as usize * p + (x as isize - px0) as usize;
                    let c = [0, 1, 2].map(|ch| rgb[ch * pp + q].clamp(0.0, 1.0));
                    image.set_pixel(x, y, c);
                }
            }
        }
    }
    Ok((image, specs.len()))
}
