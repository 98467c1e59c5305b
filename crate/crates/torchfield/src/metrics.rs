//! Training losses (center-weighted MSE + structural similarity) and
//! evaluation metrics (PSNR, SSIM).

use ndarray::{Array1, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::tensor::{Tape, Tensor};

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// A predicted/ground-truth patch pair; `center` is the image coordinate of
/// the patch midpoint.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub predicted: Array3<f64>,
    pub ground_truth: Array3<f64>,
    pub center: (usize, usize),
}

/// Per-pixel weights `exp(-||(i,j) - center||)` over a p x p patch,
/// row-major.
pub fn patch_weights(p: usize) -> Array1<f64> {
    let c = (p / 2) as f64;
    Array1::from_shape_fn(p * p, |idx| {
        let (dy, dx) = ((idx / p) as f64, (idx % p) as f64);
        (-((dy - c).powi(2) + (dx - c).powi(2)).sqrt()).exp()
    })
}

/// Flatten a p x p x 3 patch to channel-major layout `[ch*p*p + row*p + col]`.
pub fn flatten_patch(patch: &Array3<f64>) -> Array1<f64> {
    let (h, w, _) = patch.dim();
    Array1::from_shape_fn(3 * h * w, |idx| {
        let (ch, rest) = (idx / (h * w), idx % (h * w));
        patch[[rest / w, rest % w, ch]]
    })
}

/// Center-weighted squared error on the tape. `pred` and `gt` are length
/// `3*p*p` channel-major vectors.
pub fn weighted_mse_graph(pred: &Tensor, gt: &Tensor, p: usize, weighted: bool) -> Tensor {
    let tape = pred.tape().clone();
    let pp = p * p;
    let diff = pred.sub(gt).expect("patch shapes match");
    let sq = diff.mul(&diff).unwrap();
    let weighted_sq = if weighted {
        let w = patch_weights(p);
        let mut w3 = Vec::with_capacity(3 * pp);
        for _ in 0..3 {
            w3.extend(w.iter());
        }
        let w3 = tape.constant(Array1::from(w3).into_dyn());
        sq.mul(&w3).unwrap()
    } else {
        sq
    };
    weighted_sq.sum().mul_scalar(1.0 / pp as f64)
}

/// Whole-patch SSIM on the tape, averaged over the three channels.
pub fn ssim_graph(pred: &Tensor, gt: &Tensor, p: usize) -> Tensor {
    let pp = p * p;
    let mut acc: Option<Tensor> = None;
    for ch in 0..3 {
        let x = pred.narrow(0, ch * pp, pp).expect("channel slice");
        let y = gt.narrow(0, ch * pp, pp).expect("channel slice");
        let mx = x.mean();
        let my = y.mean();
        let vx = x.mul(&x).unwrap().mean().sub(&mx.mul(&mx).unwrap()).unwrap();
        let vy = y.mul(&y).unwrap().mean().sub(&my.mul(&my).unwrap()).unwrap();
        let cov = x.mul(&y).unwrap().mean().sub(&mx.mul(&my).unwrap()).unwrap();
        let num = mx
            .mul(&my)
            .unwrap()
            .mul_scalar(2.0)
            .add_scalar(SSIM_C1)
            .mul(&cov.mul_scalar(2.0).add_scalar(SSIM_C2))
            .unwrap();
        let den = mx
            .mul(&mx)
            .unwrap()
            .add(&my.mul(&my).unwrap())
            .unwrap()
            .add_scalar(SSIM_C1)
            .mul(&vx.add(&vy).unwrap().add_scalar(SSIM_C2))
            .unwrap();
        let s = num.div(&den).unwrap();
        acc = Some(match acc {
            None => s,
            Some(a) => a.add(&s).unwrap(),
        });
    }
    acc.unwrap().mul_scalar(1.0 / 3.0)
}

/// Training objective: center-weighted MSE plus `ssim_weight * (1 - SSIM)`.
pub fn total_loss_graph(
    pred: &Tensor,
    gt: &Tensor,
    p: usize,
    weighted: bool,
    ssim_weight: f64,
) -> Tensor {
    let mse = weighted_mse_graph(pred, gt, p, weighted);
    if ssim_weight == 0.0 {
        return mse;
    }
    let ssim_loss = ssim_graph(pred, gt, p).neg().add_scalar(1.0);
    mse.add(&ssim_loss.mul_scalar(ssim_weight)).unwrap()
}

fn check_pair(pair: &PatchPair) -> Result<usize> {
    let (h, w, c) = pair.predicted.dim();
    if pair.predicted.dim() != pair.ground_truth.dim() {
        return Err(Error::Shape(format!(
            "patch shapes differ: {:?} vs {:?}",
            pair.predicted.dim(),
            pair.ground_truth.dim()
        )));
    }
    if h != w || c != 3 {
        return Err(Error::Shape(format!(
            "expected square p x p x 3 patches, got {:?}",
            pair.predicted.dim()
        )));
    }
    Ok(h)
}

/// `(1/p^2) sum w_ij ||pred - gt||^2` with center-decaying weights.
pub fn weighted_mse(pair: &PatchPair) -> Result<f64> {
    let p = check_pair(pair)?;
    let tape = Tape::new();
    let pred = tape.constant(flatten_patch(&pair.predicted).into_dyn());
    let gt = tape.constant(flatten_patch(&pair.ground_truth).into_dyn());
    Ok(weighted_mse_graph(&pred, &gt, p, true).value()[[0]])
}

/// Weighted MSE plus structural similarity loss over the whole patch.
pub fn total_loss(pair: &PatchPair) -> Result<f64> {
    let p = check_pair(pair)?;
    let tape = Tape::new();
    let pred = tape.constant(flatten_patch(&pair.predicted).into_dyn());
    let gt = tape.constant(flatten_patch(&pair.ground_truth).into_dyn());
    Ok(total_loss_graph(&pred, &gt, p, true, 1.0).value()[[0]])
}

fn ssim_window(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let vx = x.iter().map(|v| v * v).sum::<f64>() / n - mx * mx;
    let vy = y.iter().map(|v| v * v).sum::<f64>() / n - my * my;
    let cov = x.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / n - mx * my;
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// SSIM between two images or patches of the same shape: an 8x8 uniform
/// sliding window when both dimensions allow it, otherwise one whole-image
/// window. Averaged over channels and window positions.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, channels) = a.dim();
    let win = 8usize;
    let (wh, ww) = if h >= win && w >= win { (win, win) } else { (h, w) };
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let ac = a.index_axis(ndarray::Axis(2), ch);
        let bc = b.index_axis(ndarray::Axis(2), ch);
        for j in 0..=h - wh {
            for i in 0..=w - ww {
                let xs = ac.slice(ndarray::s![j..j + wh, i..i + ww]);
                let ys = bc.slice(ndarray::s![j..j + wh, i..i + ww]);
                total += ssim_window(xs, ys);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn ssim_images(a: &Image, b: &Image) -> Result<f64> {
    ssim(&a.rgb, &b.rgb)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range; identical
/// images report +inf.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.rgb.dim() != b.rgb.dim() {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.rgb.dim(),
            b.rgb.dim()
        )));
    }
    let n = a.rgb.len() as f64;
    let mse = a
        .rgb
        .iter()
        .zip(b.rgb.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Arr;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_patch(rng: &mut ChaCha8Rng, p: usize) -> Array3<f64> {
        Array3::from_shape_fn((p, p, 3), |_| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn identical_patches_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patch = rand_patch(&mut rng, 5);
        let pair = PatchPair {
            predicted: patch.clone(),
            ground_truth: patch,
            center: (10, 10),
        };
        assert_eq!(weighted_mse(&pair).unwrap(), 0.0);
        assert_eq!(total_loss(&pair).unwrap(), 0.0);
    }

    #[test]
    fn patch_weight_values() {
        let w = patch_weights(5);
        assert_eq!(w[12], 1.0); // center
        let corner = (-(8.0f64).sqrt()).exp();
        assert!((w[0] - corner).abs() < 1e-15);
        assert!((corner - 0.0591058).abs() < 1e-6);
    }

    #[test]
    fn patch_weights_have_rotational_symmetry() {
        for p in [3usize, 5, 7] {
            let w = patch_weights(p);
            for j in 0..p {
                for i in 0..p {
                    // quarter-turn about the center
                    let (rj, ri) = (i, p - 1 - j);
                    assert_eq!(w[j * p + i], w[rj * p + ri]);
                }
            }
        }
    }

    #[test]
    fn weighted_mse_positive_iff_different() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_patch(&mut rng, 5);
        let mut b = a.clone();
        b[[0, 0, 0]] += 1e-6;
        let pair = PatchPair {
            predicted: a,
            ground_truth: b,
            center: (2, 2),
        };
        assert!(weighted_mse(&pair).unwrap() > 0.0);
    }

    #[test]
    fn ssim_of_identical_inputs_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array3::from_shape_fn((16, 12, 3), |_| rng.gen_range(0.0..1.0));
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        let flat = Array3::from_elem((4, 4, 3), 0.25);
        assert_eq!(ssim(&flat, &flat).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = Array3::from_shape_fn((10, 10, 3), |_| rng.gen_range(0.0..1.0));
            let b = Array3::from_shape_fn((10, 10, 3), |_| rng.gen_range(0.0..1.0));
            let s1 = ssim(&a, &b).unwrap();
            let s2 = ssim(&b, &a).unwrap();
            assert!((s1 - s2).abs() < 1e-14);
            assert!((-1.0..=1.0).contains(&s1));
        }
    }

    #[test]
    fn ssim_matches_direct_formula_oracle() {
        // independent direct evaluation of the single-window formula
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 5;
        let a = rand_patch(&mut rng, p);
        let b = rand_patch(&mut rng, p);
        let mut expect = 0.0;
        for ch in 0..3 {
            let xs: Vec<f64> = (0..p * p).map(|k| a[[k / p, k % p, ch]]).collect();
            let ys: Vec<f64> = (0..p * p).map(|k| b[[k / p, k % p, ch]]).collect();
            let n = (p * p) as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
            let cov = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - mx) * (y - my))
                .sum::<f64>()
                / n;
            expect += ((2.0 * mx * my + 1e-4) * (2.0 * cov + 9e-4))
                / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
        }
        expect /= 3.0;
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        // the tape version agrees with the plain one on whole patches
        let tape = Tape::new();
        let pa = tape.constant(flatten_patch(&a).into_dyn());
        let pb = tape.constant(flatten_patch(&b).into_dyn());
        let graph = ssim_graph(&pa, &pb, p).value()[[0]];
        assert!((graph - expect).abs() < 1e-10);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = 5;
        let pred = flatten_patch(&rand_patch(&mut rng, p));
        let gt = flatten_patch(&rand_patch(&mut rng, p));
        let tape = Tape::new();
        let tp = tape.leaf(pred.clone().into_dyn(), true);
        let tg = tape.constant(gt.clone().into_dyn());
        total_loss_graph(&tp, &tg, p, true, 1.0).backward().unwrap();
        let grad = tp.grad().unwrap();
        let eval = |v: &Arr| -> f64 {
            let tape = Tape::new();
            let tp = tape.constant(v.clone());
            let tg = tape.constant(gt.clone().into_dyn());
            total_loss_graph(&tp, &tg, p, true, 1.0).value()[[0]]
        };
        let h = 1e-6;
        for k in 0..pred.len() {
            let mut plus: Arr = pred.clone().into_dyn();
            plus[IxDyn(&[k])] += h;
            let mut minus: Arr = pred.clone().into_dyn();
            minus[IxDyn(&[k])] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let g = grad[IxDyn(&[k])];
            assert!(
                (fd - g).abs() <= 1e-5 * 1.0f64.max(fd.abs()).max(g.abs()),
                "element {k}: fd {fd} vs tape {g}"
            );
        }
    }

    #[test]
    fn total_loss_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let pair = PatchPair {
                predicted: rand_patch(&mut rng, 5),
                ground_truth: rand_patch(&mut rng, 5),
                center: (0, 0),
            };
            assert!(total_loss(&pair).unwrap() >= 0.0);
        }
    }

    #[test]
    fn psnr_values() {
        let a = Image::zeros(4, 4);
        let mut b = Image::zeros(4, 4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        for v in b.rgb.iter_mut() {
            *v = 0.1;
        }
        // mse = 0.01 -> 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        for v in b.rgb.iter_mut() {
            *v = 1.0;
        }
        assert!((psnr(&a, &b).unwrap() - 0.0).abs() < 1e-12);
    }
}
