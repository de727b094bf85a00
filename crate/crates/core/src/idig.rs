//! Intermediate domain image generation.
//!
//! Pseudo images are convex pixel mixtures of a source and a target image,
//! `x~s = (1 - lambda) xs + lambda * resize(xt)` and symmetrically for the
//! target, with one `lambda` per mini-batch drawn from `U(0, lambda_max)`
//! and gated to zero with probability one half. The soft domain labels of
//! the mixtures are `(1 - lambda, lambda)` and `(lambda, 1 - lambda)`.
//!
//! The module also carries the energy-distance tools used to check that
//! mixing shrinks the squared-mean-gap form of the energy distance by the
//! factor `(1 - 2 * mean(lambda))^2`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{AnnotatedSample, BoxSet, ImageTensor};

/// Upper bound on `lambda_max`: beyond it the mixture is dominated by the
/// other domain's content and the source labels stop being trustworthy.
pub const LAMBDA_MAX_LIMIT: f64 = 0.5;

pub fn validate_lambda_max(lambda_max: f64) -> Result<()> {
    if !(lambda_max > 0.0 && lambda_max <= LAMBDA_MAX_LIMIT) {
        return Err(Error::validation(format!("lambda_max {lambda_max} outside (0, 0.5]")));
    }
    Ok(())
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=LAMBDA_MAX_LIMIT).contains(&lambda) {
        return Err(Error::validation(format!("lambda {lambda} outside [0, 0.5]")));
    }
    Ok(())
}

/// The per-batch mixing coefficient after the gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixCoefficient {
    pub lambda: f64,
    pub lambda_max: f64,
    pub gate_applied: bool,
}

impl MixCoefficient {
    /// Builds the coefficient from a unit uniform `u` (scaled to
    /// `lambda_max`) and the gate variate `gamma`.
    pub fn from_draws(lambda_max: f64, u: f64, gamma: f64) -> Result<Self> {
        validate_lambda_max(lambda_max)?;
        if gamma > 0.5 {
            Ok(Self { lambda: 0.0, lambda_max, gate_applied: true })
        } else {
            Ok(Self { lambda: u * lambda_max, lambda_max, gate_applied: false })
        }
    }

    /// Coefficient for training without mixing.
    pub fn disabled() -> Self {
        Self { lambda: 0.0, lambda_max: 0.0, gate_applied: false }
    }
}

/// Draws `lambda ~ U(0, lambda_max)` then `gamma ~ U(0, 1)`; `gamma > 0.5`
/// forces `lambda = 0`.
pub fn sample_effective_lambda(lambda_max: f64, rng: &mut impl Rng) -> Result<MixCoefficient> {
    validate_lambda_max(lambda_max)?;
    let u: f64 = rng.random();
    let gamma: f64 = rng.random();
    MixCoefficient::from_draws(lambda_max, u, gamma)
}

/// Two-way domain distribution `(p_source, p_target)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftDomainLabel {
    pub p_source: f64,
    pub p_target: f64,
}

impl SoftDomainLabel {
    /// Target component, the `mu` of the alignment losses.
    pub fn mu(&self) -> f64 {
        self.p_target
    }
}

pub fn soft_labels(lambda: f64) -> Result<(SoftDomainLabel, SoftDomainLabel)> {
    validate_lambda(lambda)?;
    Ok((
        SoftDomainLabel { p_source: 1.0 - lambda, p_target: lambda },
        SoftDomainLabel { p_source: lambda, p_target: 1.0 - lambda },
    ))
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, (src - lo as f64).min(1.0) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|y| coord(y, sy, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, sx, w)).collect();
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let p = img.plane(c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let (a, b) = (p[y0 * w + x0], p[y0 * w + x1]);
                let (c0, d) = (p[y1 * w + x0], p[y1 * w + x1]);
                let top = a + (b - a) * fx;
                let bot = c0 + (d - c0) * fx;
                data.push((top + (bot - top) * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::from_raw(out_h, out_w, data)
}

fn blend(first: &ImageTensor, second: &ImageTensor, lambda: f32) -> ImageTensor {
    let other = resize_bilinear(second, first.height(), first.width());
    let data = first
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| ((1.0 - lambda) * a + lambda * b).clamp(0.0, 1.0))
        .collect();
    ImageTensor::from_raw(first.height(), first.width(), data)
}

/// Mixes a source/target pair. Each output keeps its first operand's
/// shape; the other image is resized to match.
pub fn mix_images(xs: &ImageTensor, xt: &ImageTensor, lambda: f64) -> Result<(ImageTensor, ImageTensor)> {
    validate_lambda(lambda)?;
    if lambda == 0.0 {
        return Ok((xs.clone(), xt.clone()));
    }
    let l = lambda as f32;
    Ok((blend(xs, xt, l), blend(xt, xs, l)))
}

/// Pseudo source and target images of one mini-batch.
#[derive(Clone, Debug)]
pub struct MixBatch {
    pub pseudo_source: Vec<(ImageTensor, BoxSet)>,
    pub pseudo_target: Vec<ImageTensor>,
    pub coefficient: MixCoefficient,
    pub source_label: SoftDomainLabel,
    pub target_label: SoftDomainLabel,
}

/// Mixes position-paired source and target samples with one shared
/// coefficient. Source annotations are carried over untouched.
pub fn build_mix_batch(
    source: &[AnnotatedSample],
    target: &[AnnotatedSample],
    coefficient: MixCoefficient,
) -> Result<MixBatch> {
    if source.len() != target.len() {
        return Err(Error::validation(format!(
            "source batch has {} samples, target batch {}",
            source.len(),
            target.len()
        )));
    }
    let (source_label, target_label) = soft_labels(coefficient.lambda)?;
    let mut pseudo_source = Vec::with_capacity(source.len());
    let mut pseudo_target = Vec::with_capacity(target.len());
    for (s, t) in source.iter().zip(target) {
        let ann = s
            .annotation
            .clone()
            .ok_or_else(|| Error::validation(format!("source sample {} has no annotation", s.image_id)))?;
        let (ms, mt) = mix_images(&s.image, &t.image, coefficient.lambda)?;
        pseudo_source.push((ms, ann));
        pseudo_target.push(mt);
    }
    Ok(MixBatch { pseudo_source, pseudo_target, coefficient, source_label, target_label })
}

/// `count` draws of an isotropic unit Gaussian centred at `mean` in every
/// coordinate.
pub fn gaussian_samples(count: usize, dim: usize, mean: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..dim).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

/// Images as sample vectors for the energy checks: each is resized to
/// `side x side` and flattened channel-major.
pub fn flatten_images<'a>(images: impl IntoIterator<Item = &'a ImageTensor>, side: usize) -> Vec<Vec<f64>> {
    images
        .into_iter()
        .map(|img| resize_bilinear(img, side, side).data().iter().map(|&v| v as f64).collect())
        .collect()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation("energy distance needs non-empty sample sets"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::validation("sample vectors differ in dimension"));
    }
    Ok(d)
}

fn mean_vector(set: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for v in set {
        for (acc, &x) in m.iter_mut().zip(v) {
            *acc += x;
        }
    }
    let n = set.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `2 * |mean(a) - mean(b)|^2`, the energy distance at exponent 2.
pub fn energy_distance_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = check_sets(a, b)?;
    Ok(2.0 * sq_dist(&mean_vector(a, d), &mean_vector(b, d)))
}

/// Generalised energy distance with exponent `alpha` in `(0, 2]`:
/// `2 E|X - Y|^a - E|X - X'|^a - E|Y - Y'|^a`, estimated over all pairs
/// (V-statistic). Quadratic in the set sizes.
pub fn generalized_energy_distance(a: &[Vec<f64>], b: &[Vec<f64>], alpha: f64) -> Result<f64> {
    check_sets(a, b)?;
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::validation(format!("energy exponent {alpha} outside (0, 2]")));
    }
    let mean_pow = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for u in x {
            for v in y {
                s += sq_dist(u, v).powf(alpha / 2.0);
            }
        }
        s / (x.len() * y.len()) as f64
    };
    Ok(2.0 * mean_pow(a, b) - mean_pow(a, a) - mean_pow(b, b))
}

/// Result of one Monte-Carlo reduction check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub lambda_max: f64,
    pub lambda_bar: f64,
    pub ratio_predicted: f64,
    pub ratio_measured: f64,
    pub n_mix: usize,
    pub eps2_original: f64,
    pub eps2_mixed: f64,
}

impl ReductionReport {
    pub fn relative_error(&self) -> f64 {
        (self.ratio_measured - self.ratio_predicted).abs() / self.ratio_predicted
    }
}

/// Predicted shrink factor `(1 - 2 * lambda_bar)^2` with
/// `lambda_bar = lambda_max / 2`.
pub fn predicted_ratio(lambda_max: f64) -> f64 {
    (1.0 - lambda_max).powi(2)
}

/// Draws `n_mix` random (source, target) pairs, mixes each with its own
/// `lambda ~ U(0, lambda_max)` (no gate), and compares the energy distance
/// of the mixed sets with that of the originals.
pub fn verify_reduction(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    lambda_max: f64,
    n_mix: usize,
    rng: &mut impl Rng,
) -> Result<ReductionReport> {
    validate_lambda_max(lambda_max)?;
    let d = check_sets(source, target)?;
    if n_mix == 0 {
        return Err(Error::validation("n_mix must be positive"));
    }
    let eps2_original = energy_distance_sq(source, target)?;
    if eps2_original <= f64::MIN_POSITIVE {
        return Err(Error::Degenerate("source and target means coincide; the reduction ratio is undefined".into()));
    }
    let mut sum_s = vec![0.0; d];
    let mut sum_t = vec![0.0; d];
    for _ in 0..n_mix {
        let xs = &source[rng.random_range(0..source.len())];
        let xt = &target[rng.random_range(0..target.len())];
        let lambda = rng.random::<f64>() * lambda_max;
        for k in 0..d {
            sum_s[k] += (1.0 - lambda) * xs[k] + lambda * xt[k];
            sum_t[k] += (1.0 - lambda) * xt[k] + lambda * xs[k];
        }
    }
    let n = n_mix as f64;
    let gap: f64 = sum_s.iter().zip(&sum_t).map(|(s, t)| ((s - t) / n).powi(2)).sum();
    let eps2_mixed = 2.0 * gap;
    Ok(ReductionReport {
        lambda_max,
        lambda_bar: 0.5 * lambda_max,
        ratio_predicted: predicted_ratio(lambda_max),
        ratio_measured: eps2_mixed / eps2_original,
        n_mix,
        eps2_original,
        eps2_mixed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::synthdata::Domain;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn gaussian_set(rng: &mut impl Rng, n: usize, d: usize, mean: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect()).collect()
    }

    #[test]
    fn gate_above_half_forces_zero() {
        let c = MixCoefficient::from_draws(0.5, 0.9, 0.7).unwrap();
        assert_eq!(c.lambda, 0.0);
        assert!(c.gate_applied);
    }

    #[test]
    fn open_gate_scales_uniform() {
        let c = MixCoefficient::from_draws(0.5, 0.3, 0.2).unwrap();
        assert_eq!(c.lambda, 0.15);
        assert!(!c.gate_applied);
    }

    #[test]
    fn lambda_max_bounds() {
        let mut rng = stream(0, "t");
        for bad in [0.0, -0.1, 0.51, f64::NAN] {
            assert!(sample_effective_lambda(bad, &mut rng).unwrap_err().is_validation());
        }
        assert!(sample_effective_lambda(0.5, &mut rng).is_ok());
    }

    #[test]
    fn two_stage_sampling_mean() {
        // oracle: E[lambda] = P(gate open) * lambda_max / 2 = 0.5 * 0.25
        let mut rng = stream(1, "lambda-mean");
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_effective_lambda(0.5, &mut rng).unwrap().lambda).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        // Var = E[l^2] - E[l]^2 = 0.5 * 0.25/3 - 0.125^2
        let sd = (0.5 * 0.25 / 3.0 - 0.125f64.powi(2)).sqrt() / (n as f64).sqrt();
        assert!((mean - 0.125).abs() < 3.0 * sd, "mean {mean} sd {sd}");
        let gated = draws.iter().filter(|&&l| l == 0.0).count() as f64 / n as f64;
        assert!((gated - 0.5).abs() < 0.01);
    }

    #[test]
    fn soft_label_values() {
        let (s, t) = soft_labels(0.0).unwrap();
        assert_eq!((s.p_source, s.p_target, t.p_source, t.p_target), (1.0, 0.0, 0.0, 1.0));
        let (s, _) = soft_labels(0.3).unwrap();
        assert_eq!((s.p_source, s.p_target), (0.7, 0.3));
        let (s, t) = soft_labels(0.5).unwrap();
        assert_eq!(s, t);
        assert_eq!(s.p_source, 0.5);
        assert!(soft_labels(0.6).is_err());
    }

    #[test]
    fn mixing_constants() {
        let a = ImageTensor::filled(16, 16, [0.4; 3]).unwrap();
        let b = ImageTensor::filled(16, 16, [0.8; 3]).unwrap();
        let (s, t) = mix_images(&a, &b, 0.25).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(t.data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        let (s0, t0) = mix_images(&a, &b, 0.0).unwrap();
        assert_eq!((s0, t0), (a, b));
    }

    #[test]
    fn mixing_keeps_first_operand_shape() {
        let a = ImageTensor::filled(32, 32, [0.1, 0.2, 0.3]).unwrap();
        let b = ImageTensor::filled(64, 48, [0.9, 0.8, 0.7]).unwrap();
        let (s, t) = mix_images(&a, &b, 0.3).unwrap();
        assert_eq!((s.height(), s.width()), (32, 32));
        assert_eq!((t.height(), t.width()), (64, 48));
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let a = ImageTensor::filled(20, 30, [0.25, 0.5, 0.75]).unwrap();
        let r = resize_bilinear(&a, 17, 41);
        for c in 0..3 {
            assert!(r.plane(c).iter().all(|&v| (v - [0.25, 0.5, 0.75][c]).abs() < 1e-7));
        }
    }

    #[test]
    fn mix_batch_preserves_annotations_and_labels() {
        let mk = |v: f32, domain| AnnotatedSample {
            image_id: "x".into(),
            image: ImageTensor::filled(16, 16, [v; 3]).unwrap(),
            annotation: Some(BoxSet { boxes: vec![[1.0, 2.0, 5.5, 9.25]], class_ids: vec![2] }),
            domain,
        };
        let src = vec![mk(0.2, Domain::Source)];
        let tgt = vec![mk(0.6, Domain::Target).unlabeled()];
        let coef = MixCoefficient::from_draws(0.5, 0.8, 0.1).unwrap();
        let mb = build_mix_batch(&src, &tgt, coef).unwrap();
        assert_eq!(Some(&mb.pseudo_source[0].1), src[0].annotation.as_ref());
        assert_eq!(mb.source_label.p_target, 0.4);
        assert_eq!(mb.target_label.p_target, 0.6);
    }

    #[test]
    fn energy_distance_cases() {
        let a = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        assert_eq!(energy_distance_sq(&a, &a).unwrap(), 0.0);
        let zero = vec![vec![-1.0], vec![1.0]];
        let one = vec![vec![1.0], vec![1.0]];
        assert!((energy_distance_sq(&zero, &one).unwrap() - 2.0).abs() < 1e-15);
        assert!(energy_distance_sq(&a, &one).unwrap_err().is_validation());
    }

    #[test]
    fn energy_distance_gaussian_convergence() {
        let mut rng = stream(3, "gauss");
        let a = gaussian_set(&mut rng, 100_000, 1, 0.0);
        let b = gaussian_set(&mut rng, 100_000, 1, 3.0);
        let e = energy_distance_sq(&a, &b).unwrap();
        assert!((e - 18.0).abs() / 18.0 < 0.02, "{e}");
    }

    #[test]
    fn general_estimator_is_positive_for_shifted_sets() {
        let mut rng = stream(4, "gen");
        let a = gaussian_set(&mut rng, 200, 2, 0.0);
        let b = gaussian_set(&mut rng, 200, 2, 1.0);
        let e1 = generalized_energy_distance(&a, &b, 1.0).unwrap();
        assert!(e1 > 0.0);
        assert!(generalized_energy_distance(&a, &b, 2.5).is_err());
    }

    #[test]
    fn predicted_ratios() {
        assert_eq!(predicted_ratio(0.5), 0.25);
        assert!((predicted_ratio(0.1) - 0.81).abs() < 1e-15);
        assert!((predicted_ratio(1e-12) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn reduction_on_gaussians() {
        let mut rng = stream(5, "red");
        let a = gaussian_set(&mut rng, 5_000, 3, 0.0);
        let b = gaussian_set(&mut rng, 5_000, 3, 3.0);
        let r = verify_reduction(&a, &b, 0.4, 100_000, &mut rng).unwrap();
        assert!((r.ratio_predicted - 0.36).abs() < 1e-12);
        assert!(r.relative_error() < 0.05, "{r:?}");
    }

    #[test]
    fn reduction_rejects_equal_means() {
        let a = vec![vec![1.0], vec![-1.0]];
        let b = vec![vec![0.0]];
        let mut rng = stream(6, "deg");
        assert!(matches!(verify_reduction(&a, &b, 0.5, 100, &mut rng), Err(Error::Degenerate(_))));
    }

    fn small_image() -> impl Strategy<Value = ImageTensor> {
        (16usize..24, 16usize..24).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..=255, 3 * h * w).prop_map(move |v| {
                ImageTensor::new(h, w, v.into_iter().map(|x| x as f32 / 255.0).collect()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn mixing_stays_in_unit_range(a in small_image(), b in small_image(), lambda in 0.0f64..=0.5) {
            let (s, t) = mix_images(&a, &b, lambda).unwrap();
            prop_assert!(s.data().iter().chain(t.data()).all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn equal_shape_mixing_conserves_pair_sum(
            v in proptest::collection::vec(0u8..=255, 2 * 3 * 16 * 16),
            lambda in 0.0f64..=0.5,
        ) {
            // dyadic lambdas make the float sums exact
            let lambda = (lambda * 64.0).round() / 64.0;
            let (va, vb) = v.split_at(3 * 256);
            let a = ImageTensor::new(16, 16, va.iter().map(|&x| x as f32 / 256.0).collect()).unwrap();
            let b = ImageTensor::new(16, 16, vb.iter().map(|&x| x as f32 / 256.0).collect()).unwrap();
            let (s, t) = mix_images(&a, &b, lambda).unwrap();
            for i in 0..a.data().len() {
                prop_assert_eq!(s.data()[i] + t.data()[i], a.data()[i] + b.data()[i]);
            }
        }

        #[test]
        fn general_estimator_at_two_matches_closed_form(
            a in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..12),
            b in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..12),
        ) {
            let closed = energy_distance_sq(&a, &b).unwrap();
            let general = generalized_energy_distance(&a, &b, 2.0).unwrap();
            prop_assert!((closed - general).abs() < 1e-9 * (1.0 + closed.abs()));
        }
    }
}
