//! Adversarial alignment: gradient reversal, the pyramid-shared feature
//! discriminator and the region-level instance discriminator, trained
//! against soft domain labels.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamStore};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` in the losses.
pub const PROB_CLAMP: f64 = 1e-7;
/// Index of the target-domain logit.
pub const TARGET_LOGIT: usize = 1;

/// Identity forward, gradient times `-scale` backward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReversal {
    pub scale: f64,
}

impl GradientReversal {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::validation(format!("gradient reversal scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        g.grl(x, T::lit(self.scale))
    }
}

/// `grl_apply` with a validated scale.
pub fn grl_apply<T: Real>(g: &mut Graph<T>, x: Var, scale: f64) -> Result<Var> {
    Ok(GradientReversal::new(scale)?.apply(g, x))
}

/// Three 3x3 conv + batch-norm + ReLU blocks, global average pooling and a
/// two-way classifier. One instance serves every pyramid level.
#[derive(Clone, Debug)]
pub struct FeatureDiscriminator {
    pub in_channels: usize,
    pub hidden: usize,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
    fc: Linear,
}

impl FeatureDiscriminator {
    pub fn new(in_channels: usize, hidden: usize) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c = in_channels;
        for i in 0..3 {
            convs.push(Conv2d::new(format!("align.feature.conv{i}"), c, hidden, 3, 1));
            norms.push(BatchNorm2d::new(format!("align.feature.bn{i}"), hidden));
            c = hidden;
        }
        Self { in_channels, hidden, convs, norms, fc: Linear::new("align.feature.fc", hidden, 2) }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for (c, n) in self.convs.iter().zip(&self.norms) {
            c.init(store, rng);
            n.init(store);
        }
        self.fc.init_with(store, rng, 0.01, 0.0);
    }

    /// Final-layer parameter names.
    pub fn output_layer(&self) -> [String; 2] {
        [self.fc.weight_name(), self.fc.bias_name()]
    }

    /// Logits `[N, 2]` for an `[N, C, H, W]` map.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, train: bool) -> Result<Var> {
        let (_, c, _, _) = g.value(x).nchw();
        if c != self.in_channels {
            return Err(Error::validation(format!(
                "feature discriminator expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let y = conv.forward(g, store, h);
            let y = norm.forward(g, store, y, train);
            h = g.relu(y);
        }
        let pooled = g.global_avg_pool(h);
        Ok(self.fc.forward(g, store, pooled))
    }
}

/// Two fully connected layers over region features.
#[derive(Clone, Debug)]
pub struct InstanceDiscriminator {
    pub in_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl InstanceDiscriminator {
    pub fn new(in_dim: usize, hidden: usize) -> Self {
        Self {
            in_dim,
            fc1: Linear::new("align.instance.fc1", in_dim, hidden),
            fc2: Linear::new("align.instance.fc2", hidden, 2),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.fc1.init(store, rng);
        self.fc2.init_with(store, rng, 0.01, 0.0);
    }

    pub fn output_layer(&self) -> [String; 2] {
        [self.fc2.weight_name(), self.fc2.bias_name()]
    }

    /// Logits `[R, 2]` for `[R, in_dim]` features.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::validation(format!(
                "instance discriminator expects [R, {}], got {shape:?}",
                self.in_dim
            )));
        }
        let h = self.fc1.forward(g, store, x);
        let h = g.relu(h);
        Ok(self.fc2.forward(g, store, h))
    }
}

/// Target-domain probability `[N]` per pyramid level, with gradient
/// reversal in front of the shared discriminator.
pub fn discriminate_features<T: Real>(
    disc: &FeatureDiscriminator,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    levels: &[Var],
    grl: &GradientReversal,
    train: bool,
) -> Result<Vec<Var>> {
    levels
        .iter()
        .map(|&level| {
            let r = grl.apply(g, level);
            let logits = disc.forward(g, store, r, train)?;
            Ok(g.softmax_component(logits, TARGET_LOGIT))
        })
        .collect()
}

/// `-mean[mu log p + (1 - mu) log(1 - p)]` over all images and levels.
/// `mu` holds one label per image (batch row).
pub fn feature_alignment_loss<T: Real>(g: &mut Graph<T>, p_levels: &[Var], mu: &[f64]) -> Result<Var> {
    if p_levels.is_empty() {
        return Err(Error::validation("no pyramid levels to align"));
    }
    for &p in p_levels {
        if g.value(p).numel() != mu.len() {
            return Err(Error::validation("one soft label per image is required"));
        }
    }
    let labels: Vec<T> = p_levels.iter().flat_map(|_| mu.iter().map(|&m| T::lit(m))).collect();
    let all = if p_levels.len() == 1 { p_levels[0] } else { g.concat0(p_levels) };
    Ok(g.soft_bce_mean(all, labels, PROB_CLAMP))
}

/// Target-domain probability `[R]` per region, with gradient reversal in
/// front of the discriminator.
pub fn discriminate_instances<T: Real>(
    disc: &InstanceDiscriminator,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: Var,
    grl: &GradientReversal,
) -> Result<Var> {
    let r = grl.apply(g, features);
    let logits = disc.forward(g, store, r)?;
    Ok(g.softmax_component(logits, TARGET_LOGIT))
}

/// Instance loss; `None` (contributing zero) when there are no proposals.
pub fn instance_alignment_loss<T: Real>(g: &mut Graph<T>, p: Var, mu: &[f64]) -> Result<Option<Var>> {
    if g.value(p).numel() != mu.len() {
        return Err(Error::validation("one soft label per proposal is required"));
    }
    if mu.is_empty() {
        return Ok(None);
    }
    let labels = mu.iter().map(|&m| T::lit(m)).collect();
    Ok(Some(g.soft_bce_mean(p, labels, PROB_CLAMP)))
}

/// Scalar soft-label cross-entropy with the same clamping as the losses.
pub fn domain_bce(mu: f64, p: f64) -> f64 {
    let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(mu * q.ln() + (1.0 - mu) * (1.0 - q).ln())
}

/// An empty `[0, dim]` feature block, for uniform handling of empty sets.
pub fn empty_features<T: Real>(g: &mut Graph<T>, dim: usize) -> Var {
    g.constant(Tensor::zeros(&[0, dim]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, c, h, w], (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn scalar_loss_values() {
        assert!((domain_bce(0.5, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((domain_bce(0.3, 0.7) - 0.949_783_446_209_774_9).abs() < 1e-9);
        assert!((domain_bce(0.2, 0.6) - 0.835_197_710_252_522_2).abs() < 1e-9);
        assert!(domain_bce(1.0, 1.0 - 1e-12) < 1e-6);
        assert!(domain_bce(0.0, 1e-12) < 1e-6);
        for p in [0.1, 0.3, 0.5, 0.77] {
            assert!(domain_bce(0.5, p) >= std::f64::consts::LN_2 - 1e-15);
        }
    }

    #[test]
    fn loss_symmetry() {
        for (mu, p) in [(0.3, 0.7), (0.1, 0.2), (0.9, 0.45)] {
            assert!((domain_bce(mu, p) - domain_bce(1.0 - mu, 1.0 - p)).abs() < 1e-12);
        }
    }

    #[test]
    fn grl_rejects_non_positive_scale() {
        assert!(GradientReversal::new(0.0).is_err());
        assert!(GradientReversal::new(-1.0).is_err());
        assert!(GradientReversal::new(f64::NAN).is_err());
    }

    #[test]
    fn zero_output_layer_gives_half_everywhere() {
        let disc = FeatureDiscriminator::new(8, 6);
        let mut store = ParamStore::<f64>::default();
        disc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for n in disc.output_layer() {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let levels: Vec<Var> = [8, 4, 2, 1].iter().map(|&s| g.leaf(map(3, 8, s, s, s as u64))).collect();
        let grl = GradientReversal::new(1.0).unwrap();
        let p = discriminate_features(&disc, &mut g, &store, &levels, &grl, true).unwrap();
        assert_eq!(p.len(), 4);
        for v in p {
            assert_eq!(g.value(v).shape(), &[3]);
            assert!(g.value(v).data().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn shared_weights_give_identical_outputs_on_identical_content() {
        let disc = FeatureDiscriminator::new(4, 5);
        let mut store = ParamStore::<f64>::default();
        disc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let a = g.constant(map(2, 4, 6, 6, 9));
        let b = g.constant(map(2, 4, 6, 6, 9));
        let grl = GradientReversal::new(1.0).unwrap();
        let p = discriminate_features(&disc, &mut g, &store, &[a, b], &grl, false).unwrap();
        assert_eq!(g.value(p[0]), g.value(p[1]));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let disc = FeatureDiscriminator::new(4, 5);
        let mut store = ParamStore::<f64>::default();
        disc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let a = g.constant(map(1, 3, 4, 4, 0));
        let grl = GradientReversal::new(1.0).unwrap();
        assert!(discriminate_features(&disc, &mut g, &store, &[a], &grl, false).unwrap_err().is_validation());
    }

    #[test]
    fn feature_loss_averages_levels_and_images() {
        let mut g = Graph::<f64>::new();
        let p0 = g.leaf(Tensor::from_vec(&[2], vec![0.7, 0.4]));
        let p1 = g.leaf(Tensor::from_vec(&[2], vec![0.2, 0.9]));
        let mu = [0.3, 0.8];
        let l = feature_alignment_loss(&mut g, &[p0, p1], &mu).unwrap();
        let want = (domain_bce(0.3, 0.7) + domain_bce(0.8, 0.4) + domain_bce(0.3, 0.2) + domain_bce(0.8, 0.9)) / 4.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn hard_labels_reduce_to_binary_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::from_vec(&[2], vec![0.25, 0.6]));
        let l = feature_alignment_loss(&mut g, &[p], &[0.0, 1.0]).unwrap();
        let want = -((0.75f64).ln() + (0.6f64).ln()) / 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn instance_path_preserves_count_and_handles_empty() {
        let disc = InstanceDiscriminator::new(16, 8);
        let mut store = ParamStore::<f64>::default();
        disc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        for n in disc.output_layer() {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let grl = GradientReversal::new(1.0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(map(1, 1, 7, 16, 4).reshape(&[7, 16]));
        let p = discriminate_instances(&disc, &mut g, &store, x, &grl).unwrap();
        assert_eq!(g.value(p).shape(), &[7]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
        let e = empty_features(&mut g, 16);
        let pe = discriminate_instances(&disc, &mut g, &store, e, &grl).unwrap();
        assert!(instance_alignment_loss(&mut g, pe, &[]).unwrap().is_none());
        let l = instance_alignment_loss(&mut g, p, &[0.2; 7]).unwrap().unwrap();
        assert!((g.value(l).item() - domain_bce(0.2, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn reversed_gradient_is_minus_scale_times_plain_gradient() {
        // micro network: conv -> relu -> discriminator, loss L_f
        let up = Conv2d::new("up", 2, 4, 3, 1);
        let disc = FeatureDiscriminator::new(4, 3);
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        up.init(&mut store, &mut rng);
        disc.init(&mut store, &mut rng);
        let x = map(2, 2, 5, 5, 8);
        let mu = [0.3, 0.9];
        let scale = 0.5;
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>, reverse: bool| {
            let xv = g.constant(x.clone());
            let h = up.forward(g, s, xv);
            let h = g.relu(h);
            let h = if reverse { GradientReversal::new(scale).unwrap().apply(g, h) } else { h };
            let logits = disc.forward(g, s, h, false).unwrap();
            let p = g.softmax_component(logits, TARGET_LOGIT);
            feature_alignment_loss(g, &[p], &mu).unwrap()
        };
        let grads = |reverse: bool| {
            let mut g = Graph::new();
            let l = build(&mut g, &store, reverse);
            g.param_grads(&g.backward(l))
        };
        let (rev, plain) = (grads(true), grads(false));
        // finite differences of the forward pass (identical with or without the reversal)
        let h = 1e-5;
        for (i, &analytic) in rev["up.weight"].data().iter().enumerate().take(12) {
            let mut s = store.clone();
            s.get_mut("up.weight").unwrap().data_mut()[i] += h;
            let mut g = Graph::new();
            let lp = build(&mut g, &s, true);
            let fp = g.value(lp).item();
            s.get_mut("up.weight").unwrap().data_mut()[i] -= 2.0 * h;
            let mut g = Graph::new();
            let lm = build(&mut g, &s, true);
            let fd = (fp - g.value(lm).item()) / (2.0 * h);
            let want = -scale * fd;
            assert!((analytic - want).abs() <= 1e-3 * want.abs().max(1e-8), "{analytic} vs {want}");
            assert_eq!(analytic, -scale * plain["up.weight"].data()[i]);
        }
        // the discriminator itself is downstream of the reversal and unaffected
        assert_eq!(rev["align.feature.fc.weight"], plain["align.feature.fc.weight"]);
    }
}
