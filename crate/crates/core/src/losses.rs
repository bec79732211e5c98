//! Training objective: adversarial, pixel, feature, parsing, and graph terms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::NUM_CLASSES;
use crate::numerics::{Bound, ParamSet, Tape, Tensor, Var};
use crate::network::ConvLayer;

/// Probability clamp used by the parsing cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;

/// Multipliers of the non-adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub delta: f64,
    pub eta: f64,
    pub tau: f64,
    pub xi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            lambda: 10.0,
            delta: 15.0,
            eta: 100.0,
            tau: 100.0,
            xi: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("delta", self.delta),
            ("eta", self.eta),
            ("tau", self.tau),
            ("xi", self.xi),
        ];
        for (key, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("weights.{key}"), format!("{v} is not a finite non-negative number")));
            }
        }
        Ok(())
    }
}

/// Adversarial criterion applied per patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Sigmoid cross-entropy on logits.
    #[default]
    CrossEntropy,
    /// Squared distance of logits to 1 (real) / 0 (fake).
    LeastSquares,
}

/// Discriminator loss from the patch logits of a real and a fake candidate.
pub fn discriminator_loss<'t>(real: Var<'t>, fake: Var<'t>, mode: GanMode) -> Result<Var<'t>> {
    match mode {
        GanMode::CrossEntropy => Ok(real.neg().softplus().mean().add(fake.softplus().mean())?),
        GanMode::LeastSquares => Ok(real.add_scalar(-1.0).square().mean().add(fake.square().mean())?),
    }
}

/// Generator loss from the patch logits of its own output.
pub fn generator_loss(fake: Var<'_>, mode: GanMode) -> Var<'_> {
    match mode {
        GanMode::CrossEntropy => fake.neg().softplus().mean(),
        GanMode::LeastSquares => fake.add_scalar(-1.0).square().mean(),
    }
}

/// Both adversarial losses for one discriminator call pair. The fake
/// candidate is detached inside the discriminator loss.
pub fn adversarial_losses<'t>(
    discriminate: impl Fn(Var<'t>) -> Result<Var<'t>>,
    real: Var<'t>,
    fake: Var<'t>,
    mode: GanMode,
) -> Result<(Var<'t>, Var<'t>)> {
    let d_real = discriminate(real)?;
    let d_fake_detached = discriminate(fake.detach())?;
    let loss_d = discriminator_loss(d_real, d_fake_detached, mode)?;
    let loss_g = generator_loss(discriminate(fake)?, mode);
    Ok((loss_d, loss_g))
}

/// Mean absolute difference.
pub fn content_l1<'t>(target: Var<'t>, fake: Var<'t>) -> Result<Var<'t>> {
    Ok(fake.sub(target)?.abs().mean())
}

/// Fixed two-stage convolutional feature stack.
///
/// Each stage is `conv3x3 -> relu -> avgpool2`; the pooled outputs are the
/// taps. Weights use a fan-in scaled Gaussian so activations keep unit order.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    in_channels: usize,
    params: ParamSet,
    stages: [ConvLayer; 2],
}

impl FeatureExtractor {
    pub const WIDTHS: [usize; 2] = [8, 16];

    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let [w1, w2] = Self::WIDTHS;
        let stages = [
            fixed_conv(&mut params, "feat1", in_channels, w1, &mut rng),
            fixed_conv(&mut params, "feat2", w1, w2, &mut rng),
        ];
        Self {
            in_channels,
            params,
            stages,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Tap outputs for a `[1, C, H, W]` image with H, W divisible by 4.
    pub fn taps<'t>(&self, bound: &Bound<'t>, image: Var<'t>) -> Result<[Var<'t>; 2]> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(format!(
                "feature extractor expects [1, {}, H, W], got {shape:?}",
                self.in_channels
            )));
        }
        let t1 = self.stages[0].forward(bound, image)?.relu().avg_pool2d(2)?;
        let t2 = self.stages[1].forward(bound, t1)?.relu().avg_pool2d(2)?;
        Ok([t1, t2])
    }

    /// Embedding of a `[C, H, W]` image: spatial means of both taps.
    pub fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("embed expects [C, H, W], got {s:?}")));
        }
        let x = tape.constant(image.reshape(&[1, s[0], s[1], s[2]])?);
        let mut out = Vec::with_capacity(Self::WIDTHS.iter().sum());
        for tap in self.taps(&bound, x)? {
            out.extend_from_slice(tap.mean_axes(&[0, 2, 3])?.value().data());
        }
        Ok(out)
    }
}

fn fixed_conv(params: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
    let layer = ConvLayer::new(params, name, cin, cout, 3, 1, 1, rng);
    let std = (2.0 / (cin * 9) as f64).sqrt();
    params.get_mut(layer.weight).value = Tensor::randn(&[cout, cin, 3, 3], std, rng);
    layer
}

/// Sum over both taps of the mean squared feature difference.
pub fn perceptual<'t>(
    extractor: &FeatureExtractor,
    bound: &Bound<'t>,
    target: Var<'t>,
    fake: Var<'t>,
) -> Result<Var<'t>> {
    let a = extractor.taps(bound, target)?;
    let b = extractor.taps(bound, fake)?;
    let l1 = a[0].sub(b[0])?.square().mean();
    let l2 = a[1].sub(b[1])?.square().mean();
    l1.add(l2)
}

/// Fixed per-pixel 12-way soft classifier: `conv3x3 -> relu -> conv3x3 -> softmax`.
#[derive(Clone, Debug)]
pub struct ParsingOracle {
    in_channels: usize,
    params: ParamSet,
    hidden: ConvLayer,
    logits: ConvLayer,
}

impl ParsingOracle {
    pub const HIDDEN: usize = 16;

    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let hidden = fixed_conv(&mut params, "parse1", in_channels, Self::HIDDEN, &mut rng);
        let logits = fixed_conv(&mut params, "parse2", Self::HIDDEN, NUM_CLASSES, &mut rng);
        Self {
            in_channels,
            params,
            hidden,
            logits,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Class probabilities `[1, 12, H, W]`.
    pub fn probabilities<'t>(&self, bound: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(format!(
                "parsing oracle expects [1, {}, H, W], got {shape:?}",
                self.in_channels
            )));
        }
        let h = self.hidden.forward(bound, image)?.relu();
        self.logits.forward(bound, h)?.softmax(1)
    }
}

/// Mean per-pixel, per-class binary cross-entropy of the fake's parse
/// against the (constant) parse of the target.
pub fn bce_parsing<'t>(
    oracle: &ParsingOracle,
    bound: &Bound<'t>,
    target: Var<'t>,
    fake: Var<'t>,
) -> Result<Var<'t>> {
    let p_target = oracle.probabilities(bound, target.detach())?.value();
    oracle.probabilities(bound, fake)?.binary_cross_entropy(&p_target, BCE_EPSILON)
}

/// The generator-side terms of one step. `ict` is absent at stage 0.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub gan: Var<'t>,
    pub content: Var<'t>,
    pub perceptual: Var<'t>,
    pub bce: Var<'t>,
    pub iag: Var<'t>,
    pub itg: Var<'t>,
    pub ict: Option<Var<'t>>,
}

/// `gan + alpha*content + lambda*perceptual + delta*bce + eta*iag + tau*itg + xi*ict`.
pub fn total_objective<'t>(terms: &LossTerms<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    let mut total = terms.gan;
    let weighted = [
        (terms.content, weights.alpha),
        (terms.perceptual, weights.lambda),
        (terms.bce, weights.delta),
        (terms.iag, weights.eta),
        (terms.itg, weights.tau),
    ];
    for (term, w) in weighted {
        total = total.add(term.scale(w))?;
    }
    if let Some(ict) = terms.ict {
        total = total.add(ict.scale(weights.xi))?;
    }
    Ok(total)
}
