use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::si::ConvLayer;
use crate::network::CHANNEL_CAP;
use crate::numerics::{Bound, NormKind, ParamSet, Var, LEAKY_SLOPE, NORM_EPSILON};

/// Conditional patch classifier over `concat(source, saliency, candidate)`.
///
/// `n_layers` stride-2 stages, one stride-1 stage, then a stride-1 logit
/// head; all kernels 4x4 with padding 1. The first stage is unnormalized.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    in_channels: usize,
    params: ParamSet,
    layers: Vec<ConvLayer>,
    head: ConvLayer,
    norm: NormKind,
}

impl PatchDiscriminator {
    pub const KERNEL: usize = 4;

    pub fn new(in_channels: usize, base_channels: usize, n_layers: usize, norm: NormKind, seed: u64) -> Result<Self> {
        if in_channels == 0 || base_channels == 0 || n_layers == 0 {
            return Err(Error::invalid("discriminator dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(n_layers + 1);
        let mut cin = in_channels;
        for i in 0..=n_layers {
            let cout = (base_channels << i.min(16)).min(base_channels * CHANNEL_CAP);
            let stride = if i < n_layers { 2 } else { 1 };
            layers.push(ConvLayer::new(&mut params, &format!("l{i}"), cin, cout, Self::KERNEL, stride, 1, &mut rng));
            cin = cout;
        }
        let head = ConvLayer::new(&mut params, "head", cin, 1, Self::KERNEL, 1, 1, &mut rng);
        Ok(Self {
            in_channels,
            params,
            layers,
            head,
            norm,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn head_bias(&self) -> crate::numerics::ParamId {
        self.head.bias
    }

    /// Logit map `[1, 1, h, w]` for the given conditioning and candidate.
    /// All three inputs are `[1, c, H, W]`.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        source: Var<'t>,
        saliency: Var<'t>,
        candidate: Var<'t>,
    ) -> Result<Var<'t>> {
        let spatial = |v: &Var<'t>| {
            let s = v.shape();
            if s.len() == 4 && s[0] == 1 {
                Ok((s[2], s[3]))
            } else {
                Err(Error::shape(format!("discriminator input must be [1, c, H, W], got {s:?}")))
            }
        };
        let size = spatial(&source)?;
        if spatial(&saliency)? != size || spatial(&candidate)? != size {
            return Err(Error::shape(format!(
                "discriminator inputs disagree: {:?} / {:?} / {:?}",
                source.shape(),
                saliency.shape(),
                candidate.shape()
            )));
        }
        let mut x = Var::concat(&[source, saliency, candidate], 1)?;
        if x.shape()[1] != self.in_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} stacked channels, got {}",
                self.in_channels,
                x.shape()[1]
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(bound, x)?;
            if i > 0 {
                x = x.normalize(self.norm, NORM_EPSILON)?;
            }
            x = x.leaky_relu(LEAKY_SLOPE);
        }
        self.head.forward(bound, x)
    }
}
