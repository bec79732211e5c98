//! Layout-conditioned normalization and the residual block built on it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layout::{SemanticLayout, NUM_CLASSES};
use crate::numerics::{conv2d_onehot, Bound, NormKind, ParamId, ParamSet, Var, INIT_STD, NORM_EPSILON};

/// Convolution weights and bias registered in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: params.add_randn(format!("{name}.w"), &[cout, cin, kernel, kernel], INIT_STD, rng),
            bias: params.add_zeros(format!("{name}.b"), &[cout]),
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(
            bound.get(self.weight),
            Some(bound.get(self.bias)),
            self.stride,
            self.padding,
        )
    }
}

/// Produces per-pixel scale and shift from the layout and applies them to
/// the normalized activation: `gamma(S) * norm(x) + beta(S)`.
#[derive(Clone, Debug)]
pub struct SIModule {
    pub channels: usize,
    pub shared: ConvLayer,
    pub gamma: ConvLayer,
    pub beta: ConvLayer,
    pub norm: NormKind,
}

impl SIModule {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        hidden: usize,
        norm: NormKind,
        rng: &mut R,
    ) -> Self {
        Self {
            channels,
            shared: ConvLayer::new(params, &format!("{name}.shared"), NUM_CLASSES, hidden, 3, 1, 1, rng),
            gamma: ConvLayer::new(params, &format!("{name}.gamma"), hidden, channels, 3, 1, 1, rng),
            beta: ConvLayer::new(params, &format!("{name}.beta"), hidden, channels, 3, 1, 1, rng),
            norm,
        }
    }

    /// Scale and shift maps, each `[1, C, h, w]`.
    pub fn modulation<'t>(
        &self,
        bound: &Bound<'t>,
        layout: &SemanticLayout,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let hidden = conv2d_onehot(
            layout.as_onehot_map(),
            bound.get(self.shared.weight),
            Some(bound.get(self.shared.bias)),
            self.shared.padding,
        )?
        .relu();
        Ok((self.gamma.forward(bound, hidden)?, self.beta.forward(bound, hidden)?))
    }

    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        layout: &SemanticLayout,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "SI module expects [1, {}, h, w], got {shape:?}",
                self.channels
            )));
        }
        if (shape[2], shape[3]) != (layout.height(), layout.width()) {
            return Err(Error::shape(format!(
                "SI module activation is {}x{} but layout is {}x{}",
                shape[2],
                shape[3],
                layout.height(),
                layout.width()
            )));
        }
        let (gamma, beta) = self.modulation(bound, layout)?;
        let normalized = x.normalize(self.norm, NORM_EPSILON)?;
        gamma.mul(normalized)?.add(beta)
    }
}

/// Two `SI -> ReLU -> conv3x3` legs plus a shortcut (1x1 conv when the
/// channel count changes).
#[derive(Clone, Debug)]
pub struct SIResBlock {
    pub si1: SIModule,
    pub conv1: ConvLayer,
    pub si2: SIModule,
    pub conv2: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

impl SIResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        hidden: usize,
        norm: NormKind,
        rng: &mut R,
    ) -> Self {
        Self {
            si1: SIModule::new(params, &format!("{name}.si1"), cin, hidden, norm, rng),
            conv1: ConvLayer::new(params, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            si2: SIModule::new(params, &format!("{name}.si2"), cout, hidden, norm, rng),
            conv2: ConvLayer::new(params, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            shortcut: (cin != cout)
                .then(|| ConvLayer::new(params, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
        }
    }

    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        layout: &SemanticLayout,
    ) -> Result<Var<'t>> {
        let h = self.si1.forward(bound, x, layout)?.relu();
        let h = self.conv1.forward(bound, h)?;
        let h = self.si2.forward(bound, h, layout)?.relu();
        let h = self.conv2.forward(bound, h)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(bound, x)?,
            None => x,
        };
        h.add(skip)
    }
}
