use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::{SaliencyMap, SemanticLayout};
use crate::network::si::{ConvLayer, SIResBlock};
use crate::network::ModelConfig;
use crate::numerics::{Bound, ParamSet, Tape, Tensor, Var, LEAKY_SLOPE, NORM_EPSILON};

/// Encoder of stride-2 convolutions followed by a decoder of upsampling +
/// layout-modulated residual blocks. Output is mapped to [0, 1].
#[derive(Clone, Debug)]
pub struct Generator {
    config: ModelConfig,
    params: ParamSet,
    encoder: Vec<ConvLayer>,
    decoder: Vec<SIResBlock>,
    head: ConvLayer,
}

/// Everything a forward pass exposes besides the image.
pub struct GeneratorOutput<'t> {
    /// `[1, out_channels, H, W]`
    pub image: Var<'t>,
    pub bottleneck: Var<'t>,
    /// Output of each decoder block, coarsest first.
    pub blocks: Vec<Var<'t>>,
    /// Layout handed to each decoder block.
    pub layouts: Vec<SemanticLayout>,
}

impl Generator {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let channels = config.encoder_channels();
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels + 1;
        for (i, &cout) in channels.iter().enumerate() {
            encoder.push(ConvLayer::new(&mut params, &format!("enc{i}"), cin, cout, 4, 2, 1, &mut rng));
            cin = cout;
        }
        let mut decoder = Vec::with_capacity(config.depth);
        for j in 0..config.depth {
            let cout = channels[config.depth.saturating_sub(j + 2)];
            decoder.push(SIResBlock::new(
                &mut params,
                &format!("dec{j}"),
                cin,
                cout,
                config.si_hidden,
                config.norm,
                &mut rng,
            ));
            cin = cout;
        }
        let head = ConvLayer::new(&mut params, "head", cin, config.out_channels, 3, 1, 1, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Spatial size at the bottleneck for input size `size`.
    pub fn bottleneck_size(&self, size: usize) -> usize {
        size >> self.config.depth
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let unit = 1usize << self.config.depth;
        if !height.is_multiple_of(unit) || !width.is_multiple_of(unit) {
            return Err(Error::shape(format!(
                "input {height}x{width} must be divisible by 2^{} = {unit}",
                self.config.depth
            )));
        }
        Ok(())
    }

    /// Forward pass on a tape. `input` is `[1, in_channels, H, W]`; when
    /// saliency is disabled a zero channel takes its place.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        input: Var<'t>,
        saliency: &SaliencyMap,
        layout: &SemanticLayout,
    ) -> Result<GeneratorOutput<'t>> {
        let shape = input.shape();
        let (h, w) = match shape.as_slice() {
            &[1, c, h, w] if c == self.config.in_channels => (h, w),
            s => {
                return Err(Error::shape(format!(
                    "generator expects [1, {}, H, W], got {s:?}",
                    self.config.in_channels
                )))
            }
        };
        self.check_input_size(h, w)?;
        if (saliency.height(), saliency.width()) != (h, w)
            || (layout.height(), layout.width()) != (h, w)
        {
            return Err(Error::shape(format!(
                "saliency {}x{} / layout {}x{} do not match input {h}x{w}",
                saliency.height(),
                saliency.width(),
                layout.height(),
                layout.width()
            )));
        }
        let tape = input.tape();
        let prior = if self.config.use_saliency {
            saliency.to_tensor()
        } else {
            Tensor::zeros(&[1, h, w])
        };
        let prior = tape.constant(prior.reshape(&[1, 1, h, w])?);
        let mut x = Var::concat(&[input, prior], 1)?;

        let last = self.encoder.len() - 1;
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(bound, x)?;
            if i != 0 && i != last {
                x = x.normalize(self.config.norm, NORM_EPSILON)?;
            }
            x = x.leaky_relu(LEAKY_SLOPE);
        }
        let bottleneck = x;

        let mut blocks = Vec::with_capacity(self.decoder.len());
        let mut layouts = Vec::with_capacity(self.decoder.len());
        for (j, block) in self.decoder.iter().enumerate() {
            x = x.upsample_nearest(2)?;
            let factor = 1usize << (self.config.depth - 1 - j);
            let scaled = layout.downsample(factor)?;
            x = block.forward(bound, x, &scaled)?;
            blocks.push(x);
            layouts.push(scaled);
        }
        let image = self
            .head
            .forward(bound, x.relu())?
            .tanh()
            .scale(0.5)
            .add_scalar(0.5);
        Ok(GeneratorOutput {
            image,
            bottleneck,
            blocks,
            layouts,
        })
    }

    /// Inference on plain tensors: `[in_channels, H, W]` to `[out_channels, H, W]`.
    pub fn synthesize(
        &self,
        input: &Tensor,
        saliency: &SaliencyMap,
        layout: &SemanticLayout,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let shape = input.shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!("synthesize expects [C, H, W], got {shape:?}")));
        }
        let x = tape.constant(input.reshape(&[1, shape[0], shape[1], shape[2]])?);
        let out = self.forward(&bound, x, saliency, layout)?.image.value();
        out.reshape(&out.shape()[1..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::NUM_CLASSES;
    use rand::Rng;

    fn config(depth: usize, size: usize, cin: usize, cout: usize) -> ModelConfig {
        ModelConfig {
            depth,
            base_channels: 4,
            in_channels: cin,
            out_channels: cout,
            use_saliency: true,
            image_size: size,
            seed: 17,
            ..ModelConfig::default()
        }
    }

    fn inputs(size: usize, channels: usize, seed: u64) -> (Tensor, SaliencyMap, SemanticLayout) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[channels, size, size], 0.0, 1.0, &mut rng);
        let sal = SaliencyMap::new(size, size, (0..size * size).map(|_| rng.random()).collect()).unwrap();
        let layout = SemanticLayout::new(
            size,
            size,
            (0..size * size).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect(),
        )
        .unwrap();
        (x, sal, layout)
    }

    #[test]
    fn output_shapes_per_direction() {
        let (x, sal, layout) = inputs(32, 3, 1);
        let sketch = Generator::new(config(4, 32, 3, 1)).unwrap();
        let out = sketch.synthesize(&x, &sal, &layout).unwrap();
        assert_eq!(out.shape(), &[1, 32, 32]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let (y, sal, layout) = inputs(32, 1, 2);
        let photo = Generator::new(config(4, 32, 1, 3)).unwrap();
        let out = photo.synthesize(&y, &sal, &layout).unwrap();
        assert_eq!(out.shape(), &[3, 32, 32]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn replay_is_bit_identical() {
        let (x, sal, layout) = inputs(16, 3, 3);
        let g = Generator::new(config(3, 16, 3, 1)).unwrap();
        let a = g.synthesize(&x, &sal, &layout).unwrap();
        let b = g.synthesize(&x, &sal, &layout).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn indivisible_size_rejected() {
        let (x, sal, layout) = inputs(24, 3, 4);
        let g = Generator::new(config(4, 32, 3, 1)).unwrap();
        let err = g.synthesize(&x, &sal, &layout).unwrap_err().to_string();
        assert!(err.contains("16"), "{err}");
    }

    #[test]
    fn decoder_sees_each_resolution() {
        let (x, sal, layout) = inputs(32, 3, 5);
        let g = Generator::new(config(5, 32, 3, 1)).unwrap();
        let tape = Tape::new();
        let bound = g.params().bind(&tape, false);
        let input = tape.constant(x.reshape(&[1, 3, 32, 32]).unwrap());
        let out = g.forward(&bound, input, &sal, &layout).unwrap();
        assert_eq!(out.bottleneck.shape()[2..], [1, 1]);
        let sizes: Vec<(usize, usize)> = out.layouts.iter().map(|l| (l.height(), l.width())).collect();
        assert_eq!(sizes, vec![(2, 2), (4, 4), (8, 8), (16, 16), (32, 32)]);
        for (block, l) in out.blocks.iter().zip(&out.layouts) {
            assert_eq!(block.shape()[2..], [l.height(), l.width()]);
        }
    }
}
