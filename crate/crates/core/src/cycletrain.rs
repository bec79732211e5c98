//! Two-direction adversarial training with iterative cycle distillation.
//!
//! Stage 0 trains photo→sketch (`k`) and sketch→photo (`o`) independently.
//! Stage `i + 1` retrains each direction from scratch while the opposite
//! direction's stage-`i` generator, frozen, supplies multi-level features for
//! an L1 consistency term between the real and the synthesized target.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphrepr::{graph_losses, VarianceMode};
use crate::layout::{PairedSample, SaliencyMap, SemanticLayout};
use crate::losses::{
    bce_parsing, content_l1, discriminator_loss, generator_loss, perceptual, total_objective,
    FeatureExtractor, GanMode, LossTerms, LossWeights, ParsingOracle,
};
use crate::metrics::{self, EvalPair, MetricReport, MetricSummary};
use crate::network::{Generator, ModelConfig, PatchDiscriminator};
use crate::numerics::checkpoint;
use crate::numerics::{adam_step, AdamConfig, NormKind, ParamSet, Tape, Tensor, Var};

/// Number of refinement stages after stage 0.
pub const DEFAULT_STAGES: usize = 4;
/// Number of frozen-generator feature taps in the consistency term.
pub const ICT_TAP_COUNT: usize = 5;

pub const MODEL_BIN: &str = "model.bin";
pub const MODEL_JSON: &str = "model.json";
pub const LOSSES_CSV: &str = "losses.csv";
pub const VAL_METRICS_JSON: &str = "val_metrics.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Photo to sketch.
    #[serde(rename = "k")]
    Sketch,
    /// Sketch to photo.
    #[serde(rename = "o")]
    Photo,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Sketch, Direction::Photo];

    pub fn tag(self) -> &'static str {
        match self {
            Direction::Sketch => "k",
            Direction::Photo => "o",
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Direction::Sketch => Direction::Photo,
            Direction::Photo => Direction::Sketch,
        }
    }

    pub fn source_channels(self) -> usize {
        self.opposite().target_channels()
    }

    pub fn target_channels(self) -> usize {
        match self {
            Direction::Sketch => 1,
            Direction::Photo => 3,
        }
    }

    fn index(self) -> u64 {
        match self {
            Direction::Sketch => 0,
            Direction::Photo => 1,
        }
    }

    /// Inputs and targets of `sample` for this direction. Each side carries
    /// its own saliency map and layout.
    pub fn view(self, sample: &PairedSample) -> SampleView<'_> {
        let photo = Side {
            image: &sample.photo,
            saliency: &sample.saliency_photo,
            layout: &sample.layout_photo,
        };
        let sketch = Side {
            image: &sample.sketch,
            saliency: &sample.saliency_sketch,
            layout: &sample.layout_sketch,
        };
        let (source, target) = match self {
            Direction::Sketch => (photo, sketch),
            Direction::Photo => (sketch, photo),
        };
        SampleView {
            id: &sample.id,
            source,
            target,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "sketch" => Ok(Direction::Sketch),
            "o" | "photo" => Ok(Direction::Photo),
            other => Err(Error::config("direction", format!("expected k|o, got {other:?}"))),
        }
    }
}

/// One domain of a sample: image `[C, H, W]`, saliency, layout.
#[derive(Clone, Copy, Debug)]
pub struct Side<'a> {
    pub image: &'a Tensor,
    pub saliency: &'a SaliencyMap,
    pub layout: &'a SemanticLayout,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleView<'a> {
    pub id: &'a str,
    pub source: Side<'a>,
    pub target: Side<'a>,
}

/// A feature tap of a generator forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    Bottleneck,
    /// Output of decoder block `n` (1-based, coarsest first).
    Block(usize),
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "bottleneck" {
            return Ok(Tap::Bottleneck);
        }
        s.strip_prefix("block")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .map(Tap::Block)
            .ok_or_else(|| Error::config("ict_taps", format!("unknown tap {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub image_size: usize,
    pub depth: usize,
    pub use_saliency: bool,
    pub base_channels: usize,
    pub si_hidden: usize,
    pub norm: NormKind,
    pub disc_base_channels: usize,
    pub disc_layers: usize,
    pub gan_mode: GanMode,
    pub variance_mode: VarianceMode,
    pub stages: usize,
    pub ict_taps: Vec<String>,
    pub feature_seed: u64,
    pub parsing_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            weights: LossWeights::default(),
            seed: 7,
            image_size: 64,
            depth: 5,
            use_saliency: true,
            base_channels: 8,
            si_hidden: 32,
            norm: NormKind::Instance,
            disc_base_channels: 8,
            disc_layers: 3,
            gan_mode: GanMode::CrossEntropy,
            variance_mode: VarianceMode::Literal,
            stages: DEFAULT_STAGES,
            ict_taps: ["bottleneck", "block1", "block2", "block3", "block4"].map(String::from).to_vec(),
            feature_seed: 1001,
            parsing_seed: 2002,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 2 || !self.epochs.is_multiple_of(2) {
            return Err(Error::config("epochs", format!("{} must be even and at least 2", self.epochs)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("{} must be positive", self.lr)));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("{b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.disc_layers == 0 || self.disc_base_channels == 0 {
            return Err(Error::config("disc_layers", "discriminator needs positive layers and width"));
        }
        self.weights.validate()?;
        self.model_config(Direction::Sketch, 0).validate()?;
        let taps = self.taps()?;
        if taps.len() != ICT_TAP_COUNT {
            return Err(Error::config(
                "ict_taps",
                format!("expected {ICT_TAP_COUNT} taps, got {}", taps.len()),
            ));
        }
        Ok(())
    }

    pub fn taps(&self) -> Result<Vec<Tap>> {
        let taps = self.ict_taps.iter().map(|s| s.parse()).collect::<Result<Vec<Tap>>>()?;
        if let Some(Tap::Block(n)) = taps.iter().find(|t| matches!(t, Tap::Block(n) if *n > self.depth)) {
            return Err(Error::config("ict_taps", format!("block{n} exceeds depth {}", self.depth)));
        }
        Ok(taps)
    }

    pub fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: learning_rate(self.lr, epoch, self.epochs),
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn model_config(&self, direction: Direction, stage: usize) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: direction.source_channels(),
            out_channels: direction.target_channels(),
            use_saliency: self.use_saliency,
            image_size: self.image_size,
            seed: derive_seed(self.seed, stage, direction, Role::Generator),
            si_hidden: self.si_hidden,
            norm: self.norm,
        }
    }
}

/// Constant for the first half of training, then linear decay: epoch `e`
/// (0-based) of `epochs` uses `base * (1 - max(0, e + 1 - h) / (h + 1))`
/// with `h = epochs / 2`.
pub fn learning_rate(base: f64, epoch: usize, epochs: usize) -> f64 {
    let half = (epochs / 2) as f64;
    let decay = ((epoch + 1) as f64 - half).max(0.0) / (half + 1.0);
    base * (1.0 - decay)
}

#[derive(Clone, Copy)]
enum Role {
    Generator = 0,
    Discriminator = 1,
    Shuffle = 2,
}

/// Seeds of every random stream of one stage and direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub generator: u64,
    pub discriminator: u64,
    pub shuffle: u64,
}

impl StageSeeds {
    pub fn derive(seed: u64, stage: usize, direction: Direction) -> Self {
        Self {
            generator: derive_seed(seed, stage, direction, Role::Generator),
            discriminator: derive_seed(seed, stage, direction, Role::Discriminator),
            shuffle: derive_seed(seed, stage, direction, Role::Shuffle),
        }
    }
}

/// Independent seed per (stage, direction, role), all drawn from `seed`.
fn derive_seed(seed: u64, stage: usize, direction: Direction, role: Role) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64 * 2 + direction.index()) << 2) | role as u64);
    rng.random()
}

/// Generator and discriminator of one direction at one stage.
#[derive(Clone, Debug)]
pub struct StageModels {
    pub generator: Generator,
    pub discriminator: PatchDiscriminator,
}

impl StageModels {
    /// Freshly initialized networks.
    pub fn new(cfg: &TrainConfig, direction: Direction, stage: usize) -> Result<Self> {
        let model = cfg.model_config(direction, stage);
        let d_in = model.in_channels + 1 + model.out_channels;
        Ok(Self {
            generator: Generator::new(model)?,
            discriminator: PatchDiscriminator::new(
                d_in,
                cfg.disc_base_channels,
                cfg.disc_layers,
                cfg.norm,
                derive_seed(cfg.seed, stage, direction, Role::Discriminator),
            )?,
        })
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut entries = checkpoint::param_entries(self.generator.params(), "g.", true);
        entries.extend(checkpoint::param_entries(self.discriminator.params(), "d.", true));
        checkpoint::encode(&entries)
    }

    /// Writes `model.bin` and `model.json`; returns the SHA-256 of `model.bin`.
    pub fn save(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = self.checkpoint_bytes();
        let bin = dir.join(MODEL_BIN);
        std::fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(MODEL_JSON);
        let text = serde_json::to_string_pretty(self.generator.config()).expect("config serializes");
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(dir: &Path, cfg: &TrainConfig, direction: Direction, stage: usize) -> Result<Self> {
        let mut models = Self::new(cfg, direction, stage)?;
        let saved = read_model_config(dir)?;
        if &saved != models.generator.config() {
            return Err(Error::data(format!(
                "{}: architecture differs from the configured one",
                dir.join(MODEL_JSON).display()
            )));
        }
        let entries = read_checkpoint(dir)?;
        checkpoint::load_params(models.generator.params_mut(), &entries, "g.")?;
        checkpoint::load_params(models.discriminator.params_mut(), &entries, "d.")?;
        Ok(models)
    }
}

pub fn read_model_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join(MODEL_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn read_checkpoint(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let path = dir.join(MODEL_BIN);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    checkpoint::read_entries(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Loads only the generator of a checkpoint directory, using its `model.json`.
pub fn load_generator(dir: &Path) -> Result<Generator> {
    let mut g = Generator::new(read_model_config(dir)?)?;
    checkpoint::load_params(g.params_mut(), &read_checkpoint(dir)?, "g.")?;
    Ok(g)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fixed feature and parsing networks for one target domain.
#[derive(Clone, Debug)]
pub struct Critics {
    pub features: FeatureExtractor,
    pub parser: ParsingOracle,
}

impl Critics {
    pub fn new(cfg: &TrainConfig, direction: Direction) -> Self {
        let c = direction.target_channels();
        Self {
            features: FeatureExtractor::new(c, cfg.feature_seed),
            parser: ParsingOracle::new(c, cfg.parsing_seed),
        }
    }
}

/// Frozen opposite-direction generator and the taps read from it.
#[derive(Clone, Copy, Debug)]
pub struct Frozen<'a> {
    pub generator: &'a Generator,
    pub taps: &'a [Tap],
}

fn batched(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    t.reshape(&[1, s[0], s[1], s[2]])
}

fn prior_tensor(saliency: &SaliencyMap, enabled: bool) -> Tensor {
    let (h, w) = (saliency.height(), saliency.width());
    let t = if enabled { saliency.to_tensor() } else { Tensor::zeros(&[1, h, w]) };
    t.reshape(&[1, 1, h, w]).expect("same element count")
}

fn pick_tap<'t>(out: &crate::network::GeneratorOutput<'t>, tap: Tap) -> Result<Var<'t>> {
    match tap {
        Tap::Bottleneck => Ok(out.bottleneck),
        Tap::Block(n) => out
            .blocks
            .get(n - 1)
            .copied()
            .ok_or_else(|| Error::config("ict_taps", format!("generator has no block{n}"))),
    }
}

/// Sum over taps of the mean absolute difference between the frozen
/// generator's features of the real and of the synthesized image. Both are
/// fed with the same saliency and layout; the real branch is constant.
pub fn ict_loss<'t>(
    frozen: Frozen<'_>,
    real: Var<'t>,
    fake: Var<'t>,
    saliency: &SaliencyMap,
    layout: &SemanticLayout,
) -> Result<Var<'t>> {
    if frozen.taps.is_empty() {
        return Err(Error::config("ict_taps", "at least one tap is required"));
    }
    let tape = fake.tape();
    let bound = frozen.generator.params().bind(tape, false);
    let out_real = frozen.generator.forward(&bound, real.detach(), saliency, layout)?;
    let out_fake = frozen.generator.forward(&bound, fake, saliency, layout)?;
    let mut total: Option<Var<'t>> = None;
    for &tap in frozen.taps {
        let a = pick_tap(&out_real, tap)?.detach();
        let b = pick_tap(&out_fake, tap)?;
        let term = b.sub(a)?.abs().mean();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty taps"))
}

/// One row of `losses.csv`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_content: f64,
    pub l_perc: f64,
    pub l_bce: f64,
    pub l_iag: f64,
    pub l_itg: f64,
    pub l_ict: f64,
    pub l_total: f64,
}

impl LossRecord {
    fn accumulate(&mut self, other: &LossRecord, scale: f64) {
        self.l_gan_d += scale * other.l_gan_d;
        self.l_gan_g += scale * other.l_gan_g;
        self.l_content += scale * other.l_content;
        self.l_perc += scale * other.l_perc;
        self.l_bce += scale * other.l_bce;
        self.l_iag += scale * other.l_iag;
        self.l_itg += scale * other.l_itg;
        self.l_ict += scale * other.l_ict;
        self.l_total += scale * other.l_total;
    }
}

pub fn write_losses_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_losses_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::data(format!("{}: {e}", path.display()))))
        .collect()
}

fn ensure_finite(value: f64, what: &str, context: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{context}: {what} is {value}")))
    }
}

/// Generator-side loss terms for one sample on `tape`.
#[allow(clippy::too_many_arguments)]
fn generator_terms<'t>(
    tape: &'t Tape,
    models: &StageModels,
    critics: &Critics,
    cfg: &TrainConfig,
    view: &SampleView<'_>,
    source: Var<'t>,
    fake: Var<'t>,
    frozen: Option<Frozen<'_>>,
) -> Result<LossTerms<'t>> {
    let d_bound = models.discriminator.params().bind(tape, false);
    let c_feat = critics.features.params().bind(tape, false);
    let c_parse = critics.parser.params().bind(tape, false);
    let prior = tape.constant(prior_tensor(view.source.saliency, cfg.use_saliency));
    let target = tape.constant(batched(view.target.image)?);
    let logits = models.discriminator.forward(&d_bound, source, prior, fake)?;
    let (iag, itg) = graph_losses(target, fake, view.target.layout, cfg.variance_mode)?;
    let ict = match frozen {
        Some(f) => Some(ict_loss(f, target, fake, view.target.saliency, view.target.layout)?),
        None => None,
    };
    Ok(LossTerms {
        gan: generator_loss(logits, cfg.gan_mode),
        content: content_l1(target, fake)?,
        perceptual: perceptual(&critics.features, &c_feat, target, fake)?,
        bce: bce_parsing(&critics.parser, &c_parse, target, fake)?,
        iag,
        itg,
        ict,
    })
}

fn scale_grads(params: &mut ParamSet, factor: f64) {
    if factor == 1.0 {
        return;
    }
    for p in params.as_mut_slice() {
        if let Some(g) = p.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// One optimizer step for each network over a mini-batch: discriminator
/// first (on detached fakes), then the generator against the updated
/// discriminator. Returns batch-mean loss values.
fn train_batch(
    models: &mut StageModels,
    critics: &Critics,
    cfg: &TrainConfig,
    adam: &AdamConfig,
    views: &[SampleView<'_>],
    frozen: Option<Frozen<'_>>,
    context: &str,
) -> Result<LossRecord> {
    let scale = 1.0 / views.len() as f64;
    let tapes: Vec<Tape> = views.iter().map(|_| Tape::new()).collect();
    let mut forwards = Vec::with_capacity(views.len());
    for (tape, view) in tapes.iter().zip(views) {
        let bound = models.generator.params().bind(tape, true);
        let source = tape.constant(batched(view.source.image)?);
        let out = models.generator.forward(&bound, source, view.source.saliency, view.source.layout)?;
        forwards.push((bound, source, out.image));
    }

    let mut record = LossRecord::default();
    for ((_, _, fake), view) in forwards.iter().zip(views) {
        let tape = Tape::new();
        let bound = models.discriminator.params().bind(&tape, true);
        let source = tape.constant(batched(view.source.image)?);
        let prior = tape.constant(prior_tensor(view.source.saliency, cfg.use_saliency));
        let real = tape.constant(batched(view.target.image)?);
        let fake = tape.constant(fake.value().as_ref().clone());
        let real_logits = models.discriminator.forward(&bound, source, prior, real)?;
        let fake_logits = models.discriminator.forward(&bound, source, prior, fake)?;
        let loss = discriminator_loss(real_logits, fake_logits, cfg.gan_mode)?;
        ensure_finite(loss.item(), "discriminator loss", context)?;
        record.l_gan_d += scale * loss.item();
        let grads = tape.backward(loss)?;
        models.discriminator.params_mut().accumulate_grads(&bound, &grads);
    }
    scale_grads(models.discriminator.params_mut(), scale);
    adam_step(models.discriminator.params_mut().as_mut_slice(), adam)?;

    for (((bound, source, fake), view), tape) in forwards.iter().zip(views).zip(&tapes) {
        let terms = generator_terms(tape, models, critics, cfg, view, *source, *fake, frozen)?;
        let total = total_objective(&terms, &cfg.weights)?;
        ensure_finite(total.item(), "generator loss", context)?;
        record.accumulate(
            &LossRecord {
                l_gan_g: terms.gan.item(),
                l_content: terms.content.item(),
                l_perc: terms.perceptual.item(),
                l_bce: terms.bce.item(),
                l_iag: terms.iag.item(),
                l_itg: terms.itg.item(),
                l_ict: terms.ict.map_or(0.0, |v| v.item()),
                l_total: total.item(),
                ..LossRecord::default()
            },
            scale,
        );
        let grads = tape.backward(total)?;
        models.generator.params_mut().accumulate_grads(bound, &grads);
    }
    scale_grads(models.generator.params_mut(), scale);
    adam_step(models.generator.params_mut().as_mut_slice(), adam)?;
    Ok(record)
}

/// Per-epoch progress report.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub stage: usize,
    pub direction: Direction,
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_ict: f64,
}

/// Loss history of one trained stage.
#[derive(Clone, Debug, Default)]
pub struct StageLog {
    pub records: Vec<LossRecord>,
    /// Mean generator objective per epoch.
    pub epoch_total: Vec<f64>,
    /// Mean consistency term per epoch (zeros at stage 0).
    pub epoch_ict: Vec<f64>,
}

fn check_corpus(samples: &[PairedSample], cfg: &TrainConfig, what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::data(format!("{what} corpus is empty")));
    }
    if let Some(s) = samples.iter().find(|s| s.size() != cfg.image_size) {
        return Err(Error::data(format!(
            "{what} sample {} is {}x{}, configured image_size is {}",
            s.id,
            s.size(),
            s.size(),
            cfg.image_size
        )));
    }
    Ok(())
}

/// Trains one direction from scratch. `frozen` enables the consistency term.
pub fn train_stage(
    train: &[PairedSample],
    cfg: &TrainConfig,
    stage: usize,
    direction: Direction,
    frozen: Option<Frozen<'_>>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(StageModels, StageLog)> {
    cfg.validate()?;
    check_corpus(train, cfg, "training")?;
    if let Some(f) = frozen {
        let expect = cfg.model_config(direction.opposite(), 0);
        let got = f.generator.config();
        if (got.in_channels, got.out_channels) != (expect.in_channels, expect.out_channels) {
            return Err(Error::invalid(format!(
                "frozen generator maps {} to {} channels; stage {stage}{direction} needs the opposite direction",
                got.in_channels, got.out_channels
            )));
        }
    }
    let mut models = StageModels::new(cfg, direction, stage)?;
    let critics = Critics::new(cfg, direction);
    let views: Vec<SampleView<'_>> = train.iter().map(|s| direction.view(s)).collect();
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stage, direction, Role::Shuffle));
    let mut log = StageLog::default();
    for epoch in 0..cfg.epochs {
        let adam = cfg.adam(epoch);
        order.shuffle(&mut shuffle);
        let (mut sum_total, mut sum_ict, mut steps) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let batch_views: Vec<SampleView<'_>> = batch.iter().map(|&i| views[i]).collect();
            let context = format!("stage {stage}{direction} epoch {epoch} step {}", log.records.len());
            let mut record = train_batch(&mut models, &critics, cfg, &adam, &batch_views, frozen, &context)?;
            record.step = log.records.len();
            sum_total += record.l_total;
            sum_ict += record.l_ict;
            steps += 1;
            log.records.push(record);
        }
        let mean_total = sum_total / steps as f64;
        let mean_ict = sum_ict / steps as f64;
        log.epoch_total.push(mean_total);
        log.epoch_ict.push(mean_ict);
        progress(&EpochLog {
            stage,
            direction,
            epoch,
            lr: adam.lr,
            mean_total,
            mean_ict,
        });
    }
    Ok((models, log))
}

/// Generator objective of every sample without updating anything.
pub fn validation_losses(
    models: &StageModels,
    samples: &[PairedSample],
    cfg: &TrainConfig,
    direction: Direction,
    frozen: Option<Frozen<'_>>,
) -> Result<Vec<f64>> {
    let critics = Critics::new(cfg, direction);
    samples
        .iter()
        .map(|s| {
            let view = direction.view(s);
            let tape = Tape::new();
            let bound = models.generator.params().bind(&tape, false);
            let source = tape.constant(batched(view.source.image)?);
            let fake = models.generator.forward(&bound, source, view.source.saliency, view.source.layout)?.image;
            let terms = generator_terms(&tape, models, &critics, cfg, &view, source, fake, frozen)?;
            Ok(total_objective(&terms, &cfg.weights)?.item())
        })
        .collect()
}

/// Synthesizes every sample and scores the results against the targets.
pub fn validate(
    generator: &Generator,
    samples: &[PairedSample],
    cfg: &TrainConfig,
    direction: Direction,
) -> Result<MetricReport> {
    let pairs = samples
        .iter()
        .map(|s| {
            let view = direction.view(s);
            Ok(EvalPair {
                id: s.id.clone(),
                real: view.target.image.clone(),
                fake: generator.synthesize(view.source.image, view.source.saliency, view.source.layout)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let extractor = FeatureExtractor::new(direction.target_channels(), cfg.feature_seed);
    metrics::evaluate(&pairs, &extractor, cfg.feature_seed)
}

/// A persisted stage result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: usize,
    pub direction: Direction,
    pub dir: PathBuf,
    /// SHA-256 of `model.bin`.
    pub digest: String,
    pub metrics: MetricSummary,
}

pub fn stage_dir(run_dir: &Path, stage: usize, direction: Direction) -> PathBuf {
    run_dir.join(format!("stage{stage}_{direction}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes every artifact of a trained stage and validates it.
pub fn persist_stage(
    run_dir: &Path,
    stage: usize,
    direction: Direction,
    models: &StageModels,
    log: &StageLog,
    val: &[PairedSample],
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let dir = stage_dir(run_dir, stage, direction);
    let digest = models.save(&dir)?;
    write_losses_csv(&dir.join(LOSSES_CSV), &log.records)?;
    let report = validate(&models.generator, val, cfg, direction)?;
    write_json(&dir.join(VAL_METRICS_JSON), &report.summary)?;
    Ok(Checkpoint {
        stage,
        direction,
        dir,
        digest,
        metrics: report.summary,
    })
}

/// Outcome of one trained stage of the iterative schedule.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: usize,
    pub direction: Direction,
    pub log: StageLog,
    /// Frozen generator parameters unchanged across the stage (stage > 0).
    pub frozen_unchanged: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct IterativeRun {
    pub checkpoints: Vec<Checkpoint>,
    pub stages: Vec<StageOutcome>,
}

/// Stage 0 for both directions.
pub fn train_stage0(
    train: &[PairedSample],
    val: &[PairedSample],
    cfg: &TrainConfig,
    run_dir: &Path,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<([StageModels; 2], IterativeRun)> {
    check_corpus(val, cfg, "validation")?;
    let mut run = IterativeRun {
        checkpoints: Vec::new(),
        stages: Vec::new(),
    };
    let mut trained = Vec::with_capacity(2);
    for direction in Direction::BOTH {
        let (models, log) = train_stage(train, cfg, 0, direction, None, progress)?;
        run.checkpoints.push(persist_stage(run_dir, 0, direction, &models, &log, val, cfg)?);
        run.stages.push(StageOutcome {
            stage: 0,
            direction,
            log,
            frozen_unchanged: None,
        });
        trained.push(models);
    }
    let [k, o]: [StageModels; 2] = trained.try_into().expect("two directions");
    Ok(([k, o], run))
}

/// Stage 0 plus `cfg.stages` refinement stages per direction. Stage `i + 1`
/// of each direction trains against the opposite direction's stage `i`
/// generator, which stays frozen.
pub fn run_iterative(
    train: &[PairedSample],
    val: &[PairedSample],
    cfg: &TrainConfig,
    run_dir: &Path,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<IterativeRun> {
    cfg.validate()?;
    let taps = cfg.taps()?;
    let ([mut prev_k, mut prev_o], mut run) = train_stage0(train, val, cfg, run_dir, progress)?;
    for i in 0..cfg.stages {
        let mut next = Vec::with_capacity(2);
        for direction in Direction::BOTH {
            let frozen_models = match direction {
                Direction::Sketch => &prev_o,
                Direction::Photo => &prev_k,
            };
            let snapshot = frozen_models.generator.params().clone();
            let frozen_digest = sha256_hex(&frozen_models.checkpoint_bytes());
            let frozen = Frozen {
                generator: &frozen_models.generator,
                taps: &taps,
            };
            let (models, log) = train_stage(train, cfg, i + 1, direction, Some(frozen), progress)?;
            let unchanged = frozen_models.generator.params().values_bit_identical(&snapshot)
                && sha256_hex(&frozen_models.checkpoint_bytes()) == frozen_digest;
            run.checkpoints.push(persist_stage(run_dir, i + 1, direction, &models, &log, val, cfg)?);
            run.stages.push(StageOutcome {
                stage: i + 1,
                direction,
                log,
                frozen_unchanged: Some(unchanged),
            });
            next.push(models);
        }
        let [k, o]: [StageModels; 2] = next.try_into().expect("two directions");
        prev_k = k;
        prev_o = o;
    }
    Ok(run)
}

/// Lowest Fréchet proxy wins; exact ties go to the higher SSIM, then to the
/// earlier checkpoint.
pub fn select_optimal(checkpoints: &[Checkpoint]) -> Result<&Checkpoint> {
    let mut best: Option<&Checkpoint> = None;
    for c in checkpoints {
        let m = &c.metrics;
        if !(m.frechet_proxy.is_finite() && m.ssim_mean.is_finite()) {
            return Err(Error::data(format!(
                "checkpoint stage{}_{} has no finite validation metrics",
                c.stage, c.direction
            )));
        }
        best = match best {
            None => Some(c),
            Some(b) => {
                let (bf, cf) = (b.metrics.frechet_proxy, m.frechet_proxy);
                if cf < bf || (cf == bf && m.ssim_mean > b.metrics.ssim_mean) {
                    Some(c)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.ok_or_else(|| Error::data("no checkpoints to select from"))
}
