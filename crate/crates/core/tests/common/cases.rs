//! Every differentiable operation, as seeded gradient-check instances.

use sgs::cycletrain::{ict_loss, Frozen, Tap};
use sgs::graphrepr::{compute_nodes, graph_losses, inter_graph, intra_graph, VarianceMode};
use sgs::layout::NUM_CLASSES;
use sgs::losses::{
    bce_parsing, content_l1, discriminator_loss, generator_loss, perceptual, total_objective, FeatureExtractor,
    GanMode, LossTerms, LossWeights, ParsingOracle,
};
use sgs::network::{Generator, PatchDiscriminator, SIModule, SIResBlock};
use sgs::numerics::{conv2d_onehot, NormKind, ParamSet, Tensor, Var, NORM_EPSILON};

use super::fixtures::*;
use super::gradcheck::{check_inputs, check_params};

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn probe<'t>(v: Var<'t>) -> sgs::Result<Var<'t>> {
    let w = probe_weights(&v.shape());
    Ok(v.mul_const(&w)?.sum())
}

fn unary(seed: u64, f: for<'t> fn(Var<'t>) -> Var<'t>) -> f64 {
    let x = away_from_zero(&[2, 3, 4], &mut rng(seed));
    check_inputs(&[x], |_, v| probe(f(v[0])))
}

fn conv_stride1(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [normal(&[2, 2, 5, 5], &mut r), normal(&[3, 2, 3, 3], &mut r), normal(&[3], &mut r)];
    check_inputs(&inputs, |_, v| probe(v[0].conv2d(v[1], Some(v[2]), 1, 1)?))
}

fn conv_stride2(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [normal(&[1, 2, 6, 6], &mut r), normal(&[2, 2, 4, 4], &mut r), normal(&[2], &mut r)];
    check_inputs(&inputs, |_, v| probe(v[0].conv2d(v[1], Some(v[2]), 2, 1)?))
}

fn conv_onehot(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = random_layout(5, 4, &mut r);
    let inputs = [normal(&[3, NUM_CLASSES, 3, 3], &mut r), normal(&[3], &mut r)];
    check_inputs(&inputs, |_, v| probe(conv2d_onehot(layout.as_onehot_map(), v[0], Some(v[1]), 1)?))
}

fn upsample(seed: u64) -> f64 {
    let x = normal(&[1, 2, 3, 3], &mut rng(seed));
    check_inputs(&[x], |_, v| probe(v[0].upsample_nearest(2)?))
}

fn avg_pool(seed: u64) -> f64 {
    let x = normal(&[2, 2, 4, 6], &mut rng(seed));
    check_inputs(&[x], |_, v| probe(v[0].avg_pool2d(2)?))
}

fn norm_instance(seed: u64) -> f64 {
    let x = normal(&[2, 3, 3, 4], &mut rng(seed));
    check_inputs(&[x], |_, v| probe(v[0].normalize(NormKind::Instance, NORM_EPSILON)?))
}

fn norm_batch(seed: u64) -> f64 {
    let x = normal(&[3, 2, 3, 3], &mut rng(seed));
    check_inputs(&[x], |_, v| probe(v[0].normalize(NormKind::Batch, NORM_EPSILON)?))
}

fn binary(seed: u64, f: for<'t> fn(Var<'t>, Var<'t>) -> sgs::Result<Var<'t>>) -> f64 {
    let mut r = rng(seed);
    let inputs = [normal(&[3, 4], &mut r), normal(&[3, 4], &mut r)];
    check_inputs(&inputs, |_, v| probe(f(v[0], v[1])?))
}

fn const_ops(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (a, b) = (normal(&[4, 3], &mut r), normal(&[4, 3], &mut r));
    let x = normal(&[4, 3], &mut r);
    check_inputs(&[x], move |_, v| probe(v[0].mul_const(&a)?.add_const(&b)?))
}

fn reductions(seed: u64) -> f64 {
    let x = normal(&[2, 3, 4], &mut rng(seed));
    check_inputs(&[x], |_, v| {
        let s = probe(v[0].sum_axes(&[1])?)?;
        let m = probe(v[0].mean_axes(&[0, 2])?)?;
        let r = probe(v[0].reshape(&[6, 4])?)?;
        s.add(m)?.add(r)?.add(v[0].sum().scale(0.3))?.add(v[0].mean())?.add(v[0].l2_norm())
    })
}

fn softmax(seed: u64) -> f64 {
    let x = normal(&[2, 4, 3], &mut rng(seed));
    check_inputs(&[x], |_, v| probe(v[0].softmax(1)?))
}

fn concat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [normal(&[1, 2, 3], &mut r), normal(&[1, 1, 3], &mut r), normal(&[1, 3, 3], &mut r)];
    check_inputs(&inputs, |_, v| probe(Var::concat(&[v[0], v[1], v[2]], 1)?))
}

fn matmul_transpose(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [normal(&[3, 4], &mut r), normal(&[2, 4], &mut r)];
    check_inputs(&inputs, |_, v| probe(v[0].matmul(v[1].transpose2d()?)?))
}

fn cosine_rows(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [normal(&[5, 3], &mut r), normal(&[3], &mut r)];
    check_inputs(&inputs, |_, v| probe(v[0].cosine_rows(v[1], 1e-12)?))
}

fn pairwise(seed: u64) -> f64 {
    let x = normal(&[5, 3], &mut rng(seed));
    check_inputs(&[x], |_, v| probe(v[0].pairwise_distances()?))
}

fn bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let target = uniform(&[2, 3, 3], 0.0, 1.0, &mut r);
    let x = uniform(&[2, 3, 3], 0.05, 0.95, &mut r);
    check_inputs(&[x], move |_, v| v[0].binary_cross_entropy(&target, 1e-7))
}

fn si_module(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = random_layout(4, 5, &mut r);
    let mut params = ParamSet::new();
    let si = SIModule::new(&mut params, "si", 2, 3, NormKind::Instance, &mut r);
    perturb_biases(&mut params, &mut r);
    let x = normal(&[1, 2, 4, 5], &mut r);
    let wrt_params = check_params(&params, |tape, b| probe(si.forward(b, tape.constant(x.clone()), &layout)?));
    let wrt_input = check_inputs(std::slice::from_ref(&x), |tape, v| {
        let b = params.bind(tape, false);
        probe(si.forward(&b, v[0], &layout)?)
    });
    wrt_params.max(wrt_input)
}

fn si_resblock(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = random_layout(4, 4, &mut r);
    let mut params = ParamSet::new();
    let block = SIResBlock::new(&mut params, "blk", 2, 3, 3, NormKind::Instance, &mut r);
    perturb_biases(&mut params, &mut r);
    let x = normal(&[1, 2, 4, 4], &mut r);
    let wrt_params = check_params(&params, |tape, b| probe(block.forward(b, tape.constant(x.clone()), &layout)?));
    let wrt_input = check_inputs(std::slice::from_ref(&x), |tape, v| {
        let b = params.bind(tape, false);
        probe(block.forward(&b, v[0], &layout)?)
    });
    wrt_params.max(wrt_input)
}

/// Zero-initialized biases sit on relu kinks; move them off.
fn perturb_biases(params: &mut ParamSet, r: &mut rand_chacha::ChaCha8Rng) {
    for p in params.as_mut_slice() {
        if p.name.ends_with(".bias") {
            p.value = uniform(p.value.shape(), -0.3, 0.3, r);
        } else {
            let scaled: Vec<f64> = p.value.data().iter().map(|w| w * 20.0).collect();
            p.value = Tensor::new(p.value.shape(), scaled).unwrap();
        }
    }
}

fn generator(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut cfg = tiny_model(3, 1, seed);
    cfg.depth = 2;
    cfg.image_size = 8;
    let mut g = Generator::new(cfg).unwrap();
    perturb_biases(g.params_mut(), &mut r);
    let layout = random_layout(8, 8, &mut r);
    let sal = random_saliency(8, 8, &mut r);
    let x = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
    let wrt_params = check_params(g.params(), |tape, b| {
        probe(g.forward(b, tape.constant(x.clone()), &sal, &layout)?.image)
    });
    let wrt_input = check_inputs(std::slice::from_ref(&x), |tape, v| {
        let b = g.params().bind(tape, false);
        probe(g.forward(&b, v[0], &sal, &layout)?.image)
    });
    wrt_params.max(wrt_input)
}

fn discriminator(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut d = PatchDiscriminator::new(3 + 1 + 1, 2, 1, NormKind::Instance, seed).unwrap();
    perturb_biases(d.params_mut(), &mut r);
    let src = uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
    let sal = uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut r);
    let cand = uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut r);
    let wrt_params = check_params(d.params(), |tape, b| {
        probe(d.forward(b, tape.constant(src.clone()), tape.constant(sal.clone()), tape.constant(cand.clone()))?)
    });
    let wrt_input = check_inputs(std::slice::from_ref(&cand), |tape, v| {
        let b = d.params().bind(tape, false);
        probe(d.forward(&b, tape.constant(src.clone()), tape.constant(sal.clone()), v[0])?)
    });
    wrt_params.max(wrt_input)
}

fn adversarial(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [normal(&[1, 1, 4, 4], &mut r), normal(&[1, 1, 4, 4], &mut r)];
    let mut worst: f64 = 0.0;
    for mode in [GanMode::CrossEntropy, GanMode::LeastSquares] {
        worst = worst.max(check_inputs(&inputs, |_, v| {
            discriminator_loss(v[0], v[1], mode)?.add(generator_loss(v[1], mode))
        }));
    }
    worst
}

fn content(seed: u64) -> f64 {
    let mut r = rng(seed);
    let target = uniform(&[1, 3, 6, 6], 0.0, 1.0, &mut r);
    let offset = away_from_zero(&[1, 3, 6, 6], &mut r);
    let fake = Tensor::new(&[1, 3, 6, 6], target.data().iter().zip(offset.data()).map(|(t, o)| t + 0.2 * o).collect()).unwrap();
    check_inputs(&[fake], move |tape, v| content_l1(tape.constant(target.clone()), v[0]))
}

fn perceptual_loss(seed: u64) -> f64 {
    let mut r = rng(seed);
    let fx = FeatureExtractor::new(3, seed);
    let target = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
    let fake = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
    check_inputs(&[fake], |tape, v| {
        let b = fx.params().bind(tape, false);
        perceptual(&fx, &b, tape.constant(target.clone()), v[0])
    })
}

fn parsing_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let oracle = ParsingOracle::new(1, seed);
    let target = uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut r);
    let fake = uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut r);
    check_inputs(&[fake], |tape, v| {
        let b = oracle.params().bind(tape, false);
        bce_parsing(&oracle, &b, tape.constant(target.clone()), v[0])
    })
}

fn graph_nodes(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = random_layout(6, 6, &mut r);
    let f = normal(&[3, 6, 6], &mut r);
    let mut worst: f64 = 0.0;
    for mode in [VarianceMode::Literal, VarianceMode::Masked] {
        worst = worst.max(check_inputs(std::slice::from_ref(&f), |_, v| {
            let nodes = compute_nodes(v[0], &layout, mode)?;
            probe(nodes.mu)?.add(probe(nodes.nu)?)
        }));
    }
    worst
}

fn graph_edges(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = random_layout(6, 6, &mut r);
    let f = normal(&[3, 6, 6], &mut r);
    check_inputs(&[f], |_, v| {
        let nodes = compute_nodes(v[0], &layout, VarianceMode::Literal)?;
        let intra = intra_graph(v[0], &nodes)?;
        let inter = inter_graph(&nodes)?;
        probe(intra.c1)?.add(probe(intra.c2)?)?.add(probe(inter.e1)?)?.add(probe(inter.e2)?)
    })
}

fn graph_loss_terms(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = random_layout(6, 6, &mut r);
    let target = uniform(&[1, 3, 6, 6], 0.0, 1.0, &mut r);
    let fake = uniform(&[1, 3, 6, 6], 0.0, 1.0, &mut r);
    let mut worst: f64 = 0.0;
    for mode in [VarianceMode::Literal, VarianceMode::Masked] {
        worst = worst.max(check_inputs(std::slice::from_ref(&fake), |tape, v| {
            let (iag, itg) = graph_losses(tape.constant(target.clone()), v[0], &layout, mode)?;
            iag.add(itg.scale(1e-2))
        }));
    }
    worst
}

fn cycle_consistency(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut g = Generator::new(tiny_model(1, 3, seed)).unwrap();
    perturb_biases(g.params_mut(), &mut r);
    let taps: Vec<Tap> = ["bottleneck", "block1", "block2", "block3", "block4"].iter().map(|s| s.parse().unwrap()).collect();
    let layout = random_layout(16, 16, &mut r);
    let sal = random_saliency(16, 16, &mut r);
    let real = uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut r);
    let fake = uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut r);
    let frozen = Frozen { generator: &g, taps: &taps };
    check_inputs(&[fake], |tape, v| ict_loss(frozen, tape.constant(real.clone()), v[0], &sal, &layout))
}

fn objective(seed: u64) -> f64 {
    let mut r = rng(seed);
    let parts = uniform(&[7], 0.1, 2.0, &mut r);
    let weights = LossWeights::default();
    check_inputs(&[parts], |_, v| {
        let term = |i: usize| v[0].mul_const(&one_hot(i)).map(|t| t.sum());
        let terms = LossTerms {
            gan: term(0)?,
            content: term(1)?,
            perceptual: term(2)?,
            bce: term(3)?,
            iag: term(4)?,
            itg: term(5)?,
            ict: Some(term(6)?),
        };
        total_objective(&terms, &weights)
    })
}

fn one_hot(i: usize) -> Tensor {
    let mut d = vec![0.0; 7];
    d[i] = 1.0;
    Tensor::new(&[7], d).unwrap()
}

pub fn all() -> Vec<GradCase> {
    vec![
        GradCase { name: "conv2d stride 1", run: conv_stride1 },
        GradCase { name: "conv2d stride 2 k4", run: conv_stride2 },
        GradCase { name: "conv2d one-hot layout", run: conv_onehot },
        GradCase { name: "upsample nearest", run: upsample },
        GradCase { name: "average pool", run: avg_pool },
        GradCase { name: "instance norm", run: norm_instance },
        GradCase { name: "batch norm", run: norm_batch },
        GradCase { name: "relu", run: |s| unary(s, |v| v.relu()) },
        GradCase { name: "leaky relu", run: |s| unary(s, |v| v.leaky_relu(0.2)) },
        GradCase { name: "sigmoid", run: |s| unary(s, |v| v.sigmoid()) },
        GradCase { name: "tanh", run: |s| unary(s, |v| v.tanh()) },
        GradCase { name: "abs", run: |s| unary(s, |v| v.abs()) },
        GradCase { name: "square", run: |s| unary(s, |v| v.square()) },
        GradCase { name: "softplus", run: |s| unary(s, |v| v.softplus()) },
        GradCase { name: "scale, shift, negate", run: |s| unary(s, |v| v.scale(1.7).add_scalar(0.3).neg()) },
        GradCase { name: "add", run: |s| binary(s, |a, b| a.add(b)) },
        GradCase { name: "sub", run: |s| binary(s, |a, b| a.sub(b)) },
        GradCase { name: "mul", run: |s| binary(s, |a, b| a.mul(b)) },
        GradCase { name: "constant mul and add", run: const_ops },
        GradCase { name: "reductions and reshape", run: reductions },
        GradCase { name: "softmax", run: softmax },
        GradCase { name: "concat", run: concat },
        GradCase { name: "matmul and transpose", run: matmul_transpose },
        GradCase { name: "row cosine", run: cosine_rows },
        GradCase { name: "pairwise distances", run: pairwise },
        GradCase { name: "binary cross-entropy", run: bce },
        GradCase { name: "SI module", run: si_module },
        GradCase { name: "SI residual block", run: si_resblock },
        GradCase { name: "generator", run: generator },
        GradCase { name: "patch discriminator", run: discriminator },
        GradCase { name: "adversarial losses", run: adversarial },
        GradCase { name: "content L1", run: content },
        GradCase { name: "perceptual", run: perceptual_loss },
        GradCase { name: "parsing cross-entropy", run: parsing_bce },
        GradCase { name: "graph nodes", run: graph_nodes },
        GradCase { name: "graph cosines and edges", run: graph_edges },
        GradCase { name: "graph losses", run: graph_loss_terms },
        GradCase { name: "cycle consistency", run: cycle_consistency },
        GradCase { name: "total objective", run: objective },
    ]
}
