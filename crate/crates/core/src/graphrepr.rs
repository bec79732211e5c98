//! Region-wise graph representations of an image under a semantic layout.
//!
//! Each class contributes two nodes computed from the pixels it covers: the
//! re-weighted mean `mu(c) = sum_p s_c(p) F(p) / |s_c|` and the variance
//! `nu(c) = sum_p (s_c(p) F(p) - mu(c))^2 / |s_c|`. Dividing by the region
//! size balances small parts (eyes, lips) against large ones (skin, hair).
//!
//! The intra-class graph holds the cosine of the globally pooled image
//! vector against every node; the inter-class graph holds Euclidean
//! distances between every pair of nodes.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{SemanticLayout, NUM_CLASSES};
use crate::numerics::{Tensor, Var};

/// Norm-product threshold below which a cosine is defined as 0.
pub const COSINE_EPSILON: f64 = 1e-12;

/// How the variance node treats pixels outside the class region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// Mask multiplies the feature before the mean is subtracted, so every
    /// pixel outside the region contributes `mu^2`.
    #[default]
    Literal,
    /// Only pixels inside the region contribute.
    Masked,
}

pub struct GraphNodes<'t> {
    /// `[12, Cf]`
    pub mu: Var<'t>,
    /// `[12, Cf]`
    pub nu: Var<'t>,
    pub present: [bool; NUM_CLASSES],
}

pub struct IntraClassGraph<'t> {
    /// `[12]` cosine against the mean nodes.
    pub c1: Var<'t>,
    /// `[12]` cosine against the variance nodes.
    pub c2: Var<'t>,
}

pub struct InterClassGraph<'t> {
    /// `[12, 12]` distances between mean nodes.
    pub e1: Var<'t>,
    /// `[12, 12]` distances between variance nodes.
    pub e2: Var<'t>,
}

/// Flattens `[Cf, H, W]` or `[1, Cf, H, W]` to `[Cf, H*W]`.
fn flatten_features<'t>(features: Var<'t>, layout: &SemanticLayout) -> Result<Var<'t>> {
    let shape = features.shape();
    let (cf, h, w) = match shape.as_slice() {
        &[cf, h, w] | &[1, cf, h, w] => (cf, h, w),
        s => {
            return Err(Error::shape(format!(
                "graph features must be [Cf,H,W] or [1,Cf,H,W], got {s:?}"
            )))
        }
    };
    if (h, w) != (layout.height(), layout.width()) {
        return Err(Error::shape(format!(
            "features are {h}x{w} but layout is {}x{}",
            layout.height(),
            layout.width()
        )));
    }
    features.reshape(&[cf, h * w])
}

/// Mean and variance nodes per class; absent classes get zero nodes.
pub fn compute_nodes<'t>(
    features: Var<'t>,
    layout: &SemanticLayout,
    mode: VarianceMode,
) -> Result<GraphNodes<'t>> {
    let flat = flatten_features(features, layout)?;
    let cf = flat.shape()[0];
    let counts = layout.counts();
    let present = counts.map(|n| n > 0);
    let tape = features.tape();

    let selector = tape.constant(
        layout
            .one_hot()
            .reshape(&[NUM_CLASSES, layout.height() * layout.width()])?,
    );
    let sums = selector.matmul(flat.transpose2d()?)?;
    let inv_count: Vec<f64> = counts
        .iter()
        .flat_map(|&n| {
            let v = if n > 0 { 1.0 / n as f64 } else { 0.0 };
            std::iter::repeat_n(v, cf)
        })
        .collect();
    let mu = sums.mul_const(&Tensor::new(&[NUM_CLASSES, cf], inv_count)?)?;
    let nu = region_variance(flat, mu, layout, mode)?;
    Ok(GraphNodes { mu, nu, present })
}

/// Variance node per class and channel, differentiable in both the
/// features `[Cf, P]` and the mean nodes `[12, Cf]`.
fn region_variance<'t>(
    flat: Var<'t>,
    mu: Var<'t>,
    layout: &SemanticLayout,
    mode: VarianceMode,
) -> Result<Var<'t>> {
    let f = flat.value();
    let m = mu.value();
    let (cf, pixels) = (f.shape()[0], f.shape()[1]);
    let classes: Rc<[u8]> = Rc::from(layout.classes());
    let counts = layout.counts();
    let outside = move |c: usize| match mode {
        VarianceMode::Literal => (pixels - counts[c]) as f64,
        VarianceMode::Masked => 0.0,
    };

    let mut nu = vec![0.0; NUM_CLASSES * cf];
    for ch in 0..cf {
        let row = &f.data()[ch * pixels..(ch + 1) * pixels];
        for (p, &c) in classes.iter().enumerate() {
            let d = row[p] - m.data()[c as usize * cf + ch];
            nu[c as usize * cf + ch] += d * d;
        }
    }
    for c in 0..NUM_CLASSES {
        for ch in 0..cf {
            let at = c * cf + ch;
            nu[at] = if counts[c] == 0 {
                0.0
            } else {
                let mu_v = m.data()[at];
                (nu[at] + outside(c) * mu_v * mu_v) / counts[c] as f64
            };
        }
    }

    let (i_f, i_mu) = (flat.id(), mu.id());
    Ok(flat.tape().push_op(
        Rc::new(Tensor::from_raw(vec![NUM_CLASSES, cf], nu)),
        &[i_f, i_mu],
        Box::new(move |g, sink| {
            // Per (class, channel): sum over the region of (F - mu).
            let mut resid = vec![0.0; NUM_CLASSES * cf];
            let want_f = sink.wants(i_f);
            for ch in 0..cf {
                let row = &f.data()[ch * pixels..(ch + 1) * pixels];
                for (p, &c) in classes.iter().enumerate() {
                    let at = c as usize * cf + ch;
                    let d = row[p] - m.data()[at];
                    resid[at] += d;
                    if want_f {
                        let scale = 2.0 * g[at] / counts[c as usize] as f64;
                        sink.slot(i_f)[ch * pixels + p] += scale * d;
                    }
                }
            }
            if sink.wants(i_mu) {
                let slot = sink.slot(i_mu);
                for c in 0..NUM_CLASSES {
                    if counts[c] == 0 {
                        continue;
                    }
                    for ch in 0..cf {
                        let at = c * cf + ch;
                        let n = counts[c] as f64;
                        slot[at] += 2.0 * g[at] / n * (outside(c) * m.data()[at] - resid[at]);
                    }
                }
            }
        }),
    ))
}

/// Cosine of the spatially pooled feature vector against each node.
pub fn intra_graph<'t>(features: Var<'t>, nodes: &GraphNodes<'t>) -> Result<IntraClassGraph<'t>> {
    let shape = features.shape();
    let cf = nodes.mu.shape()[1];
    let spatial_axes: &[usize] = match shape.len() {
        3 => &[1, 2],
        4 if shape[0] == 1 => &[0, 2, 3],
        _ => return Err(Error::shape(format!("intra_graph features {shape:?}"))),
    };
    let pooled = features.mean_axes(spatial_axes)?;
    if pooled.shape() != [cf] {
        return Err(Error::shape(format!(
            "features have {:?} channels, nodes have {cf}",
            pooled.shape()
        )));
    }
    Ok(IntraClassGraph {
        c1: nodes.mu.cosine_rows(pooled, COSINE_EPSILON)?,
        c2: nodes.nu.cosine_rows(pooled, COSINE_EPSILON)?,
    })
}

pub fn inter_graph<'t>(nodes: &GraphNodes<'t>) -> Result<InterClassGraph<'t>> {
    Ok(InterClassGraph {
        e1: nodes.mu.pairwise_distances()?,
        e2: nodes.nu.pairwise_distances()?,
    })
}

/// Sum over both graphs and all classes of squared cosine differences.
pub fn iag_loss<'t>(target: &IntraClassGraph<'t>, fake: &IntraClassGraph<'t>) -> Result<Var<'t>> {
    let d1 = target.c1.sub(fake.c1)?.square().sum();
    let d2 = target.c2.sub(fake.c2)?.square().sum();
    d1.add(d2)
}

/// Sum over both graphs and all classes of squared edge-row differences.
pub fn itg_loss<'t>(target: &InterClassGraph<'t>, fake: &InterClassGraph<'t>) -> Result<Var<'t>> {
    let d1 = target.e1.sub(fake.e1)?.square().sum();
    let d2 = target.e2.sub(fake.e2)?.square().sum();
    d1.add(d2)
}

/// Both graph losses for a synthesized image against its target under one layout.
pub fn graph_losses<'t>(
    target: Var<'t>,
    fake: Var<'t>,
    layout: &SemanticLayout,
    mode: VarianceMode,
) -> Result<(Var<'t>, Var<'t>)> {
    let target = target.detach();
    let nodes_t = compute_nodes(target, layout, mode)?;
    let nodes_f = compute_nodes(fake, layout, mode)?;
    let iag = iag_loss(&intra_graph(target, &nodes_t)?, &intra_graph(fake, &nodes_f)?)?;
    let itg = itg_loss(&inter_graph(&nodes_t)?, &inter_graph(&nodes_f)?)?;
    Ok((iag, itg))
}

/// Plain-value snapshot of nodes and edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub mu: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub e1: Vec<Vec<f64>>,
    pub e2: Vec<Vec<f64>>,
    pub present: Vec<bool>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

impl GraphDump {
    pub fn capture(nodes: &GraphNodes<'_>, edges: &InterClassGraph<'_>) -> Self {
        Self {
            mu: rows(&nodes.mu.value()),
            nu: rows(&nodes.nu.value()),
            e1: rows(&edges.e1.value()),
            e2: rows(&edges.e2.value()),
            present: nodes.present.to_vec(),
        }
    }
}
