use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

pub const NORM_EPSILON: f64 = 1e-5;

/// Which axes the normalization statistics are pooled over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per `(n, c)` slice over `H x W`.
    #[default]
    Instance,
    /// Per channel over `N x H x W`.
    Batch,
}

impl<'t> Var<'t> {
    /// Parameter-free instance normalization: `(x - mean) / sqrt(var + eps)` per slice.
    pub fn normalize_instance(self, epsilon: f64) -> Result<Var<'t>> {
        self.normalize(NormKind::Instance, epsilon)
    }

    pub fn normalize(self, kind: NormKind, epsilon: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, plane) = match x.shape() {
            &[n, c, h, w] => (n, c, h * w),
            s => return Err(Error::shape(format!("normalize expects rank 4, got {s:?}"))),
        };
        // Each group is a list of contiguous planes sharing statistics.
        let groups: Vec<Vec<usize>> = match kind {
            NormKind::Instance => (0..n * c).map(|p| vec![p]).collect(),
            NormKind::Batch => (0..c).map(|ch| (0..n).map(|b| b * c + ch).collect()).collect(),
        };
        let mut out = vec![0.0; x.numel()];
        let mut inv_std = Vec::with_capacity(groups.len());
        for planes in &groups {
            let count = (planes.len() * plane) as f64;
            let values = || planes.iter().flat_map(|&p| &x.data()[p * plane..(p + 1) * plane]);
            let mean = values().sum::<f64>() / count;
            let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let is = 1.0 / (var + epsilon).sqrt();
            inv_std.push(is);
            for &p in planes {
                for i in p * plane..(p + 1) * plane {
                    out[i] = (x.data()[i] - mean) * is;
                }
            }
        }
        let y = Rc::new(Tensor::from_raw(x.shape().to_vec(), out));
        let y_saved = Rc::clone(&y);
        let id = self.id();
        Ok(self.tape().push_op(
            y,
            &[id],
            Box::new(move |g, sink| {
                let y = y_saved.data();
                let slot = sink.slot(id);
                for (planes, &is) in groups.iter().zip(&inv_std) {
                    let count = (planes.len() * plane) as f64;
                    let idx = || planes.iter().flat_map(|&p| p * plane..(p + 1) * plane);
                    let mean_g = idx().map(|i| g[i]).sum::<f64>() / count;
                    let mean_gy = idx().map(|i| g[i] * y[i]).sum::<f64>() / count;
                    for i in idx() {
                        slot[i] += is * (g[i] - mean_g - y[i] * mean_gy);
                    }
                }
            }),
        ))
    }
}
