use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::Linear;
use crate::engine::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Weights of the vision-point matching module.
///
/// Image rows act as queries: they first attend to each other, then attend
/// (multi-head) to the paired point rows as keys/values. The concatenated
/// heads go through a feed-forward block and a two-way classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct VpmParams {
    pub dim: usize,
    pub heads: usize,
    pub self_q: ParamId,
    pub self_k: ParamId,
    pub self_v: ParamId,
    pub cross_q: ParamId,
    pub cross_k: ParamId,
    pub cross_v: ParamId,
    pub ffn: [Linear; 2],
    pub classifier: [Linear; 2],
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("dims match")
}

impl VpmParams {
    /// `dim` is the paired feature width; the FFN hidden width is `2·dim`.
    pub fn new(store: &mut ParamStore, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "vpm heads ({heads}) must divide the feature dimension ({dim})"
            )));
        }
        let mut sq = |name: &str, rng: &mut ChaCha8Rng| store.add(format!("vpm.{name}"), xavier(rng, dim, dim));
        let self_q = sq("self_q", rng);
        let self_k = sq("self_k", rng);
        let self_v = sq("self_v", rng);
        let cross_q = sq("cross_q", rng);
        let cross_k = sq("cross_k", rng);
        let cross_v = sq("cross_v", rng);
        let ffn = [
            Linear::new(store, "vpm.ffn1", dim, 2 * dim, rng),
            Linear::new(store, "vpm.ffn2", 2 * dim, dim, rng),
        ];
        let classifier = [
            Linear::new(store, "vpm.cls1", dim, dim, rng),
            Linear::new(store, "vpm.cls2", dim, 2, rng),
        ];
        Ok(Self {
            dim,
            heads,
            self_q,
            self_k,
            self_v,
            cross_q,
            cross_k,
            cross_v,
            ffn,
            classifier,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.self_q,
            self.self_k,
            self.self_v,
            self.cross_q,
            self.cross_k,
            self.cross_v,
        ];
        for l in self.ffn.iter().chain(&self.classifier) {
            ids.extend(l.params());
        }
        ids
    }
}

/// Intermediate nodes of one VPM forward pass.
#[derive(Clone, Debug)]
pub struct VpmTrace {
    pub attended_image: Var,
    pub heads: Vec<Var>,
    pub encoded: Var,
    pub logits: Var,
}

/// Match logits (r×2) for r paired image/point feature rows.
pub fn vpm_forward(
    g: &mut Graph,
    store: &ParamStore,
    image_feats: Var,
    point_feats: Var,
    params: &VpmParams,
) -> Result<Var> {
    Ok(vpm_forward_traced(g, store, image_feats, point_feats, params)?.logits)
}

pub fn vpm_forward_traced(
    g: &mut Graph,
    store: &ParamStore,
    image_feats: Var,
    point_feats: Var,
    params: &VpmParams,
) -> Result<VpmTrace> {
    let di = g.dims(image_feats);
    let dp = g.dims(point_feats);
    if di != dp || di.1 != params.dim || di.0 == 0 {
        return Err(Error::Shape {
            op: "vpm_forward",
            lhs: vec![di.0, di.1],
            rhs: vec![dp.0, dp.1, params.dim],
        });
    }
    let d = params.dim;
    let p = |g: &mut Graph, id| g.param(store, id);

    let (wq, wk, wv) = (p(g, params.self_q)?, p(g, params.self_k)?, p(g, params.self_v)?);
    let q = g.matmul(image_feats, wq)?;
    let k = g.matmul(image_feats, wk)?;
    let v = g.matmul(image_feats, wv)?;
    let self_att = g.attention(q, k, v, 1.0 / (d as f64).sqrt())?;
    let attended_image = g.add(image_feats, self_att)?;

    let (cq, ck, cv) = (p(g, params.cross_q)?, p(g, params.cross_k)?, p(g, params.cross_v)?);
    let q = g.matmul(attended_image, cq)?;
    let k = g.matmul(point_feats, ck)?;
    let v = g.matmul(point_feats, cv)?;
    let hd = params.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (a, b) = (h * hd, (h + 1) * hd);
        let qh = g.slice_cols(q, a, b)?;
        let kh = g.slice_cols(k, a, b)?;
        let vh = g.slice_cols(v, a, b)?;
        heads.push(g.attention(qh, kh, vh, scale)?);
    }
    let cat = g.concat_cols(&heads)?;
    let x = g.add(cat, attended_image)?;

    let hidden = params.ffn[0].forward(g, store, x)?;
    let hidden = g.relu(hidden);
    let encoded = params.ffn[1].forward(g, store, hidden)?;

    let h = params.classifier[0].forward(g, store, encoded)?;
    let h = g.relu(h);
    let logits = params.classifier[1].forward(g, store, h)?;
    Ok(VpmTrace {
        attended_image,
        heads,
        encoded,
        logits,
    })
}
