use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::embed::TextEmbeddings;
use crate::engine::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// H×W image with `channels` float features per pixel (row-major, channel fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, col: usize, row: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, col: usize, row: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

/// (camera, col, row) address of one pixel.
pub type PixelRef = (usize, usize, usize);

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("dims match")
}

/// Dense layer `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let h = g.matmul(x, w)?;
        g.add_row_bias(h, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Three-layer pointwise MLP over per-point input features.
#[derive(Clone, Debug, PartialEq)]
pub struct PointExtractor {
    pub layers: [Linear; 3],
}

impl PointExtractor {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            layers: [
                Linear::new(store, "point.fc1", in_dim, hidden, rng),
                Linear::new(store, "point.fc2", hidden, hidden, rng),
                Linear::new(store, "point.fc3", hidden, out_dim, rng),
            ],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers[2].fan_out
    }

    /// `inputs` is N×in_dim row-major.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &[f64]) -> Result<Var> {
        let d = self.in_dim();
        if !inputs.len().is_multiple_of(d) {
            return Err(Error::contract(format!(
                "point inputs of length {} are not a multiple of {d}",
                inputs.len()
            )));
        }
        let x = g.constant(inputs.len() / d, d, inputs.to_vec())?;
        let h = self.layers[0].forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, store, h)?;
        let h = g.relu(h);
        self.layers[2].forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

const OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Two zero-padded 3×3 convolutions followed by a pointwise layer.
///
/// Evaluation is sparse: outputs are produced only at the requested pixels,
/// by recomputing the first convolution on each pixel's 3×3 neighbourhood.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageExtractor {
    pub conv1: Linear,
    pub conv2: Linear,
    pub fc: Linear,
    pub in_channels: usize,
}

impl ImageExtractor {
    pub fn new(
        store: &mut ParamStore,
        in_channels: usize,
        conv_channels: (usize, usize),
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (c1, c2) = conv_channels;
        Self {
            conv1: Linear::new(store, "image.conv1", 9 * in_channels, c1, rng),
            conv2: Linear::new(store, "image.conv2", 9 * c1, c2, rng),
            fc: Linear::new(store, "image.fc", c2, out_dim, rng),
            in_channels,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fc.fan_out
    }

    /// Features at `pixels`, one row per pixel, in the given order.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[FeatureImage],
        pixels: &[PixelRef],
    ) -> Result<Var> {
        let cin = self.in_channels;
        let n = pixels.len();
        if n == 0 {
            return Err(Error::contract("image extractor called with no pixels"));
        }
        for img in images {
            if img.channels != cin {
                return Err(Error::Shape {
                    op: "image_extractor",
                    lhs: vec![img.height, img.width, img.channels],
                    rhs: vec![cin],
                });
            }
        }
        // Block k holds, for every requested pixel p, the 3×3 input patch
        // centred on p + OFFSETS[k]; `inside` zero-pads the first conv output.
        let mut patches = vec![0.0; 9 * n * 9 * cin];
        let mut inside = vec![0.0; 9 * n];
        for (k, (dr, dc)) in OFFSETS.iter().enumerate() {
            for (i, &(cam, col, row)) in pixels.iter().enumerate() {
                let img = images
                    .get(cam)
                    .ok_or_else(|| Error::contract(format!("no image for camera {cam}")))?;
                let r = row as isize + dr;
                let c = col as isize + dc;
                if !in_frame(img, r, c) {
                    continue;
                }
                let slot = k * n + i;
                inside[slot] = 1.0;
                let dst = &mut patches[slot * 9 * cin..(slot + 1) * 9 * cin];
                for (j, (er, ec)) in OFFSETS.iter().enumerate() {
                    let rr = r + er;
                    let cc = c + ec;
                    if in_frame(img, rr, cc) {
                        dst[j * cin..(j + 1) * cin]
                            .copy_from_slice(img.pixel(cc as usize, rr as usize));
                    }
                }
            }
        }
        let x = g.constant(9 * n, 9 * cin, patches)?;
        let mask = g.constant(9 * n, 1, inside)?;
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = g.mul_rows(h, mask)?;
        let h = g.blocks_to_cols(h, 9)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = g.relu(h);
        self.fc.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.conv1, self.conv2, self.fc]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }
}

fn in_frame(img: &FeatureImage, r: isize, c: isize) -> bool {
    r >= 0 && c >= 0 && (r as usize) < img.height && (c as usize) < img.width
}

/// Linear map from extractor features to the text-embedding space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionHead {
    pub weight: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(rng, in_dim, out_dim));
        Self {
            weight,
            in_dim,
            out_dim,
        }
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        g.matmul(features, w)
    }
}

/// Cosine-similarity logits: projected features are L2-normalized per row
/// and dotted with every (unit) class embedding. Zero projections yield
/// all-zero rows.
pub fn compute_logits(
    g: &mut Graph,
    store: &ParamStore,
    features: Var,
    head: &ProjectionHead,
    emb: &TextEmbeddings,
) -> Result<Var> {
    let projected = head.project(g, store, features)?;
    logits_from_projected(g, projected, emb)
}

/// Logits of already-projected features (M×D) against the embeddings.
pub fn logits_from_projected(g: &mut Graph, projected: Var, emb: &TextEmbeddings) -> Result<Var> {
    let (_, d) = g.dims(projected);
    if d != emb.dim() {
        return Err(Error::Shape {
            op: "compute_logits",
            lhs: vec![g.dims(projected).0, d],
            rhs: vec![emb.classes(), emb.dim()],
        });
    }
    let unit = g.normalize_rows(projected);
    let et = g.constant(emb.dim(), emb.classes(), emb.transposed())?;
    g.matmul(unit, et)
}
