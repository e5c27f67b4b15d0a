//! The toy pose network: patch projection with 2D sinusoidal positions, a
//! deformable encoder, a query decoder emitting `Q × K × 3` directly, an
//! auxiliary heatmap head and a refinement-decoder variant used for latency
//! comparison.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    deformable_attention, multi_head_attention, sinusoidal_pos_encoding, AttentionConfig, DeformableConfig,
    DeformableParams, Linear, MultiHeadParams,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::pose::{PoseOutput, PoseVars};
use crate::rng::{uniform, RngState};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub sample_points: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub num_keypoints: usize,
    pub ffn_dim: usize,
    pub refinement_decoder: bool,
}

impl Default for ModelConfig {
    /// Six encoder and five decoder layers, 300 queries, 17 keypoints.
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            channels: 3,
            patch: 8,
            d_model: 64,
            heads: 4,
            sample_points: 4,
            encoder_layers: 6,
            decoder_layers: 5,
            num_queries: 300,
            num_keypoints: 17,
            ffn_dim: 128,
            refinement_decoder: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale training configuration on 32×32 mini-skeleton scenes.
    pub fn toy() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 1,
            patch: 4,
            d_model: 32,
            heads: 4,
            sample_points: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 8,
            num_keypoints: 4,
            ffn_dim: 64,
            refinement_decoder: false,
        }
    }

    /// Smallest configuration, sized for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch: 4,
            d_model: 8,
            heads: 2,
            sample_points: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            num_queries: 3,
            num_keypoints: 2,
            ffn_dim: 8,
            refinement_decoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch == 0 || self.image_h == 0 || self.image_w == 0 {
            return bad("image size and patch must be positive".into());
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return bad(format!(
                "image {}x{} is not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.channels == 0 || self.ffn_dim == 0 || self.num_keypoints == 0 || self.num_queries == 0 {
            return bad("channels, ffn_dim, num_keypoints and num_queries must be positive".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder_layers and decoder_layers must be at least 1".into());
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a multiple of 4", self.d_model));
        }
        AttentionConfig::new(self.d_model, self.heads)?;
        DeformableConfig::new(self.sample_points)?;
        Ok(())
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
        }
    }

    pub fn deformable(&self) -> DeformableConfig {
        DeformableConfig {
            sample_points: self.sample_points,
        }
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform(usize),
    Ones,
    Zeros,
}

struct Layout(Vec<(String, Vec<usize>, Init)>);

impl Layout {
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        self.0.push((format!("{name}.w"), vec![d_in, d_out], Init::Uniform(d_in)));
        self.0.push((format!("{name}.b"), vec![d_out], Init::Uniform(d_in)));
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.0.push((format!("{name}.gain"), vec![d], Init::Ones));
        self.0.push((format!("{name}.bias"), vec![d], Init::Zeros));
    }

    fn mha(&mut self, name: &str, d: usize) {
        for role in ["query", "key", "value", "out"] {
            self.linear(&format!("{name}.{role}"), d, d);
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) {
        self.linear(&format!("{name}.ffn1"), d, hidden);
        self.linear(&format!("{name}.ffn2"), hidden, d);
    }

    fn decoder(&mut self, prefix: &str, cfg: &ModelConfig) {
        let d = cfg.d_model;
        for l in 0..cfg.decoder_layers {
            let n = format!("{prefix}.{l}");
            self.mha(&format!("{n}.self"), d);
            self.norm(&format!("{n}.ln1"), d);
            self.mha(&format!("{n}.cross"), d);
            self.norm(&format!("{n}.ln2"), d);
            self.ffn(&n, d, cfg.ffn_dim);
            self.norm(&format!("{n}.ln3"), d);
        }
    }

    fn of(cfg: &ModelConfig) -> Layout {
        let (d, k) = (cfg.d_model, cfg.num_keypoints);
        let hp = cfg.heads * cfg.sample_points;
        let mut l = Layout(Vec::new());
        l.linear("patch", cfg.patch_dim(), d);
        for i in 0..cfg.encoder_layers {
            let n = format!("enc.{i}");
            l.linear(&format!("{n}.attn.offsets"), d, hp * 2);
            l.linear(&format!("{n}.attn.weights"), d, hp);
            l.linear(&format!("{n}.attn.value"), d, d);
            l.linear(&format!("{n}.attn.out"), d, d);
            l.norm(&format!("{n}.ln1"), d);
            l.ffn(&n, d, cfg.ffn_dim);
            l.norm(&format!("{n}.ln2"), d);
        }
        l.0.push(("query_embed".into(), vec![cfg.num_queries, d], Init::Uniform(1)));
        l.decoder("dec", cfg);
        l.linear("head.score", d, 1);
        l.linear("head.kp1", d, d);
        l.linear("head.kp2", d, k * 3);
        l.linear("head.heatmap", d, k);
        if cfg.refinement_decoder {
            l.decoder("refine", cfg);
            l.linear("refine.delta", d, k * 2);
        }
        l.0.sort_by(|a, b| a.0.cmp(&b.0));
        l
    }
}

/// Learned tensors keyed by `layer.role` names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Weights and biases uniform in `±1/√fan_in`, query embeddings uniform
    /// in `±1`, normalisation gains one and biases zero. Tensors are drawn in
    /// name order from a single stream.
    pub fn init(cfg: &ModelConfig, seed: &RngState) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.stream(0);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in Layout::of(cfg).0 {
            let t = match init {
                Init::Uniform(fan_in) => {
                    let r = 1.0 / libm::sqrt(fan_in as f64);
                    Tensor::from_fn(&shape, |_| uniform(&mut rng, -r, r))
                }
                Init::Ones => Tensor::full(&shape, 1.0),
                Init::Zeros => Tensor::zeros(&shape),
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Assembles parameters from named tensors, checking them against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let p = Self { tensors };
        p.check(cfg)?;
        Ok(p)
    }

    /// Verifies that names and shapes are exactly those `cfg` requires.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let layout = Layout::of(cfg).0;
        if layout.len() != self.tensors.len() {
            return Err(Error::Schema(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in &layout {
            match self.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Schema(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                None => return Err(Error::Schema(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            feed(name.as_bytes());
            for &s in t.shape() {
                feed(&(s as u64).to_le_bytes());
            }
            for &v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Places every tensor on `g`, as a trainable leaf or as a constant.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles of a [`ModelParams`] set.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds from explicit handles, e.g. gradient-check inputs given in the
    /// order of [`ModelParams::iter`].
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing parameter {name}")))
    }

    fn linear(&self, name: &str) -> Result<Linear> {
        Ok(Linear {
            w: self.var(&format!("{name}.w"))?,
            b: self.var(&format!("{name}.b"))?,
        })
    }

    fn mha(&self, name: &str) -> Result<MultiHeadParams> {
        Ok(MultiHeadParams {
            query: self.linear(&format!("{name}.query"))?,
            key: self.linear(&format!("{name}.key"))?,
            value: self.linear(&format!("{name}.value"))?,
            out: self.linear(&format!("{name}.out"))?,
        })
    }

    fn deformable(&self, name: &str) -> Result<DeformableParams> {
        Ok(DeformableParams {
            offsets: self.linear(&format!("{name}.offsets"))?,
            weights: self.linear(&format!("{name}.weights"))?,
            value: self.linear(&format!("{name}.value"))?,
            out: self.linear(&format!("{name}.out"))?,
        })
    }
}

/// Channels `[0, d/2)` encode the patch row and `[d/2, d)` the patch column,
/// each with the interleaved sinusoidal scheme.
pub fn pos_encoding_2d(grid_h: usize, grid_w: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 4 != 0 {
        return Err(Error::OddDimension(d_model / 2));
    }
    let half = d_model / 2;
    let rows = sinusoidal_pos_encoding(grid_h, half)?;
    let cols = sinusoidal_pos_encoding(grid_w, half)?;
    Ok(Tensor::from_fn(&[grid_h * grid_w, d_model], |i| {
        let (t, ch) = (i / d_model, i % d_model);
        let (r, c) = (t / grid_w, t % grid_w);
        if ch < half {
            rows.at(r, ch)
        } else {
            cols.at(c, ch - half)
        }
    }))
}

/// Rearranges an `h × w × c` image into one row per patch, row-major over
/// the patch grid, each row ordered `(dy, dx, channel)`.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let expect = [cfg.image_h, cfg.image_w, cfg.channels];
    if image.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let (p, c) = (cfg.patch, cfg.channels);
    let (_, gw) = cfg.grid();
    let pd = cfg.patch_dim();
    let data = image.data();
    Ok(Tensor::from_fn(&[cfg.tokens(), pd], |i| {
        let (t, j) = (i / pd, i % pd);
        let (r, col) = (t / gw, t % gw);
        let (dy, dx, ch) = (j / (p * c), (j / c) % p, j % c);
        data[((r * p + dy) * cfg.image_w + col * p + dx) * c + ch]
    }))
}

/// Projected patches plus positional encodings: `[tokens, d_model]`.
pub fn extract_features(g: &Graph, image: &Tensor, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    cfg.validate()?;
    let patches = g.constant(patchify(image, cfg)?);
    let (gh, gw) = cfg.grid();
    let tokens = p.linear("patch")?.apply(g, patches)?;
    g.add(tokens, g.constant(pos_encoding_2d(gh, gw, cfg.d_model)?))
}

fn norm(g: &Graph, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let y = g.layer_norm_rows(x, LAYER_NORM_EPS)?;
    let y = g.mul_row(y, p.var(&format!("{name}.gain"))?)?;
    g.add_row(y, p.var(&format!("{name}.bias"))?)
}

fn ffn(g: &Graph, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let h = g.relu(p.linear(&format!("{name}.ffn1"))?.apply(g, x)?);
    p.linear(&format!("{name}.ffn2"))?.apply(g, h)
}

/// Encoder stack over tokens in grid order.
pub fn encode(g: &Graph, tokens: Var, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    let cells: Vec<usize> = (0..cfg.tokens()).collect();
    encode_with_layout(g, tokens, &cells, cfg, p)
}

/// Encoder stack where row `i` of `tokens` belongs to grid cell `cells[i]`.
///
/// Each layer runs deformable self-attention with the token's own cell
/// centre `(x = col, y = row)` as reference point, then a feed-forward
/// block, both with residual addition and post-normalisation.
pub fn encode_with_layout(g: &Graph, tokens: Var, cells: &[usize], cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    let (gh, gw) = cfg.grid();
    let n = cfg.tokens();
    let shape = g.shape(tokens);
    let mut seen = vec![false; n];
    let valid = cells.len() == n && cells.iter().all(|&c| c < n && !core::mem::replace(&mut seen[c], true));
    if shape != [n, cfg.d_model] || !valid {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: shape,
            rhs: vec![n, cfg.d_model],
        });
    }
    let identity = cells.iter().enumerate().all(|(i, &c)| i == c);
    let mut row_of_cell = vec![0; n];
    for (row, &c) in cells.iter().enumerate() {
        row_of_cell[c] = row;
    }
    let refs: Vec<(f64, f64)> = cells.iter().map(|&c| ((c % gw) as f64, (c / gw) as f64)).collect();
    let (attn, dcfg, d) = (cfg.attention(), cfg.deformable(), cfg.d_model);

    let mut x = tokens;
    for l in 0..cfg.encoder_layers {
        let name = format!("enc.{l}");
        let map = if identity {
            g.reshape(x, &[gh, gw, d])?
        } else {
            let idx = row_of_cell.iter().flat_map(|&r| (0..d).map(move |c| r * d + c)).collect();
            g.gather(x, idx, &[gh, gw, d])?
        };
        let params = p.deformable(&format!("{name}.attn"))?;
        let a = deformable_attention(g, x, &refs, map, &attn, &dcfg, &params)?;
        x = norm(g, g.add(x, a)?, p, &format!("{name}.ln1"))?;
        let f = ffn(g, x, p, &name)?;
        x = norm(g, g.add(x, f)?, p, &format!("{name}.ln2"))?;
    }
    Ok(x)
}

fn decoder_stack(g: &Graph, queries: Var, memory: Var, cfg: &ModelConfig, p: &Bound, prefix: &str) -> Result<Var> {
    let attn = cfg.attention();
    let mut q = queries;
    for l in 0..cfg.decoder_layers {
        let name = format!("{prefix}.{l}");
        let s = multi_head_attention(g, q, q, &attn, &p.mha(&format!("{name}.self"))?)?;
        q = norm(g, g.add(q, s)?, p, &format!("{name}.ln1"))?;
        let c = multi_head_attention(g, q, memory, &attn, &p.mha(&format!("{name}.cross"))?)?;
        q = norm(g, g.add(q, c)?, p, &format!("{name}.ln2"))?;
        let f = ffn(g, q, p, &name)?;
        q = norm(g, g.add(q, f)?, p, &format!("{name}.ln3"))?;
    }
    Ok(q)
}

/// Decoder output before the prediction heads, `[Q, d_model]`.
pub fn decode_hidden(g: &Graph, memory: Var, queries: Var, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    let qs = g.shape(queries);
    if qs.len() != 2 || qs[1] != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: qs,
            rhs: vec![cfg.num_queries, cfg.d_model],
        });
    }
    decoder_stack(g, queries, memory, cfg, p, "dec")
}

fn heads(g: &Graph, hidden: Var, cfg: &ModelConfig, p: &Bound) -> Result<PoseVars> {
    let q = g.shape(hidden)[0];
    let score = g.sigmoid(p.linear("head.score")?.apply(g, hidden)?);
    let h = g.relu(p.linear("head.kp1")?.apply(g, hidden)?);
    let kp = g.sigmoid(p.linear("head.kp2")?.apply(g, h)?);
    Ok(PoseVars {
        scores: g.reshape(score, &[q])?,
        keypoints: g.reshape(kp, &[q, cfg.num_keypoints, 3])?,
    })
}

/// Decoder over the learned query embeddings followed by score and
/// keypoint heads.
pub fn decode(g: &Graph, memory: Var, cfg: &ModelConfig, p: &Bound) -> Result<PoseVars> {
    decode_queries(g, memory, p.var("query_embed")?, cfg, p)
}

/// [`decode`] with explicit query embeddings.
pub fn decode_queries(g: &Graph, memory: Var, queries: Var, cfg: &ModelConfig, p: &Bound) -> Result<PoseVars> {
    let hidden = decode_hidden(g, memory, queries, cfg, p)?;
    heads(g, hidden, cfg, p)
}

/// Per-token sigmoid heatmap, `[grid_h, grid_w, K]`.
pub fn heatmap_head(g: &Graph, memory: Var, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    let (gh, gw) = cfg.grid();
    let hm = g.sigmoid(p.linear("head.heatmap")?.apply(g, memory)?);
    g.reshape(hm, &[gh, gw, cfg.num_keypoints])
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub pose: PoseVars,
    pub heatmap: Var,
}

pub fn forward(g: &Graph, image: &Tensor, cfg: &ModelConfig, p: &Bound) -> Result<ForwardVars> {
    let tokens = extract_features(g, image, cfg, p)?;
    let memory = encode(g, tokens, cfg, p)?;
    Ok(ForwardVars {
        pose: decode(g, memory, cfg, p)?,
        heatmap: heatmap_head(g, memory, cfg, p)?,
    })
}

/// One-stage prediction followed by a refinement decoder of equal depth
/// that re-attends to the memory and adds coordinate deltas, clamped to the
/// image frame. Confidences pass through unchanged.
pub fn forward_two_stage(g: &Graph, image: &Tensor, cfg: &ModelConfig, p: &Bound) -> Result<PoseVars> {
    if !cfg.refinement_decoder {
        return Err(Error::InvalidConfig("refinement_decoder is not enabled".into()));
    }
    let (q, k) = (cfg.num_queries, cfg.num_keypoints);
    let tokens = extract_features(g, image, cfg, p)?;
    let memory = encode(g, tokens, cfg, p)?;
    let hidden = decode_hidden(g, memory, p.var("query_embed")?, cfg, p)?;
    let first = heads(g, hidden, cfg, p)?;
    let refined = decoder_stack(g, hidden, memory, cfg, p, "refine")?;
    let delta = p.linear("refine.delta")?.apply(g, refined)?;
    let spread = g.constant(Tensor::from_fn(&[k * 2, k * 3], |i| {
        let (r, c) = (i / (k * 3), i % (k * 3));
        if c % 3 < 2 && r == (c / 3) * 2 + c % 3 {
            1.0
        } else {
            0.0
        }
    }));
    let delta = g.matmul(delta, spread)?;
    let flat = g.reshape(first.keypoints, &[q, k * 3])?;
    let moved = g.clamp(g.add(flat, delta)?, 0.0, 1.0);
    Ok(PoseVars {
        scores: first.scores,
        keypoints: g.reshape(moved, &[q, k, 3])?,
    })
}

/// Configuration and parameters together, for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: ModelParams) -> Result<Self> {
        params.check(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: &RngState) -> Result<Self> {
        let params = ModelParams::init(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    /// Pose output and auxiliary heatmap for one image.
    pub fn predict(&self, image: &Tensor) -> Result<(PoseOutput, Tensor)> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = forward(&g, image, &self.cfg, &p)?;
        let hm = g.value(out.heatmap).clone();
        Ok((out.pose.values(&g), hm))
    }

    pub fn predict_two_stage(&self, image: &Tensor) -> Result<PoseOutput> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        Ok(forward_two_stage(&g, image, &self.cfg, &p)?.values(&g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::losses::{composite_loss, composite_loss_with_assignment, FocalParams, HeatmapFocalParams, LossConfig, LossWeights};
    use crate::metrics::GtInstance;
    use rand::seq::SliceRandom;

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = RngState::new(seed).stream(9);
        Tensor::from_fn(&[cfg.image_h, cfg.image_w, cfg.channels], |_| uniform(&mut rng, 0.0, 1.0))
    }

    // ---- scalar oracle ------------------------------------------------------

    type Mat = Vec<Vec<f64>>;

    struct Oracle<'a> {
        p: &'a ModelParams,
        cfg: &'a ModelConfig,
    }

    impl Oracle<'_> {
        fn t(&self, name: &str) -> &Tensor {
            self.p.get(name).unwrap()
        }

        fn lin(&self, x: &Mat, name: &str) -> Mat {
            let (w, b) = (self.t(&format!("{name}.w")), self.t(&format!("{name}.b")));
            x.iter()
                .map(|row| {
                    (0..w.cols())
                        .map(|j| {
                            let mut s = 0.0;
                            for (i, xi) in row.iter().enumerate() {
                                s += xi * w.at(i, j);
                            }
                            s + b.data()[j]
                        })
                        .collect()
                })
                .collect()
        }

        fn norm(&self, x: &Mat, name: &str) -> Mat {
            let (gain, bias) = (self.t(&format!("{name}.gain")), self.t(&format!("{name}.bias")));
            x.iter()
                .map(|row| {
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let sd = (var + LAYER_NORM_EPS).sqrt();
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| (v - mean) / sd * gain.data()[j] + bias.data()[j])
                        .collect()
                })
                .collect()
        }

        fn add(a: &Mat, b: &Mat) -> Mat {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
        }

        fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
            a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
        }

        fn ffn(&self, x: &Mat, name: &str) -> Mat {
            let h = Self::map(&self.lin(x, &format!("{name}.ffn1")), |v| v.max(0.0));
            self.lin(&h, &format!("{name}.ffn2"))
        }

        fn softmax(v: &[f64]) -> Vec<f64> {
            let m = v.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        }

        fn mha(&self, xq: &Mat, xkv: &Mat, name: &str) -> Mat {
            let q = self.lin(xq, &format!("{name}.query"));
            let k = self.lin(xkv, &format!("{name}.key"));
            let v = self.lin(xkv, &format!("{name}.value"));
            let dk = self.cfg.d_model / self.cfg.heads;
            let mut merged = vec![vec![0.0; self.cfg.d_model]; xq.len()];
            for h in 0..self.cfg.heads {
                let cols = h * dk..(h + 1) * dk;
                for i in 0..xq.len() {
                    let logits: Vec<f64> = (0..xkv.len())
                        .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                        .collect();
                    let a = Self::softmax(&logits);
                    for c in cols.clone() {
                        merged[i][c] = (0..xkv.len()).map(|j| a[j] * v[j][c]).sum();
                    }
                }
            }
            self.lin(&merged, &format!("{name}.out"))
        }

        fn bilinear(map: &[Mat], x: f64, y: f64, cols: core::ops::Range<usize>) -> Vec<f64> {
            let (h, w) = (map.len() as i64, map[0].len() as i64);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let mut out = vec![0.0; cols.len()];
            for (dy, dx, wt) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (0, 1, fx * (1.0 - fy)), (1, 0, (1.0 - fx) * fy), (1, 1, fx * fy)] {
                let (yy, xx) = (y0 as i64 + dy, x0 as i64 + dx);
                if yy >= 0 && yy < h && xx >= 0 && xx < w {
                    for (o, c) in out.iter_mut().zip(cols.clone()) {
                        *o += wt * map[yy as usize][xx as usize][c];
                    }
                }
            }
            out
        }

        fn deformable(&self, x: &Mat, name: &str) -> Mat {
            let (gh, gw) = self.cfg.grid();
            let (heads, pts, dk) = (self.cfg.heads, self.cfg.sample_points, self.cfg.d_model / self.cfg.heads);
            let v = self.lin(x, &format!("{name}.value"));
            let vmap: Vec<Mat> = (0..gh).map(|r| (0..gw).map(|c| v[r * gw + c].clone()).collect()).collect();
            let off = self.lin(x, &format!("{name}.offsets"));
            let logit = self.lin(x, &format!("{name}.weights"));
            let mut merged = vec![vec![0.0; self.cfg.d_model]; x.len()];
            for (t, row) in merged.iter_mut().enumerate() {
                let (rx, ry) = ((t % gw) as f64, (t / gw) as f64);
                for h in 0..heads {
                    let a = Self::softmax(&logit[t][h * pts..(h + 1) * pts]);
                    for s in 0..pts {
                        let o = (h * pts + s) * 2;
                        let sample = Self::bilinear(&vmap, rx + off[t][o], ry + off[t][o + 1], h * dk..(h + 1) * dk);
                        for (c, sv) in sample.iter().enumerate() {
                            row[h * dk + c] += a[s] * sv;
                        }
                    }
                }
            }
            self.lin(&merged, &format!("{name}.out"))
        }

        fn features(&self, img: &Tensor) -> Mat {
            let cfg = self.cfg;
            let (gh, gw) = cfg.grid();
            let (p, c) = (cfg.patch, cfg.channels);
            let mut patches = Vec::new();
            for r in 0..gh {
                for col in 0..gw {
                    let mut v = Vec::new();
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                v.push(img.data()[((r * p + dy) * cfg.image_w + col * p + dx) * c + ch]);
                            }
                        }
                    }
                    patches.push(v);
                }
            }
            let proj = self.lin(&patches, "patch");
            let half = cfg.d_model / 2;
            proj.iter()
                .enumerate()
                .map(|(t, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(ch, v)| {
                            let (pos, j) = if ch < half { ((t / gw) as f64, ch) } else { ((t % gw) as f64, ch - half) };
                            let angle = pos / 10000f64.powf((2 * (j / 2)) as f64 / half as f64);
                            v + if j % 2 == 0 { angle.sin() } else { angle.cos() }
                        })
                        .collect()
                })
                .collect()
        }

        fn encode(&self, mut x: Mat) -> Mat {
            for l in 0..self.cfg.encoder_layers {
                let n = format!("enc.{l}");
                let a = self.deformable(&x, &format!("{n}.attn"));
                x = self.norm(&Self::add(&x, &a), &format!("{n}.ln1"));
                let f = self.ffn(&x, &n);
                x = self.norm(&Self::add(&x, &f), &format!("{n}.ln2"));
            }
            x
        }

        fn decode(&self, mem: &Mat) -> (Vec<f64>, Mat) {
            let qe = self.t("query_embed");
            let mut q: Mat = (0..qe.rows()).map(|i| qe.row(i).to_vec()).collect();
            for l in 0..self.cfg.decoder_layers {
                let n = format!("dec.{l}");
                let s = self.mha(&q, &q, &format!("{n}.self"));
                q = self.norm(&Self::add(&q, &s), &format!("{n}.ln1"));
                let c = self.mha(&q, mem, &format!("{n}.cross"));
                q = self.norm(&Self::add(&q, &c), &format!("{n}.ln2"));
                let f = self.ffn(&q, &n);
                q = self.norm(&Self::add(&q, &f), &format!("{n}.ln3"));
            }
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let scores = self.lin(&q, "head.score").iter().map(|r| sig(r[0])).collect();
            let h = Self::map(&self.lin(&q, "head.kp1"), |v| v.max(0.0));
            (scores, Self::map(&self.lin(&h, "head.kp2"), sig))
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    // ---- features -------------------------------------------------------------

    #[test]
    fn patchify_four_by_four() {
        let cfg = ModelConfig {
            image_h: 4,
            image_w: 4,
            patch: 2,
            channels: 1,
            ..ModelConfig::tiny()
        };
        let img = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn features_match_scalar_oracle() {
        let cfg = ModelConfig {
            image_h: 4,
            image_w: 4,
            patch: 2,
            channels: 2,
            ..ModelConfig::tiny()
        };
        let params = ModelParams::init(&cfg, &RngState::new(3)).unwrap();
        let img = image(&cfg, 1);
        let g = Graph::new();
        let f = extract_features(&g, &img, &cfg, &params.bind(&g, false)).unwrap();
        let want = Oracle { p: &params, cfg: &cfg }.features(&img);
        assert_eq!(g.value(f).shape(), &[4, cfg.d_model]);
        close(g.value(f).data(), &want.concat(), 1e-12);
    }

    #[test]
    fn zero_image_and_bias_give_pure_positions() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParams::init(&cfg, &RngState::new(3)).unwrap();
        *params.get_mut("patch.b").unwrap() = Tensor::zeros(&[cfg.d_model]);
        let g = Graph::new();
        let img = Tensor::zeros(&[cfg.image_h, cfg.image_w, cfg.channels]);
        let f = extract_features(&g, &img, &cfg, &params.bind(&g, false)).unwrap();
        let (gh, gw) = cfg.grid();
        assert_eq!(*g.value(f), pos_encoding_2d(gh, gw, cfg.d_model).unwrap());
    }

    #[test]
    fn feature_errors() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, &RngState::new(3)).unwrap();
        let g = Graph::new();
        let bad = Tensor::zeros(&[7, 8, 1]);
        assert!(matches!(
            extract_features(&g, &bad, &cfg, &params.bind(&g, false)),
            Err(Error::ShapeMismatch { .. })
        ));
        let odd = ModelConfig { image_h: 9, ..cfg.clone() };
        assert!(matches!(odd.validate(), Err(Error::InvalidConfig(_))));
        assert!(matches!(ModelConfig { encoder_layers: 0, ..cfg.clone() }.validate(), Err(Error::InvalidConfig(_))));
        assert!(matches!(ModelConfig { decoder_layers: 0, ..cfg }.validate(), Err(Error::InvalidConfig(_))));
    }

    // ---- encoder / decoder ------------------------------------------------------

    #[test]
    fn encoder_matches_scalar_oracle() {
        let cfg = ModelConfig {
            image_h: 12,
            image_w: 8,
            ..ModelConfig::tiny()
        };
        let params = ModelParams::init(&cfg, &RngState::new(5)).unwrap();
        let img = image(&cfg, 2);
        let g = Graph::new();
        let p = params.bind(&g, false);
        let mem = encode(&g, extract_features(&g, &img, &cfg, &p).unwrap(), &cfg, &p).unwrap();
        let o = Oracle { p: &params, cfg: &cfg };
        let want = o.encode(o.features(&img));
        close(g.value(mem).data(), &want.concat(), 1e-9);
    }

    #[test]
    fn zeroed_branches_leave_normalised_tokens() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParams::init(&cfg, &RngState::new(6)).unwrap();
        for name in ["enc.0.attn.out.w", "enc.0.attn.out.b", "enc.0.ffn2.w", "enc.0.ffn2.b"] {
            let t = params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let img = image(&cfg, 3);
        let g = Graph::new();
        let p = params.bind(&g, false);
        let tokens = extract_features(&g, &img, &cfg, &p).unwrap();
        let mem = encode(&g, tokens, &cfg, &p).unwrap();
        let once = g.layer_norm_rows(tokens, LAYER_NORM_EPS).unwrap();
        let twice = g.layer_norm_rows(once, LAYER_NORM_EPS).unwrap();
        assert!(g.value(mem).max_abs_diff(&g.value(twice)) < 1e-12);
    }

    #[test]
    fn full_forward_matches_scalar_oracle() {
        let cfg = ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            ..ModelConfig::tiny()
        };
        let params = ModelParams::init(&cfg, &RngState::new(8)).unwrap();
        let img = image(&cfg, 4);
        let model = Model::new(cfg.clone(), params.clone()).unwrap();
        let (out, _) = model.predict(&img).unwrap();
        let o = Oracle { p: &params, cfg: &cfg };
        let (scores, kps) = o.decode(&o.encode(o.features(&img)));
        close(out.scores.data(), &scores, 1e-9);
        close(out.keypoints.data(), &kps.concat(), 1e-9);
    }

    #[test]
    fn decoder_is_query_permutation_equivariant() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, &RngState::new(9)).unwrap();
        let img = image(&cfg, 5);
        let g = Graph::new();
        let p = params.bind(&g, false);
        let mem = encode(&g, extract_features(&g, &img, &cfg, &p).unwrap(), &cfg, &p).unwrap();
        let qe = params.get("query_embed").unwrap();
        let base = decode_queries(&g, mem, g.constant(qe.clone()), &cfg, &p).unwrap().values(&g);
        let d = cfg.d_model;
        let perm = [2, 0, 1];
        let pq = Tensor::from_fn(qe.shape(), |i| qe.at(perm[i / d], i % d));
        let out = decode_queries(&g, mem, g.constant(pq), &cfg, &p).unwrap().values(&g);
        for (i, &src) in perm.iter().enumerate() {
            assert!((out.score(i) - base.score(src)).abs() < 1e-12);
            for k in 0..cfg.num_keypoints {
                close(&out.keypoint(i, k), &base.keypoint(src, k), 1e-12);
            }
        }
    }

    #[test]
    fn encoder_is_token_permutation_equivariant() {
        let cfg = ModelConfig {
            image_h: 12,
            image_w: 12,
            ..ModelConfig::tiny()
        };
        let params = ModelParams::init(&cfg, &RngState::new(10)).unwrap();
        let img = image(&cfg, 6);
        let g = Graph::new();
        let p = params.bind(&g, false);
        let tokens = extract_features(&g, &img, &cfg, &p).unwrap();
        let base = g.value(encode(&g, tokens, &cfg, &p).unwrap()).clone();
        let n = cfg.tokens();
        let d = cfg.d_model;
        let mut cells: Vec<usize> = (0..n).collect();
        cells.shuffle(&mut RngState::new(1).stream(0));
        let permuted = g.gather(tokens, cells.iter().flat_map(|&c| (0..d).map(move |j| c * d + j)).collect(), &[n, d]).unwrap();
        let out = g.value(encode_with_layout(&g, permuted, &cells, &cfg, &p).unwrap()).clone();
        for (row, &c) in cells.iter().enumerate() {
            close(out.row(row), base.row(c), 1e-12);
        }
        assert!(encode_with_layout(&g, permuted, &[0; 9], &cfg, &p).is_err());
    }

    // ---- heads and variants -------------------------------------------------------

    #[test]
    fn default_config_emits_300_by_17_by_3() {
        let cfg = ModelConfig::default();
        let model = Model::init(cfg.clone(), &RngState::new(0)).unwrap();
        let (out, hm) = model.predict(&image(&cfg, 0)).unwrap();
        assert_eq!(out.keypoints.shape(), &[300, 17, 3]);
        assert_eq!(out.scores.shape(), &[300]);
        assert_eq!(hm.shape(), &[8, 8, 17]);
    }

    #[test]
    fn outputs_are_open_unit_interval_and_deterministic() {
        let cfg = ModelConfig::toy();
        let img = image(&cfg, 7);
        let a = Model::init(cfg.clone(), &RngState::new(1)).unwrap().predict(&img).unwrap();
        let b = Model::init(cfg.clone(), &RngState::new(1)).unwrap().predict(&img).unwrap();
        assert_eq!(a, b);
        let all = a.0.scores.data().iter().chain(a.0.keypoints.data()).chain(a.1.data());
        for &v in all {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zero_refinement_equals_one_stage() {
        let cfg = ModelConfig {
            refinement_decoder: true,
            ..ModelConfig::tiny()
        };
        let mut model = Model::init(cfg.clone(), &RngState::new(2)).unwrap();
        for name in ["refine.delta.w", "refine.delta.b"] {
            let t = model.params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let img = image(&cfg, 8);
        let one = model.predict(&img).unwrap().0;
        let two = model.predict_two_stage(&img).unwrap();
        assert_eq!(one, two);

        let model = Model::init(cfg.clone(), &RngState::new(2)).unwrap();
        let two = model.predict_two_stage(&img).unwrap();
        assert_eq!(two.keypoints.shape(), one.keypoints.shape());
        assert_ne!(two.keypoints, one.keypoints);
        assert_eq!(two.scores, one.scores);
    }

    #[test]
    fn two_stage_requires_flag() {
        let cfg = ModelConfig::tiny();
        let model = Model::init(cfg.clone(), &RngState::new(2)).unwrap();
        assert!(matches!(model.predict_two_stage(&image(&cfg, 0)), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn refinement_params_do_not_disturb_base_init() {
        let cfg = ModelConfig::tiny();
        let base = ModelParams::init(&cfg, &RngState::new(4)).unwrap();
        let two = ModelParams::init(&ModelConfig { refinement_decoder: true, ..cfg }, &RngState::new(4)).unwrap();
        for (name, t) in base.iter() {
            assert_eq!(two.get(name), Some(t), "{name}");
        }
        assert!(two.len() > base.len());
    }

    #[test]
    fn params_check_and_checksum() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, &RngState::new(4)).unwrap();
        p.check(&cfg).unwrap();
        assert!(p.check(&ModelConfig { num_queries: 4, ..cfg.clone() }).is_err());
        let mut q = p.clone();
        assert_eq!(p.checksum(), q.checksum());
        let v = &mut q.get_mut("head.score.b").unwrap().data_mut()[0];
        *v = f64::from_bits(v.to_bits() ^ 1);
        assert_ne!(p.checksum(), q.checksum());
        let mut map: BTreeMap<String, Tensor> = p.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        map.remove("query_embed");
        assert!(ModelParams::from_tensors(&cfg, map).is_err());
    }

    #[test]
    fn pos_encoding_2d_layout() {
        let pe = pos_encoding_2d(2, 3, 8).unwrap();
        let one = sinusoidal_pos_encoding(3, 4).unwrap();
        // token (row 1, col 2)
        assert_eq!(&pe.row(5)[..4], one.row(1));
        assert_eq!(&pe.row(5)[4..], one.row(2));
        assert!(pos_encoding_2d(2, 2, 6).is_err());
    }

    // ---- gradients ------------------------------------------------------------------

    pub(crate) fn model_loss_check(cfg: &ModelConfig, seed: u64) -> f64 {
        let params = ModelParams::init(cfg, &RngState::new(seed)).unwrap();
        let img = image(cfg, seed + 100);
        let gt = GtInstance {
            image_id: 0,
            keypoints: (0..cfg.num_keypoints).map(|k| [0.2 + 0.15 * k as f64, 0.6 - 0.1 * k as f64, 2.0]).collect(),
            area: 0.3,
            iscrowd: false,
        };
        let (gh, gw) = cfg.grid();
        let hm_gt = crate::losses::gaussian_heatmap_render(&[vec![[1.0, 0.0, 2.0]; cfg.num_keypoints]], cfg.num_keypoints, gh, gw, 1.0);
        let (w, fp, hp) = (LossWeights::default(), FocalParams::default(), HeatmapFocalParams::default());
        let sigmas = vec![0.1; cfg.num_keypoints];
        let lc = LossConfig { weights: &w, focal: &fp, heatmap: &hp, sigmas: &sigmas };
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

        let g = Graph::new();
        let out = forward(&g, &img, cfg, &params.bind(&g, false)).unwrap();
        let assignment = composite_loss(&g, &out.pose, out.heatmap, &[gt.clone()], &hm_gt, &lc).unwrap().assignment;

        GradCheck::default()
            .max_relative_error(&inputs, |g, vars| {
                let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                let out = forward(g, &img, cfg, &p)?;
                let t = composite_loss_with_assignment(g, &out.pose, out.heatmap, &[gt.clone()], &hm_gt, &lc, assignment.clone())?;
                Ok(t.total)
            })
            .unwrap()
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        for seed in 0..5 {
            let e = model_loss_check(&ModelConfig::tiny(), seed);
            assert!(e < 1e-3, "seed {seed}: {e}");
        }
    }
}
