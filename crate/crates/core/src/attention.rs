//! Attention building blocks: scaled dot-product attention, its multi-head
//! wrapper, fixed sinusoidal position encodings and single-scale deformable
//! sampling attention.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {d_model} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(Self { d_model, heads })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Deformable attention samples `sample_points` offsets per query and head
/// on a single feature level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformableConfig {
    pub sample_points: usize,
}

impl DeformableConfig {
    pub const LEVELS: usize = 1;

    pub fn new(sample_points: usize) -> Result<Self> {
        if sample_points == 0 {
            return Err(Error::InvalidConfig("sample_points must be at least 1".into()));
        }
        Ok(Self { sample_points })
    }
}

/// Weight `d_in × d_out` and bias `d_out` of an affine map.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn apply(&self, g: &Graph, x: Var) -> Result<Var> {
        g.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct DeformableParams {
    /// `d_model × (heads · points · 2)`: pixel offsets `(dx, dy)`.
    pub offsets: Linear,
    /// `d_model × (heads · points)`: per-head logits over sample points.
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
}

/// `softmax(q·kᵀ / sqrt(d_k)) · v`.
pub fn scaled_dot_attention(g: &Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q), g.shape(k), g.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let d_k = qs[1].max(1) as f64;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / libm::sqrt(d_k));
    let weights = g.softmax_rows(logits)?;
    g.matmul(weights, v)
}

/// Per-head projection, attention, concatenation and output projection.
pub fn multi_head_attention(
    g: &Graph,
    x_q: Var,
    x_kv: Var,
    cfg: &AttentionConfig,
    params: &MultiHeadParams,
) -> Result<Var> {
    check_width("multi_head_attention", g, x_q, cfg.d_model)?;
    check_width("multi_head_attention", g, x_kv, cfg.d_model)?;
    let q = params.query.apply(g, x_q)?;
    let k = params.key.apply(g, x_kv)?;
    let v = params.value.apply(g, x_kv)?;
    let d_k = cfg.d_k();
    let heads = (0..cfg.heads)
        .map(|h| {
            let cols = |t| g.slice_cols(t, h * d_k, (h + 1) * d_k);
            scaled_dot_attention(g, cols(q)?, cols(k)?, cols(v)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    params.out.apply(g, merged)
}

/// Interleaved sinusoidal encodings: channel `2i` is `sin(pos / 10000^(2i/d))`
/// and channel `2i + 1` the matching cosine.
pub fn sinusoidal_pos_encoding(n: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::OddDimension(d_model));
    }
    Ok(Tensor::from_fn(&[n, d_model], |idx| {
        let (pos, ch) = (idx / d_model, idx % d_model);
        let pair = (ch / 2) as f64;
        let angle = pos as f64 / libm::pow(10000.0, 2.0 * pair / d_model as f64);
        if ch % 2 == 0 {
            libm::sin(angle)
        } else {
            libm::cos(angle)
        }
    }))
}

/// Single-scale deformable attention.
///
/// For every query and head, offsets (in pixels of `feature_map`) and
/// softmax-normalised weights over the sample points are predicted from the
/// query vector. The projected feature map is bilinearly sampled at
/// `reference + offset` and the weighted samples are merged across heads
/// through the output projection.
pub fn deformable_attention(
    g: &Graph,
    queries: Var,
    ref_points: &[(f64, f64)],
    feature_map: Var,
    attn: &AttentionConfig,
    cfg: &DeformableConfig,
    params: &DeformableParams,
) -> Result<Var> {
    check_width("deformable_attention", g, queries, attn.d_model)?;
    let qshape = g.shape(queries);
    let fshape = g.shape(feature_map);
    let m = qshape[0];
    if ref_points.len() != m || fshape.len() != 3 || fshape[2] != attn.d_model {
        return Err(Error::ShapeMismatch {
            op: "deformable_attention",
            lhs: qshape,
            rhs: fshape,
        });
    }
    let (h, w, d) = (fshape[0], fshape[1], fshape[2]);
    let (heads, points, d_k) = (attn.heads, cfg.sample_points, attn.d_k());

    let flat = g.reshape(feature_map, &[h * w, d])?;
    let value = params.value.apply(g, flat)?;
    let offsets = params.offsets.apply(g, queries)?;
    let logits = params.weights.apply(g, queries)?;
    let logits = g.reshape(logits, &[m * heads, points])?;
    let weights = g.softmax_rows(logits)?;
    let weights = g.reshape(weights, &[m, heads * points])?;

    let base = g.constant(Tensor::from_fn(&[m * points, 2], |i| {
        let (x, y) = ref_points[i / (2 * points)];
        if i % 2 == 0 {
            x
        } else {
            y
        }
    }));

    let mut per_head = Vec::with_capacity(heads);
    for hd in 0..heads {
        let vmap = g.slice_cols(value, hd * d_k, (hd + 1) * d_k)?;
        let vmap = g.reshape(vmap, &[h, w, d_k])?;
        let off = g.slice_cols(offsets, hd * points * 2, (hd + 1) * points * 2)?;
        let off = g.reshape(off, &[m * points, 2])?;
        let locs = g.add(base, off)?;
        let samples = g.bilinear_sample(vmap, locs)?;
        let wts = g.slice_cols(weights, hd * points, (hd + 1) * points)?;
        per_head.push(g.group_weighted_sum(wts, samples)?);
    }
    let merged = if per_head.len() == 1 {
        per_head[0]
    } else {
        g.concat_cols(&per_head)?
    };
    params.out.apply(g, merged)
}

fn check_width(op: &'static str, g: &Graph, x: Var, d_model: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != d_model {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s,
            rhs: alloc::vec![d_model],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::rng::{uniform, RngState};
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::seq::SliceRandom;

    fn rand_tensor(rng: &mut impl rand::Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| uniform(rng, -2.0, 2.0))
    }

    // ---- scalar-loop oracles ------------------------------------------------

    fn oracle_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dk = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| e.iter().zip(v).map(|(ej, vj)| ej / z * vj[c]).sum())
                    .collect()
            })
            .collect()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    fn lin(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.at(i, j)).sum::<f64>())
            .collect()
    }

    fn oracle_bilinear(map: &[Vec<Vec<f64>>], x: f64, y: f64) -> Vec<f64> {
        let (h, w, c) = (map.len() as i64, map[0].len() as i64, map[0][0].len());
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let mut out = vec![0.0; c];
        for (dy, dx, wt) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (0, 1, fx * (1.0 - fy)),
            (1, 0, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let (yy, xx) = (y0 as i64 + dy, x0 as i64 + dx);
            if yy >= 0 && yy < h && xx >= 0 && xx < w {
                for ch in 0..c {
                    out[ch] += wt * map[yy as usize][xx as usize][ch];
                }
            }
        }
        out
    }

    struct MhaTensors {
        lin: [(Tensor, Tensor); 4],
    }

    fn mha_tensors(rng: &mut impl rand::Rng, d: usize) -> MhaTensors {
        let mut pair = || (rand_tensor(rng, &[d, d]), rand_tensor(rng, &[d]));
        MhaTensors {
            lin: [pair(), pair(), pair(), pair()],
        }
    }

    fn bind_mha(g: &Graph, t: &MhaTensors) -> MultiHeadParams {
        let l = |i: usize| Linear {
            w: g.param(t.lin[i].0.clone()),
            b: g.param(t.lin[i].1.clone()),
        };
        MultiHeadParams {
            query: l(0),
            key: l(1),
            value: l(2),
            out: l(3),
        }
    }

    // ---- scaled dot attention -------------------------------------------------

    #[test]
    fn single_key_returns_its_value() {
        let g = Graph::new();
        let q = g.constant(Tensor::matrix(&[[1.0, -2.0], [0.3, 0.1], [5.0, 5.0]]));
        let k = g.constant(Tensor::matrix(&[[0.7, 0.2]]));
        let v = g.constant(Tensor::matrix(&[[4.0, -1.0, 2.5]]));
        let out = scaled_dot_attention(&g, q, k, v).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(out).row(i), &[4.0, -1.0, 2.5]);
        }
    }

    #[test]
    fn zero_query_averages_values() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::from_fn(&[4, 3], |i| i as f64 * 0.7));
        let vt = Tensor::from_fn(&[4, 2], |i| (i * i) as f64);
        let v = g.constant(vt.clone());
        let out = scaled_dot_attention(&g, q, k, v).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|r| vt.at(r, c)).sum::<f64>() / 4.0;
            assert!((g.value(out).at(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_case_matches_scalar_oracle() {
        let qt = Tensor::matrix(&[[0.5], [-1.5]]);
        let kt = Tensor::matrix(&[[2.0], [-0.25]]);
        let vt = Tensor::matrix(&[[1.0, 3.0], [-2.0, 0.5]]);
        let g = Graph::new();
        let out = scaled_dot_attention(&g, g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone())).unwrap();
        let expect = oracle_attention(&rows(&qt), &rows(&kt), &rows(&vt));
        for i in 0..2 {
            for c in 0..2 {
                assert!((g.value(out).at(i, c) - expect[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[4, 2]));
        let v = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            scaled_dot_attention(&g, q, k, v),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn outputs_are_convex_combinations_and_permutation_invariant() {
        let mut rng = RngState::new(11).stream(0);
        for _ in 0..20 {
            let (m, n, d) = (3, 5, 4);
            let qt = rand_tensor(&mut rng, &[m, d]);
            let kt = rand_tensor(&mut rng, &[n, d]);
            let vt = rand_tensor(&mut rng, &[n, 3]);
            let g = Graph::new();
            let out = scaled_dot_attention(&g, g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone())).unwrap();
            let base = g.value(out).clone();
            for c in 0..3 {
                let col: Vec<f64> = (0..n).map(|r| vt.at(r, c)).collect();
                let (lo, hi) = (col.iter().cloned().fold(f64::MAX, f64::min), col.iter().cloned().fold(f64::MIN, f64::max));
                for i in 0..m {
                    let x = base.at(i, c);
                    assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let pk = Tensor::from_fn(&[n, d], |i| kt.at(perm[i / d], i % d));
            let pv = Tensor::from_fn(&[n, 3], |i| vt.at(perm[i / 3], i % 3));
            let out2 = scaled_dot_attention(&g, g.constant(qt.clone()), g.constant(pk), g.constant(pv)).unwrap();
            assert!(g.value(out2).max_abs_diff(&base) < 1e-12);

            let mut qperm: Vec<usize> = (0..m).collect();
            qperm.shuffle(&mut rng);
            let pq = Tensor::from_fn(&[m, d], |i| qt.at(qperm[i / d], i % d));
            let out3 = scaled_dot_attention(&g, g.constant(pq), g.constant(kt.clone()), g.constant(vt.clone())).unwrap();
            for i in 0..m {
                assert_eq!(g.value(out3).row(i), base.row(qperm[i]));
            }
        }
    }

    // ---- multi-head -------------------------------------------------------------

    #[test]
    fn single_head_identity_projections_reduce_to_attention() {
        let d = 3;
        let g = Graph::new();
        let id = || Linear {
            w: g.constant(Tensor::identity(d)),
            b: g.constant(Tensor::zeros(&[d])),
        };
        let params = MultiHeadParams {
            query: id(),
            key: id(),
            value: id(),
            out: id(),
        };
        let x = g.constant(Tensor::from_fn(&[2, d], |i| i as f64 * 0.4 - 1.0));
        let y = g.constant(Tensor::from_fn(&[4, d], |i| (i as f64).sin()));
        let cfg = AttentionConfig::new(d, 1).unwrap();
        let a = multi_head_attention(&g, x, y, &cfg, &params).unwrap();
        let b = scaled_dot_attention(&g, x, y, y).unwrap();
        assert!(g.value(a).max_abs_diff(&g.value(b)) < 1e-15);
    }

    #[test]
    fn multi_head_matches_scalar_oracle() {
        let (d, heads) = (4, 2);
        let mut rng = RngState::new(5).stream(1);
        let t = mha_tensors(&mut rng, d);
        let xq = rand_tensor(&mut rng, &[3, d]);
        let xkv = rand_tensor(&mut rng, &[5, d]);

        let g = Graph::new();
        let p = bind_mha(&g, &t);
        let cfg = AttentionConfig::new(d, heads).unwrap();
        let out = multi_head_attention(&g, g.constant(xq.clone()), g.constant(xkv.clone()), &cfg, &p).unwrap();

        let proj = |x: &Tensor, i: usize| -> Vec<Vec<f64>> {
            (0..x.rows()).map(|r| lin(x.row(r), &t.lin[i].0, &t.lin[i].1)).collect()
        };
        let (q, k, v) = (proj(&xq, 0), proj(&xkv, 1), proj(&xkv, 2));
        let dk = d / heads;
        let mut concat = vec![Vec::new(); 3];
        for h in 0..heads {
            let sl = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { m.iter().map(|r| r[h * dk..(h + 1) * dk].to_vec()).collect() };
            let o = oracle_attention(&sl(&q), &sl(&k), &sl(&v));
            for (row, oh) in concat.iter_mut().zip(o) {
                row.extend(oh);
            }
        }
        for (i, row) in concat.iter().enumerate() {
            let expect = lin(row, &t.lin[3].0, &t.lin[3].1);
            for c in 0..d {
                assert!((g.value(out).at(i, c) - expect[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn multi_head_kv_permutation_invariant() {
        let d = 4;
        let mut rng = RngState::new(8).stream(2);
        let t = mha_tensors(&mut rng, d);
        let xq = rand_tensor(&mut rng, &[2, d]);
        let xkv = rand_tensor(&mut rng, &[6, d]);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pkv = Tensor::from_fn(&[6, d], |i| xkv.at(perm[i / d], i % d));
        let g = Graph::new();
        let p = bind_mha(&g, &t);
        let cfg = AttentionConfig::new(d, 2).unwrap();
        let a = multi_head_attention(&g, g.constant(xq.clone()), g.constant(xkv), &cfg, &p).unwrap();
        let b = multi_head_attention(&g, g.constant(xq), g.constant(pkv), &cfg, &p).unwrap();
        assert!(g.value(a).max_abs_diff(&g.value(b)) < 1e-12);
    }

    #[test]
    fn attention_config_validation() {
        assert!(AttentionConfig::new(6, 4).is_err());
        assert!(AttentionConfig::new(8, 0).is_err());
        assert_eq!(AttentionConfig::new(64, 4).unwrap().d_k(), 16);
        assert!(DeformableConfig::new(0).is_err());
    }

    // ---- positional encoding ----------------------------------------------------

    #[test]
    fn positional_encoding_examples() {
        let pe = sinusoidal_pos_encoding(7, 6).unwrap();
        for ch in 0..6 {
            assert_eq!(pe.at(0, ch), if ch % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.at(1, 0) - 0.841471).abs() < 1e-6);
        assert_eq!(sinusoidal_pos_encoding(3, 5), Err(Error::OddDimension(5)));
    }

    // ---- deformable -------------------------------------------------------------

    struct DeformTensors {
        lin: [(Tensor, Tensor); 4],
    }

    fn deform_tensors(rng: &mut impl rand::Rng, d: usize, heads: usize, points: usize) -> DeformTensors {
        let mut pair = |o: usize, s: f64| {
            (
                rand_tensor(rng, &[d, o]).map(|v| v * s),
                rand_tensor(rng, &[o]).map(|v| v * s),
            )
        };
        DeformTensors {
            lin: [
                pair(heads * points * 2, 0.3),
                pair(heads * points, 1.0),
                pair(d, 1.0),
                pair(d, 1.0),
            ],
        }
    }

    fn bind_deform(g: &Graph, t: &DeformTensors) -> DeformableParams {
        let l = |i: usize| Linear {
            w: g.param(t.lin[i].0.clone()),
            b: g.param(t.lin[i].1.clone()),
        };
        DeformableParams {
            offsets: l(0),
            weights: l(1),
            value: l(2),
            out: l(3),
        }
    }

    #[test]
    fn zero_offsets_sample_the_reference_point() {
        let d = 2;
        let g = Graph::new();
        let zero = |o: usize| Linear {
            w: g.constant(Tensor::zeros(&[d, o])),
            b: g.constant(Tensor::zeros(&[o])),
        };
        let id = || Linear {
            w: g.constant(Tensor::identity(d)),
            b: g.constant(Tensor::zeros(&[d])),
        };
        let params = DeformableParams {
            offsets: zero(2),
            weights: zero(1),
            value: id(),
            out: id(),
        };
        let map_t = Tensor::from_fn(&[3, 3, d], |i| i as f64 * 0.5);
        let map = g.constant(map_t);
        let q = g.constant(Tensor::matrix(&[[1.0, 2.0], [0.0, -1.0]]));
        let refs = [(1.0, 2.0), (0.5, 0.25)];
        let out = deformable_attention(&g, q, &refs, map, &AttentionConfig::new(d, 1).unwrap(), &DeformableConfig::new(1).unwrap(), &params).unwrap();
        let pts = g.constant(Tensor::matrix(&[[1.0, 2.0], [0.5, 0.25]]));
        let direct = g.bilinear_sample(map, pts).unwrap();
        assert!(g.value(out).max_abs_diff(&g.value(direct)) < 1e-15);
    }

    #[test]
    fn constant_map_ignores_reference_points() {
        let (d, heads, points) = (4, 2, 3);
        let mut rng = RngState::new(3).stream(0);
        let t = deform_tensors(&mut rng, d, heads, points);
        let g = Graph::new();
        let p = bind_deform(&g, &t);
        // large enough that no sample reaches the zero padding
        let map = g.constant(Tensor::from_fn(&[24, 24, d], |i| (i % d) as f64 - 1.0));
        let q = g.constant(rand_tensor(&mut rng, &[2, d]));
        let acfg = AttentionConfig::new(d, heads).unwrap();
        let dcfg = DeformableConfig::new(points).unwrap();
        let a = deformable_attention(&g, q, &[(11.0, 11.0), (12.0, 11.5)], map, &acfg, &dcfg, &p).unwrap();
        let b = deformable_attention(&g, q, &[(12.0, 12.0), (11.5, 11.0)], map, &acfg, &dcfg, &p).unwrap();
        assert!(g.value(a).max_abs_diff(&g.value(b)) < 1e-12);
    }

    #[test]
    fn deformable_matches_scalar_oracle() {
        let (d, heads, points) = (2, 1, 2);
        let mut rng = RngState::new(21).stream(0);
        let t = deform_tensors(&mut rng, d, heads, points);
        let map_t = rand_tensor(&mut rng, &[3, 3, d]);
        let q_t = rand_tensor(&mut rng, &[2, d]);
        let refs = [(0.7, 1.2), (1.6, 0.4)];

        let g = Graph::new();
        let p = bind_deform(&g, &t);
        let out = deformable_attention(&g, g.constant(q_t.clone()), &refs, g.constant(map_t.clone()), &AttentionConfig::new(d, heads).unwrap(), &DeformableConfig::new(points).unwrap(), &p).unwrap();

        // value-projected map as nested vectors
        let vmap: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|r| (0..3).map(|c| lin(&map_t.data()[(r * 3 + c) * d..(r * 3 + c + 1) * d], &t.lin[2].0, &t.lin[2].1)).collect())
            .collect();
        for i in 0..2 {
            let qi = q_t.row(i);
            let off = lin(qi, &t.lin[0].0, &t.lin[0].1);
            let logits = lin(qi, &t.lin[1].0, &t.lin[1].1);
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut acc = vec![0.0; d];
            for pt in 0..points {
                let s = oracle_bilinear(&vmap, refs[i].0 + off[2 * pt], refs[i].1 + off[2 * pt + 1]);
                for c in 0..d {
                    acc[c] += e[pt] / z * s[c];
                }
            }
            let expect = lin(&acc, &t.lin[3].0, &t.lin[3].1);
            for c in 0..d {
                assert!((g.value(out).at(i, c) - expect[c]).abs() < 1e-10);
            }
        }
    }

    // ---- gradients ----------------------------------------------------------------

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = RngState::new(99).stream(0);
        for _ in 0..20 {
            let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4]), rand_tensor(&mut rng, &[5, 2])];
            let err = GradCheck::default()
                .max_relative_error(&inputs, |g, v| {
                    let o = scaled_dot_attention(g, v[0], v[1], v[2])?;
                    Ok(g.sum(g.square(o)))
                })
                .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
