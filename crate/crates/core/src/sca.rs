//! Scene coupling attention.
//!
//! Inside each block, queries come from raw features, keys from the local
//! semantic mask and values from the global semantic mask. Queries and keys
//! are rotated by their pixel positions and the rotated query is scaled
//! channel-wise by the block's scene gate before the scaled dot product.

use rand::Rng;

use crate::dct::{scene_gate, GateParams, GateProjection};
use crate::error::{Error, Result};
use crate::rope::{apply_rope, PositionGrid, RopeConfig};
use crate::smg::{he_normal, BlockLayout};
use crate::tensor::{Conv2dSpec, Tensor};

/// Query/key/value projections, each `C_in×C` acting on `n×C_in` tokens.
#[derive(Debug, Clone)]
pub struct Projections {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl Projections {
    pub fn init(c_in: usize, c: usize, rng: &mut impl Rng) -> Self {
        let mut w = || {
            let t = he_normal(&[c, c_in], rng).scale(0.5f64.sqrt());
            t.transpose().expect("rank 2").as_param()
        };
        Projections {
            wq: w(),
            wk: w(),
            wv: w(),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[1]
    }
}

fn tokens_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, c] => Ok((n, c)),
        _ => Err(Error::dim(format!(
            "{what} must be n×C tokens, got {:?}",
            t.shape()
        ))),
    }
}

/// Plain self-attention: shared input for queries, keys and values.
pub fn vanilla_attention(x: &Tensor, proj: &Projections) -> Result<Tensor> {
    let q = x.matmul(&proj.wq)?;
    let k = x.matmul(&proj.wk)?;
    let v = x.matmul(&proj.wv)?;
    let c = q.shape()[1] as f64;
    let t = q.matmul(&k.transpose()?)?.scale(1.0 / c.sqrt());
    t.softmax(1)?.matmul(&v)
}

/// `t[m, n] = <gate ⊙ rot(q_m), rot(k_n)> / sqrt(C)`.
///
/// `gate = None` is the unit gate and `rope = None` skips the rotation.
pub fn sca_affinity(
    q: &Tensor,
    k: &Tensor,
    positions: &PositionGrid,
    gate: Option<&Tensor>,
    rope: Option<&RopeConfig>,
) -> Result<Tensor> {
    let (_, cq) = tokens_dims(q, "queries")?;
    let (_, ck) = tokens_dims(k, "keys")?;
    if cq != ck {
        return Err(Error::dim(format!("queries have {cq} channels, keys {ck}")));
    }
    if let Some(g) = gate {
        if g.numel() != cq {
            return Err(Error::dim(format!(
                "gate has {} entries for {cq} channels",
                g.numel()
            )));
        }
    }
    let (q, k) = match rope {
        Some(cfg) => (
            apply_rope(q, positions, cfg)?,
            apply_rope(k, positions, cfg)?,
        ),
        None => (q.clone(), k.clone()),
    };
    let q = match gate {
        Some(g) => q.mul_rows(g)?,
        None => q,
    };
    Ok(q.matmul(&k.transpose()?)?.scale(1.0 / (cq as f64).sqrt()))
}

/// Gate configuration of the attention stage.
#[derive(Debug, Clone)]
pub enum GateMode {
    /// Per-block gate from the query spectrum.
    Learned(GateProjection),
    /// All-ones gate.
    Unit,
}

/// Learnable parameters of the attention stage.
#[derive(Debug, Clone)]
pub struct ScaParams {
    pub proj: Projections,
    pub gate: GateParams,
}

/// Everything one block produces.
#[derive(Debug, Clone)]
pub struct BlockAttention {
    pub output: Tensor,
    pub weights: Tensor,
    pub gate: Option<Tensor>,
}

/// Attention over one block with `queries`, `keys`, `values` as `n×Ĉ` tokens.
#[allow(clippy::too_many_arguments)]
pub fn sca_block(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    positions: &PositionGrid,
    block: (usize, usize),
    params: &ScaParams,
    gate_mode: &GateMode,
    rope: Option<&RopeConfig>,
) -> Result<BlockAttention> {
    let (n, _) = tokens_dims(queries, "queries")?;
    for (what, t) in [("keys", keys), ("values", values)] {
        if t.shape() != queries.shape() {
            return Err(Error::dim(format!(
                "{what} of shape {:?} do not match queries {:?}",
                t.shape(),
                queries.shape()
            )));
        }
    }
    if block.0 * block.1 != n {
        return Err(Error::dim(format!(
            "{n} tokens in a {}×{} block",
            block.0, block.1
        )));
    }
    let q = queries.matmul(&params.proj.wq)?;
    let k = keys.matmul(&params.proj.wk)?;
    let v = values.matmul(&params.proj.wv)?;
    let c = q.shape()[1];
    let gate = match gate_mode {
        GateMode::Learned(proj) => {
            let fmap = q.transpose()?.reshape(&[c, block.0, block.1])?;
            Some(scene_gate(&fmap, proj, &params.gate)?.tensor().clone())
        }
        GateMode::Unit => None,
    };
    let t = sca_affinity(&q, &k, positions, gate.as_ref(), rope)?;
    let weights = t.softmax(1)?;
    let output = weights.matmul(&v)?;
    Ok(BlockAttention {
        output,
        weights,
        gate,
    })
}

/// Runs [`sca_block`] over every block of `layout`. Positions are global feature-map
/// coordinates of each block's pixels.
#[allow(clippy::too_many_arguments)]
pub fn sca_forward(
    r_local: &[Tensor],
    s_local: &[Tensor],
    s_global: &[Tensor],
    layout: &BlockLayout,
    params: &ScaParams,
    gate_mode: &GateMode,
    rope: Option<&RopeConfig>,
) -> Result<Vec<BlockAttention>> {
    if r_local.len() != layout.len()
        || s_local.len() != layout.len()
        || s_global.len() != layout.len()
    {
        return Err(Error::dim(format!(
            "block counts {}/{}/{} for a layout of {}",
            r_local.len(),
            s_local.len(),
            s_global.len(),
            layout.len()
        )));
    }
    let (height, width) = layout.map_extents();
    let (bh, bw) = layout.block_extents();
    layout
        .origins()
        .enumerate()
        .map(|(i, (y0, x0))| {
            let pos = PositionGrid::window(x0, y0, bh, bw, width, height)?;
            sca_block(
                &r_local[i],
                &s_local[i],
                &s_global[i],
                &pos,
                (bh, bw),
                params,
                gate_mode,
                rope,
            )
        })
        .collect()
}

/// Concatenates `R_a` (`C×H×W`) with `R` (`Ĉ×H×W`) and projects back to `Ĉ`
/// channels with a 3×3 convolution.
pub fn fuse_output(
    r_a: &Tensor,
    r: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    if r_a.rank() != 3 || r.rank() != 3 || r_a.shape()[1..] != r.shape()[1..] {
        return Err(Error::dim(format!(
            "cannot fuse maps of shapes {:?} and {:?}",
            r_a.shape(),
            r.shape()
        )));
    }
    Tensor::concat(&[r_a.clone(), r.clone()])?.conv2d(kernel, bias, Conv2dSpec::same(3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct::{select_frequencies, FrequencyPolicy};
    use crate::smg::{merge_token_blocks, semantic_masks};
    use crate::tensor::counter;
    use crate::tensor::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar loops over tokens and channels.
    fn naive_attention(x: &Tensor, p: &Projections) -> Vec<f64> {
        let (n, cin) = (x.shape()[0], x.shape()[1]);
        let c = p.width();
        let project = |w: &Tensor| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    (0..c)
                        .map(|j| (0..cin).map(|k| x.at(&[i, k]) * w.at(&[k, j])).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (project(&p.wq), project(&p.wk), project(&p.wv));
        let mut out = vec![0.0; n * c];
        for m in 0..n {
            let t: Vec<f64> = (0..n)
                .map(|j| (0..c).map(|ch| q[m][ch] * k[j][ch]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = t.iter().map(|v| (v - max).exp()).sum();
            for j in 0..n {
                let a = (t[j] - max).exp() / z;
                for ch in 0..c {
                    out[m * c + ch] += a * v[j][ch];
                }
            }
        }
        out
    }

    fn params(rng: &mut ChaCha8Rng, c_in: usize, c: usize) -> ScaParams {
        ScaParams {
            proj: Projections::init(c_in, c, rng),
            gate: GateParams::init(c, 2, rng).unwrap(),
        }
    }

    #[test]
    fn vanilla_single_token_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Projections::init(4, 4, &mut rng);
        let x = random(&mut rng, &[1, 4]);
        let z = vanilla_attention(&x, &p).unwrap();
        let v = x.matmul(&p.wv).unwrap();
        assert_eq!(z.data(), v.data());
    }

    #[test]
    fn vanilla_identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Projections::init(3, 4, &mut rng);
        // wk = 0 makes all keys identical
        let p = Projections {
            wk: Tensor::zeros(&[3, 4]),
            ..p
        };
        let x = random(&mut rng, &[2, 3]);
        let z = vanilla_attention(&x, &p).unwrap();
        let v = x.matmul(&p.wv).unwrap();
        for ch in 0..4 {
            let mean = 0.5 * (v.at(&[0, ch]) + v.at(&[1, ch]));
            assert!((z.at(&[0, ch]) - mean).abs() < 1e-12);
            assert!((z.at(&[1, ch]) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn vanilla_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = Projections::init(8, 8, &mut rng);
            let x = random(&mut rng, &[4, 8]);
            let z = vanilla_attention(&x, &p).unwrap();
            for (a, b) in z.data().iter().zip(naive_attention(&x, &p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affinity_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = RopeConfig::base_angles(8).unwrap();
        let q = random(&mut rng, &[4, 8]);
        let k = random(&mut rng, &[4, 8]);
        let zero = PositionGrid::zeros(4);
        let ones = Tensor::full(&[8], 1.0);
        let t = sca_affinity(&q, &k, &zero, Some(&ones), Some(&cfg)).unwrap();
        let plain = q
            .matmul(&k.transpose().unwrap())
            .unwrap()
            .scale(1.0 / 8f64.sqrt());
        for (a, b) in t.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let t0 = sca_affinity(&q, &k, &zero, Some(&Tensor::zeros(&[8])), Some(&cfg)).unwrap();
        assert!(t0.data().iter().all(|&v| v == 0.0));
        let bad = sca_affinity(&q, &k, &zero, Some(&Tensor::zeros(&[6])), Some(&cfg));
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn affinity_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = RopeConfig::base_angles(8).unwrap();
        let q = random(&mut rng, &[4, 8]);
        let k = random(&mut rng, &[4, 8]);
        // a gate shared by both channels of each rotation pair commutes with the rotation
        let paired: Vec<f64> = (0..4).flat_map(|_| [rng.gen_range(0.0..1.0); 2]).collect();
        let paired = Tensor::new(&[8], paired).unwrap();
        let pos = PositionGrid::window(1, 2, 2, 2, 4, 4).unwrap();
        for g in [None, Some(&paired)] {
            let a = sca_affinity(&q, &k, &pos, g, Some(&cfg)).unwrap();
            let b = sca_affinity(&q, &k, &pos.shifted(5, 3), g, Some(&cfg)).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn block_reduces_to_vanilla_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = params(&mut rng, 8, 8);
        let x = random(&mut rng, &[4, 8]);
        let cfg = RopeConfig::base_angles(8).unwrap();
        let out = sca_block(
            &x,
            &x,
            &x,
            &PositionGrid::zeros(4),
            (2, 2),
            &p,
            &GateMode::Unit,
            Some(&cfg),
        )
        .unwrap();
        let reference = vanilla_attention(&x, &p.proj).unwrap();
        for (a, b) in out.output.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in out.weights.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_token_block_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(&mut rng, 4, 4);
        let freqs = select_frequencies(&FrequencyPolicy::ZigzagLow, 2, 7, 7).unwrap();
        let mode = GateMode::Learned(GateProjection::new(1, 1, &freqs).unwrap());
        let [q, k, v] = [0; 3].map(|_| random(&mut rng, &[1, 4]));
        let pos = PositionGrid::new(vec![(2, 3)], 4, 4).unwrap();
        let cfg = RopeConfig::base_angles(4).unwrap();
        let out = sca_block(&q, &k, &v, &pos, (1, 1), &p, &mode, Some(&cfg)).unwrap();
        let expected = v.matmul(&p.proj.wv).unwrap();
        for (a, b) in out.output.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_shapes_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random(&mut rng, &[8, 8, 8]);
        let d = random(&mut rng, &[3, 8, 8]);
        let layout = BlockLayout::new(8, 8, 4, 4).unwrap();
        let m = semantic_masks(&r, &d, &layout).unwrap();
        let p = params(&mut rng, 8, 8);
        let freqs = select_frequencies(&FrequencyPolicy::ZigzagLow, 4, 7, 7).unwrap();
        let mode = GateMode::Learned(GateProjection::new(4, 4, &freqs).unwrap());
        let cfg = RopeConfig::base_angles(8).unwrap();
        let out = sca_forward(
            &m.features,
            &m.local,
            &m.global,
            &layout,
            &p,
            &mode,
            Some(&cfg),
        )
        .unwrap();
        assert_eq!(out.len(), 4);
        for b in &out {
            assert_eq!(b.output.shape(), &[16, 8]);
            for row in b.weights.data().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert!(b
                .gate
                .as_ref()
                .unwrap()
                .data()
                .iter()
                .all(|&g| g > 0.0 && g < 1.0));
        }
    }

    #[test]
    fn saturated_gate_matches_ungated_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = params(&mut rng, 8, 8);
        p.gate.b2 = Tensor::full(&[8], 40.0);
        let freqs = select_frequencies(&FrequencyPolicy::ZigzagLow, 4, 7, 7).unwrap();
        let mode = GateMode::Learned(GateProjection::new(2, 2, &freqs).unwrap());
        let cfg = RopeConfig::base_angles(8).unwrap();
        let [q, k, v] = [0; 3].map(|_| random(&mut rng, &[4, 8]));
        let pos = PositionGrid::window(0, 0, 2, 2, 2, 2).unwrap();
        let gated = sca_block(&q, &k, &v, &pos, (2, 2), &p, &mode, Some(&cfg)).unwrap();
        let plain = sca_block(&q, &k, &v, &pos, (2, 2), &p, &GateMode::Unit, Some(&cfg)).unwrap();
        for (a, b) in gated.weights.data().iter().zip(plain.weights.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_shapes_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ra = random(&mut rng, &[4, 3, 3]);
        let r = random(&mut rng, &[6, 3, 3]);
        let cat = Tensor::concat(&[ra.clone(), r.clone()]).unwrap();
        assert_eq!(cat.shape()[0], 10);
        // identity-like kernel on the R channels, zeros on R_a
        let mut k = vec![0.0; 6 * 10 * 9];
        for o in 0..6 {
            k[(o * 10 + 4 + o) * 9 + 4] = 2.0;
        }
        let kernel = Tensor::new(&[6, 10, 3, 3], k).unwrap();
        let out = fuse_output(&Tensor::zeros(&[4, 3, 3]), &r, &kernel, None).unwrap();
        assert_eq!(out.shape(), &[6, 3, 3]);
        for (a, b) in out.data().iter().zip(r.data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        assert!(fuse_output(&random(&mut rng, &[4, 2, 3]), &r, &kernel, None).is_err());
    }

    #[test]
    fn fuse_gradient_reaches_both_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ra = random(&mut rng, &[2, 3, 3]);
        let r = random(&mut rng, &[3, 3, 3]);
        let kernel = random(&mut rng, &[3, 5, 3, 3]);
        let f = |t: &[Tensor]| {
            let y = fuse_output(&t[0], &t[1], &t[2], None)?;
            Ok(y.mul(&y)?.sum())
        };
        let report = GradCheck::default()
            .run(f, &[ra.clone(), r.clone(), kernel.clone()])
            .unwrap();
        assert!(report.worst < 1e-6, "{report:?}");
        let ra = ra.as_param();
        let r = r.as_param();
        let y = fuse_output(&ra, &r, &kernel, None).unwrap();
        let g = y.mul(&y).unwrap().sum().backward().unwrap();
        assert!(g.get(&ra).unwrap().iter().any(|&v| v != 0.0));
        assert!(g.get(&r).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn attention_gradient_on_small_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layout = BlockLayout::new(4, 8, 4, 4).unwrap();
        let r = random(&mut rng, &[4, 4, 8]);
        let d = random(&mut rng, &[3, 4, 8]);
        let p = params(&mut rng, 4, 4);
        let freqs = select_frequencies(&FrequencyPolicy::ZigzagLow, 2, 7, 7).unwrap();
        let mode = GateMode::Learned(GateProjection::new(4, 4, &freqs).unwrap());
        let cfg = RopeConfig::base_angles(4).unwrap();
        let target = random(&mut rng, &[4, 4, 8]);
        let f = |t: &[Tensor]| {
            let m = semantic_masks(&t[0], &t[1], &layout)?;
            let sp = ScaParams {
                proj: Projections {
                    wq: t[2].clone(),
                    wk: t[3].clone(),
                    wv: t[4].clone(),
                },
                gate: GateParams::from_tensors([
                    t[5].clone(),
                    t[6].clone(),
                    t[7].clone(),
                    t[8].clone(),
                ]),
            };
            let out = sca_forward(
                &m.features,
                &m.local,
                &m.global,
                &layout,
                &sp,
                &mode,
                Some(&cfg),
            )?;
            let z: Vec<Tensor> = out.into_iter().map(|b| b.output).collect();
            let merged = merge_token_blocks(&z, &layout)?;
            Ok(merged.mul(&target)?.sum())
        };
        let inputs = [
            r,
            d,
            p.proj.wq.detach(),
            p.proj.wk.detach(),
            p.proj.wv.detach(),
            p.gate.w1.detach(),
            random(&mut rng, &[2]).scale(0.3),
            p.gate.w2.detach(),
            random(&mut rng, &[4]).scale(0.3),
        ];
        let report = GradCheck::default().run(f, &inputs).unwrap();
        assert!(report.worst < 1e-5, "{report:?}");
    }

    #[test]
    fn block_attention_is_cheaper_than_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = params(&mut rng, 16, 16);
        let x = random(&mut rng, &[256, 16]);
        let (_, global) = counter::measure(|| vanilla_attention(&x, &p.proj).unwrap());
        let layout = BlockLayout::new(16, 16, 4, 4).unwrap();
        let blocks: Vec<Tensor> = layout
            .origins()
            .map(|o| {
                let idx: Vec<usize> = layout
                    .pixels(o)
                    .iter()
                    .flat_map(|&px| (0..16).map(move |c| px * 16 + c))
                    .collect();
                x.gather(idx, &[16, 16]).unwrap()
            })
            .collect();
        let (_, local) = counter::measure(|| {
            sca_forward(
                &blocks,
                &blocks,
                &blocks,
                &layout,
                &p,
                &GateMode::Unit,
                None,
            )
            .unwrap()
        });
        assert!(local < global, "{local} vs {global}");
    }
}
