//! Finite-difference suites over each stage of the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dct::{scene_gate, select_frequencies, FrequencyPolicy, GateParams, GateProjection};
use crate::error::{Error, Result};
use crate::model::{total_loss, Scsm, ScsmConfig};
use crate::rope::{apply_rope, PositionGrid, RopeConfig};
use crate::sca::{sca_forward, GateMode, Projections, ScaParams};
use crate::smg::{merge_token_blocks, semantic_masks, ArgmaxMask, BlockLayout};
use crate::tensor::gradcheck::{GradCheck, GradCheckReport};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Rope,
    Dct,
    Smg,
    Sca,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Rope,
        Suite::Dct,
        Suite::Smg,
        Suite::Sca,
        Suite::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Rope => "rope",
            Suite::Dct => "dct",
            Suite::Smg => "smg",
            Suite::Sca => "sca",
            Suite::Model => "model",
        }
    }

    /// `all` expands to every suite.
    pub fn parse(selector: &str) -> Result<Vec<Suite>> {
        if selector == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .into_iter()
            .find(|s| s.name() == selector)
            .map(|s| vec![s])
            .ok_or_else(|| Error::config(format!("unknown gradcheck selector {selector:?}")))
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("non-empty shape")
}

/// Worst relative error of the suite with inputs drawn from `seed`.
pub fn run_suite(suite: Suite, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let check = GradCheck::default();
    match suite {
        Suite::Rope => {
            let cfg = RopeConfig::base_angles(8)?;
            let pos = PositionGrid::window(1, 2, 2, 3, 6, 6)?;
            let x = random(&mut rng, &[6, 8]);
            let w = random(&mut rng, &[6, 8]);
            check.run(
                |t| {
                    let y = apply_rope(&t[0], &pos, &cfg)?;
                    Ok(y.mul(&w)?.mul(&y)?.sum())
                },
                &[x],
            )
        }
        Suite::Dct => {
            let freqs = select_frequencies(&FrequencyPolicy::ZigzagLow, 4, 7, 7)?;
            let proj = GateProjection::new(3, 4, &freqs)?;
            let p = GateParams::init(8, 2, &mut rng)?;
            let block = random(&mut rng, &[8, 3, 4]);
            let w = random(&mut rng, &[8]);
            let inputs = [
                block,
                p.w1.detach(),
                random(&mut rng, &[4]).scale(0.3),
                p.w2.detach(),
                random(&mut rng, &[8]).scale(0.3),
            ];
            check.run(
                |t| {
                    let params = GateParams::from_tensors([
                        t[1].clone(),
                        t[2].clone(),
                        t[3].clone(),
                        t[4].clone(),
                    ]);
                    Ok(scene_gate(&t[0], &proj, &params)?.tensor().mul(&w)?.sum())
                },
                &inputs,
            )
        }
        Suite::Smg => {
            let layout = BlockLayout::new(6, 6, 4, 4)?;
            let r = random(&mut rng, &[3, 6, 6]);
            let d = random(&mut rng, &[3, 6, 6]).scale(2.0);
            let w = random(&mut rng, &[16, 3]);
            check.run(
                |t| {
                    let m = semantic_masks(&t[0], &t[1], &layout)?;
                    let mut acc = m.global_centers.sum();
                    for (l, g) in m.local.iter().zip(&m.global) {
                        acc = acc.add(&l.mul(&w)?.sum())?.add(&g.mul(g)?.sum())?;
                    }
                    Ok(acc)
                },
                &[r, d],
            )
        }
        Suite::Sca => {
            let layout = BlockLayout::new(4, 8, 4, 4)?;
            let r = random(&mut rng, &[4, 4, 8]);
            let d = random(&mut rng, &[3, 4, 8]);
            let proj = Projections::init(4, 4, &mut rng);
            let gate = GateParams::init(4, 2, &mut rng)?;
            let freqs = select_frequencies(&FrequencyPolicy::ZigzagLow, 2, 7, 7)?;
            let mode = GateMode::Learned(GateProjection::new(4, 4, &freqs)?);
            let cfg = RopeConfig::base_angles(4)?;
            let target = random(&mut rng, &[4, 4, 8]);
            let inputs = [
                r,
                d,
                proj.wq.detach(),
                proj.wk.detach(),
                proj.wv.detach(),
                gate.w1.detach(),
                random(&mut rng, &[2]).scale(0.3),
                gate.w2.detach(),
                random(&mut rng, &[4]).scale(0.3),
            ];
            check.run(
                |t| {
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
                    Ok(merge_token_blocks(&z, &layout)?.mul(&target)?.sum())
                },
                &inputs,
            )
        }
        Suite::Model => {
            let cfg = ScsmConfig::tiny();
            let model = Scsm::new(cfg.clone(), seed)?;
            let n = cfg.in_channels * cfg.height * cfg.width;
            let image = Tensor::new(
                &[cfg.in_channels, cfg.height, cfg.width],
                (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )?;
            let labels = (0..cfg.height * cfg.width)
                .map(|_| rng.gen_range(0..cfg.classes))
                .collect();
            let truth = ArgmaxMask::new(cfg.height, cfg.width, labels)?;
            let inputs: Vec<Tensor> = model
                .params()
                .tensors()
                .iter()
                .map(Tensor::detach)
                .collect();
            check.sampled(8).run(
                |t| {
                    let p = model.params().with_tensors(t.to_vec())?;
                    let out = model.forward_with(&p, &image)?;
                    Ok(total_loss(&out, &truth, cfg.loss_weights)?.total)
                },
                &inputs,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectors() {
        assert_eq!(Suite::parse("all").unwrap().len(), 5);
        assert_eq!(Suite::parse("sca").unwrap(), vec![Suite::Sca]);
        assert!(matches!(Suite::parse("bogus"), Err(Error::Config(_))));
    }

    #[test]
    fn component_suites_pass() {
        for s in [Suite::Rope, Suite::Dct, Suite::Smg, Suite::Sca] {
            let r = run_suite(s, 1).unwrap();
            assert!(r.worst < 1e-6, "{}: {r:?}", s.name());
        }
    }
}
