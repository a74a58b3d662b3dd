//! The full segmentation network: a strided convolutional backbone, the
//! semantic-mask / scene-coupling decoder head, three-term loss, SGD and
//! checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{decode_tensor, encode_tensor, Dihedral};
use crate::dct::{select_frequencies, FrequencyPolicy, GateParams, GateProjection, GATE_GRID};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::rope::RopeConfig;
use crate::sca::{fuse_output, sca_forward, BlockAttention, GateMode, Projections, ScaParams};
use crate::smg::{
    argmax, he_normal, merge_token_blocks, semantic_masks, ArgmaxMask, BlockLayout, PreClassifier,
};
use crate::tensor::{rule, Conv2dSpec, Gradients, Tensor};

/// Stride of each backbone stage; the product is the output stride.
pub const STAGE_STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const OUTPUT_STRIDE: usize = 8;
/// Stage whose output feeds the auxiliary head (0-based).
pub const AUX_STAGE: usize = 2;
/// Fixed input normalisation `(x − mean) / std` applied to `[0, 1]` images.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Switches for the decoder-head components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadOptions {
    pub rope: bool,
    pub scene_gate: bool,
    /// Keys and values from semantic masks; otherwise raw features.
    pub semantic_masks: bool,
    /// Shared rotation angles for both axes.
    pub identical_angles: bool,
}

impl HeadOptions {
    pub fn full() -> Self {
        HeadOptions {
            rope: true,
            scene_gate: true,
            semantic_masks: true,
            identical_angles: false,
        }
    }

    /// No rotation, unit gate, raw features as keys and values.
    pub fn ablated() -> Self {
        HeadOptions {
            rope: false,
            scene_gate: false,
            semantic_masks: false,
            identical_angles: false,
        }
    }
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScsmConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Output channels of the four backbone stages.
    pub backbone: [usize; 4],
    /// 3×3 convolutions per stage; only the first is strided.
    pub stage_depth: usize,
    /// `Ĉ`, width of `R` and the fused output.
    pub c_hat: usize,
    /// `C`, width of queries, keys and values.
    pub c_attn: usize,
    pub aux_channels: usize,
    pub classes: usize,
    pub block: (usize, usize),
    pub frequencies: usize,
    pub frequency_policy: FrequencyPolicy,
    pub gate_reduction: usize,
    pub head: HeadOptions,
    /// Weights of `L_o`, `L_d`, `L_a`.
    pub loss_weights: [f64; 3],
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    /// Random flips and quarter turns of training samples.
    pub augment: bool,
}

impl Default for ScsmConfig {
    fn default() -> Self {
        ScsmConfig {
            height: 64,
            width: 64,
            in_channels: 3,
            backbone: [16, 32, 64, 64],
            stage_depth: 1,
            c_hat: 64,
            c_attn: 64,
            aux_channels: 32,
            classes: 4,
            block: (4, 4),
            frequencies: 16,
            frequency_policy: FrequencyPolicy::ZigzagLow,
            gate_reduction: 4,
            head: HeadOptions::full(),
            loss_weights: [1.0, 0.8, 0.4],
            learning_rate: 0.01,
            weight_decay: 1e-4,
            poly_power: 0.9,
            momentum: 0.0,
            max_iter: 2000,
            batch_size: 16,
            augment: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

impl ScsmConfig {
    /// Every key accepted by [`ScsmConfig::set`].
    pub const KEYS: [&'static str; 25] = [
        "height",
        "width",
        "in_channels",
        "backbone",
        "stage_depth",
        "c_hat",
        "c_attn",
        "aux_channels",
        "classes",
        "block",
        "frequencies",
        "frequency_policy",
        "gate_reduction",
        "rope",
        "scene_gate",
        "semantic_masks",
        "identical_angles",
        "loss_weights",
        "learning_rate",
        "weight_decay",
        "poly_power",
        "momentum",
        "max_iter",
        "batch_size",
        "augment",
    ];

    /// Small variant used for gradient checks: 16×16 input, 2×2 feature map.
    pub fn tiny() -> Self {
        ScsmConfig {
            height: 16,
            width: 16,
            backbone: [4, 4, 8, 8],
            stage_depth: 1,
            c_hat: 8,
            c_attn: 8,
            aux_channels: 4,
            classes: 3,
            block: (1, 2),
            frequencies: 2,
            gate_reduction: 2,
            ..Self::default()
        }
    }

    pub fn feature_extents(&self) -> (usize, usize) {
        (self.height / OUTPUT_STRIDE, self.width / OUTPUT_STRIDE)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "backbone" => {
                let v: Vec<usize> = parse_list(key, value)?;
                self.backbone = v
                    .try_into()
                    .map_err(|_| Error::config(format!("{key}: expected four channel counts")))?;
            }
            "stage_depth" => self.stage_depth = parse(key, value)?,
            "c_hat" => self.c_hat = parse(key, value)?,
            "c_attn" => self.c_attn = parse(key, value)?,
            "aux_channels" => self.aux_channels = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "block" => {
                let v: Vec<usize> = parse_list(key, value.replace('x', ",").as_str())?;
                self.block = match v[..] {
                    [s] => (s, s),
                    [h, w] => (h, w),
                    _ => return Err(Error::config(format!("{key}: expected H or HxW"))),
                };
            }
            "frequencies" => self.frequencies = parse(key, value)?,
            "frequency_policy" => {
                self.frequency_policy = match value.trim() {
                    "zigzag" => FrequencyPolicy::ZigzagLow,
                    list => {
                        let mut pairs = Vec::new();
                        for item in list.split(',') {
                            let (u, v) = item.split_once(':').ok_or_else(|| {
                                Error::config(format!("{key}: expected zigzag or u:v,..."))
                            })?;
                            pairs.push((parse(key, u)?, parse(key, v)?));
                        }
                        FrequencyPolicy::Explicit(pairs)
                    }
                }
            }
            "gate_reduction" => self.gate_reduction = parse(key, value)?,
            "rope" => self.head.rope = parse_bool(key, value)?,
            "scene_gate" => self.head.scene_gate = parse_bool(key, value)?,
            "semantic_masks" => self.head.semantic_masks = parse_bool(key, value)?,
            "identical_angles" => self.head.identical_angles = parse_bool(key, value)?,
            "loss_weights" => {
                let v: Vec<f64> = parse_list(key, value)?;
                self.loss_weights = v
                    .try_into()
                    .map_err(|_| Error::config(format!("{key}: expected three weights")))?;
            }
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "max_iter" => self.max_iter = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines in [`ScsmConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let policy = match &self.frequency_policy {
            FrequencyPolicy::ZigzagLow => "zigzag".to_string(),
            FrequencyPolicy::Explicit(p) => p
                .iter()
                .map(|(u, v)| format!("{u}:{v}"))
                .collect::<Vec<_>>()
                .join(","),
        };
        let w = self.loss_weights;
        let values = [
            self.height.to_string(),
            self.width.to_string(),
            self.in_channels.to_string(),
            list(&self.backbone),
            self.stage_depth.to_string(),
            self.c_hat.to_string(),
            self.c_attn.to_string(),
            self.aux_channels.to_string(),
            self.classes.to_string(),
            format!("{}x{}", self.block.0, self.block.1),
            self.frequencies.to_string(),
            policy,
            self.gate_reduction.to_string(),
            self.head.rope.to_string(),
            self.head.scene_gate.to_string(),
            self.head.semantic_masks.to_string(),
            self.head.identical_angles.to_string(),
            format!("{:?},{:?},{:?}", w[0], w[1], w[2]),
            format!("{:?}", self.learning_rate),
            format!("{:?}", self.weight_decay),
            format!("{:?}", self.poly_power),
            format!("{:?}", self.momentum),
            self.max_iter.to_string(),
            self.batch_size.to_string(),
            self.augment.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.height == 0
            || self.width == 0
            || self.height % OUTPUT_STRIDE != 0
            || self.width % OUTPUT_STRIDE != 0
        {
            return fail(format!(
                "input {}×{} must be a positive multiple of {OUTPUT_STRIDE}",
                self.height, self.width
            ));
        }
        let widths = [self.in_channels, self.c_hat, self.c_attn, self.aux_channels];
        if widths.contains(&0) || self.backbone.contains(&0) || self.stage_depth == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least two classes, got {}", self.classes));
        }
        if self.head.rope && self.c_attn % 2 != 0 {
            return fail(format!(
                "c_attn {} must be even for rotary pairing",
                self.c_attn
            ));
        }
        if self.frequencies == 0 || self.c_attn % self.frequencies != 0 {
            return fail(format!(
                "c_attn {} must be divisible by the {} frequencies",
                self.c_attn, self.frequencies
            ));
        }
        if self.gate_reduction == 0 || self.c_attn < self.gate_reduction {
            return fail(format!(
                "gate_reduction {} invalid for c_attn {}",
                self.gate_reduction, self.c_attn
            ));
        }
        let (fh, fw) = self.feature_extents();
        let (bh, bw) = self.block;
        if bh == 0 || bw == 0 || bh > fh || bw > fw {
            return fail(format!(
                "block {bh}x{bw} does not fit the {fh}×{fw} feature map"
            ));
        }
        select_frequencies(
            &self.frequency_policy,
            self.frequencies,
            GATE_GRID,
            GATE_GRID,
        )?;
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail(format!(
                "loss weights {:?} must be finite and non-negative",
                self.loss_weights
            ));
        }
        let rates = [
            self.learning_rate,
            self.weight_decay,
            self.poly_power,
            self.momentum,
        ];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) || self.momentum >= 1.0 {
            return fail(
                "learning_rate, weight_decay, poly_power must be >= 0 and momentum in [0, 1)"
                    .into(),
            );
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Canonical parameter names and shapes.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &c) in self.backbone.iter().enumerate() {
            for j in 0..self.stage_depth {
                out.push((format!("backbone.{i}.{j}.weight"), vec![c, c_in, 3, 3]));
                out.push((format!("backbone.{i}.{j}.bias"), vec![c]));
                c_in = c;
            }
        }
        let (ch, c, k) = (self.c_hat, self.c_attn, self.classes);
        let hidden = c / self.gate_reduction;
        let a = self.aux_channels;
        let rest: [(&str, Vec<usize>); 20] = [
            ("neck.weight", vec![ch, c_in, 3, 3]),
            ("neck.bias", vec![ch]),
            ("pre.w1", vec![ch, ch, 1, 1]),
            ("pre.b1", vec![ch]),
            ("pre.w2", vec![k, ch, 1, 1]),
            ("pre.b2", vec![k]),
            ("sca.wq", vec![ch, c]),
            ("sca.wk", vec![ch, c]),
            ("sca.wv", vec![ch, c]),
            ("gate.w1", vec![c, hidden]),
            ("gate.b1", vec![hidden]),
            ("gate.w2", vec![hidden, c]),
            ("gate.b2", vec![c]),
            ("fuse.weight", vec![ch, c + ch, 3, 3]),
            ("fuse.bias", vec![ch]),
            ("cls.weight", vec![k, ch, 1, 1]),
            ("cls.bias", vec![k]),
            ("aux.w1", vec![a, self.backbone[AUX_STAGE], 3, 3]),
            ("aux.b1", vec![a]),
            ("aux.w2", vec![k, a, 1, 1]),
        ];
        out.extend(rest.into_iter().map(|(n, s)| (n.to_string(), s)));
        out.push(("aux.b2".into(), vec![k]));
        out
    }
}

/// Named parameter tensors in canonical order.
#[derive(Debug, Clone)]
pub struct ScsmParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ScsmParams {
    pub fn zeros(config: &ScsmConfig) -> Self {
        let (names, tensors) = config
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s).as_param()))
            .unzip();
        ScsmParams { names, tensors }
    }

    pub fn init(config: &ScsmConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let gate = GateParams::init(config.c_attn, config.gate_reduction, &mut rng)?;
        let proj = Projections::init(config.c_hat, config.c_attn, &mut rng);
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            let fresh = match name.as_str() {
                "sca.wq" => proj.wq.clone(),
                "sca.wk" => proj.wk.clone(),
                "sca.wv" => proj.wv.clone(),
                "gate.w1" => gate.w1.clone(),
                "gate.w2" => gate.w2.clone(),
                n if t.rank() == 4 && !n.ends_with("bias") => he_normal(t.shape(), &mut rng),
                _ => continue,
            };
            *t = fresh;
        }
        Ok(p)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.tensors[i]
    }

    /// Same names with new tensors, checking shapes.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::dim(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                self.tensors.len()
            )));
        }
        for ((n, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::dim(format!(
                    "{n}: shape {:?}, expected {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        Ok(ScsmParams {
            names: self.names.clone(),
            tensors,
        })
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Main logits, `K×H×W`.
    pub logits_o: Tensor,
    /// Pre-classification logits upsampled to input size.
    pub logits_d: Tensor,
    /// Auxiliary logits upsampled to input size.
    pub logits_a: Tensor,
    /// Argmax of the pre-classification at feature resolution.
    pub pre_mask: ArgmaxMask,
    pub attention: Vec<BlockAttention>,
}

/// The network: configuration, parameters and derived constants.
#[derive(Debug, Clone)]
pub struct Scsm {
    config: ScsmConfig,
    params: ScsmParams,
    gate_projection: GateProjection,
    rope: RopeConfig,
    layout: BlockLayout,
}

impl Scsm {
    pub fn new(config: ScsmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ScsmParams::init(&config, seed)?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: ScsmConfig, params: ScsmParams) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if params.names.len() != expected.len() {
            return Err(Error::Incompatible(format!(
                "{} parameters, configuration needs {}",
                params.names.len(),
                expected.len()
            )));
        }
        for ((name, shape), (n, t)) in expected
            .iter()
            .zip(params.names.iter().zip(&params.tensors))
        {
            if name != n || t.shape() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter {n} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let freqs = select_frequencies(
            &config.frequency_policy,
            config.frequencies,
            GATE_GRID,
            GATE_GRID,
        )?;
        let gate_projection = GateProjection::new(config.block.0, config.block.1, &freqs)?;
        let rope = if config.head.identical_angles {
            RopeConfig::identical_angles(config.c_attn)?
        } else {
            RopeConfig::base_angles(config.c_attn.max(2) & !1)?
        };
        let (fh, fw) = config.feature_extents();
        let layout = BlockLayout::new(fh, fw, config.block.0, config.block.1)?;
        Ok(Scsm {
            config,
            params,
            gate_projection,
            rope,
            layout,
        })
    }

    pub fn config(&self) -> &ScsmConfig {
        &self.config
    }

    pub fn params(&self) -> &ScsmParams {
        &self.params
    }

    pub fn set_params(&mut self, params: ScsmParams) -> Result<()> {
        self.params = self.params.with_tensors(params.tensors)?;
        Ok(())
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(&self.params, image)
    }

    /// Forward pass with an explicit parameter set of the same layout.
    pub fn forward_with(&self, p: &ScsmParams, image: &Tensor) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if image.shape() != [cfg.in_channels, cfg.height, cfg.width] {
            if image.rank() == 3
                && (image.shape()[1] % OUTPUT_STRIDE != 0 || image.shape()[2] % OUTPUT_STRIDE != 0)
            {
                return Err(Error::config(format!(
                    "input extents {:?} not divisible by {OUTPUT_STRIDE}",
                    &image.shape()[1..]
                )));
            }
            return Err(Error::dim(format!(
                "input of shape {:?}, model expects [{}, {}, {}]",
                image.shape(),
                cfg.in_channels,
                cfg.height,
                cfg.width
            )));
        }
        let mut x = image.add_scalar(-INPUT_MEAN).scale(1.0 / INPUT_STD);
        let mut aux_in = None;
        for (i, &stride) in STAGE_STRIDES.iter().enumerate() {
            for j in 0..cfg.stage_depth {
                let w = p.get(&format!("backbone.{i}.{j}.weight"));
                let b = p.get(&format!("backbone.{i}.{j}.bias"));
                let s = if j == 0 { stride } else { 1 };
                x = x.conv2d(w, Some(b), Conv2dSpec::new(s, 1))?.relu();
            }
            if i == AUX_STAGE {
                aux_in = Some(x.clone());
            }
        }
        let r = x
            .conv2d(
                p.get("neck.weight"),
                Some(p.get("neck.bias")),
                Conv2dSpec::same(3),
            )?
            .relu();
        let pre = PreClassifier {
            w1: p.get("pre.w1").clone(),
            b1: p.get("pre.b1").clone(),
            w2: p.get("pre.w2").clone(),
            b2: p.get("pre.b2").clone(),
        };
        let d = pre.forward(&r)?;

        let masks = semantic_masks(&r, &d, &self.layout)?;
        let (keys, values) = if cfg.head.semantic_masks {
            (&masks.local, &masks.global)
        } else {
            (&masks.features, &masks.features)
        };
        let sca = ScaParams {
            proj: Projections {
                wq: p.get("sca.wq").clone(),
                wk: p.get("sca.wk").clone(),
                wv: p.get("sca.wv").clone(),
            },
            gate: GateParams::from_tensors(
                ["gate.w1", "gate.b1", "gate.w2", "gate.b2"].map(|n| p.get(n).clone()),
            ),
        };
        let gate_mode = if cfg.head.scene_gate {
            GateMode::Learned(self.gate_projection.clone())
        } else {
            GateMode::Unit
        };
        let rope = cfg.head.rope.then_some(&self.rope);
        let attention = sca_forward(
            &masks.features,
            keys,
            values,
            &self.layout,
            &sca,
            &gate_mode,
            rope,
        )?;
        let z: Vec<Tensor> = attention.iter().map(|b| b.output.clone()).collect();
        let r_a = merge_token_blocks(&z, &self.layout)?;
        let r_o = fuse_output(&r_a, &r, p.get("fuse.weight"), Some(p.get("fuse.bias")))?.relu();

        let one = Conv2dSpec::new(1, 0);
        let logits_o = r_o
            .conv2d(p.get("cls.weight"), Some(p.get("cls.bias")), one)?
            .bilinear_upsample(OUTPUT_STRIDE)?;
        let logits_d = d.bilinear_upsample(OUTPUT_STRIDE)?;
        let aux = aux_in
            .expect("aux stage ran")
            .conv2d(p.get("aux.w1"), Some(p.get("aux.b1")), Conv2dSpec::same(3))?
            .relu()
            .conv2d(p.get("aux.w2"), Some(p.get("aux.b2")), one)?;
        let logits_a = aux.bilinear_upsample(OUTPUT_STRIDE)?;
        Ok(ForwardOutput {
            logits_o,
            logits_d,
            logits_a,
            pre_mask: masks.mask,
            attention,
        })
    }

    /// Per-pixel argmax of the main logits.
    pub fn predict(&self, image: &Tensor) -> Result<ArgmaxMask> {
        argmax(&self.forward(image)?.logits_o)
    }

    pub fn loss(&self, image: &Tensor, truth: &ArgmaxMask) -> Result<LossBundle> {
        total_loss(&self.forward(image)?, truth, self.config.loss_weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, encode_checkpoint(&self.config, &self.params)?)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (config, params) = decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        Self::with_params(config, params)
    }
}

fn pixel_dims(t: &Tensor, truth: &ArgmaxMask) -> Result<(usize, usize)> {
    let &[k, h, w] = t.shape() else {
        return Err(Error::dim(format!("expected K×H×W, got {:?}", t.shape())));
    };
    if (h, w) != (truth.height(), truth.width()) {
        return Err(Error::dim(format!(
            "prediction {h}×{w} vs truth {}×{}",
            truth.height(),
            truth.width()
        )));
    }
    if let Some(&l) = truth.labels().iter().find(|&&l| l >= k) {
        return Err(Error::dim(format!(
            "truth label {l} out of range for {k} classes"
        )));
    }
    Ok((k, h * w))
}

/// `−(1/HW)·Σ log ŷ[truth]` for `K×H×W` probabilities.
pub fn cross_entropy(probs: &Tensor, truth: &ArgmaxMask) -> Result<Tensor> {
    let (k, hw) = pixel_dims(probs, truth)?;
    let p = probs.data();
    for px in 0..hw {
        let column = (0..k).map(|c| p[c * hw + px]);
        let (sum, neg) = column.fold((0.0, false), |(s, n), v| {
            (s + v, n || v < 0.0 || !v.is_finite())
        });
        if neg || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "pixel {px} is not a probability vector (sum {sum})"
            )));
        }
    }
    let labels = truth.labels().to_vec();
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(px, &l)| p[l * hw + px].ln())
        .sum::<f64>()
        / hw as f64;
    Ok(Tensor::from_op(
        "cross_entropy",
        vec![1],
        vec![loss],
        vec![probs.clone()],
        rule(move |inputs: &[Tensor], _: &[f64], g: &[f64]| {
            let p = inputs[0].data();
            let mut grad = vec![0.0; p.len()];
            for (px, &l) in labels.iter().enumerate() {
                grad[l * hw + px] = -g[0] / (hw as f64 * p[l * hw + px]);
            }
            vec![Some(grad)]
        }),
    ))
}

/// Cross entropy of softmax(`logits`) over the class axis, fused for stability.
pub fn softmax_cross_entropy(logits: &Tensor, truth: &ArgmaxMask) -> Result<Tensor> {
    let (k, hw) = pixel_dims(logits, truth)?;
    let z = logits.data();
    let mut probs = vec![0.0; k * hw];
    let mut loss = 0.0;
    for (px, &l) in truth.labels().iter().enumerate() {
        let max = (0..k)
            .map(|c| z[c * hw + px])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..k).map(|c| (z[c * hw + px] - max).exp()).sum();
        for c in 0..k {
            probs[c * hw + px] = (z[c * hw + px] - max).exp() / sum;
        }
        loss -= z[l * hw + px] - max - sum.ln();
    }
    loss /= hw as f64;
    let labels = truth.labels().to_vec();
    Ok(Tensor::from_op(
        "softmax_cross_entropy",
        vec![1],
        vec![loss],
        vec![logits.clone()],
        rule(move |_: &[Tensor], _: &[f64], g: &[f64]| {
            let scale = g[0] / hw as f64;
            let mut grad: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (px, &l) in labels.iter().enumerate() {
                grad[l * hw + px] -= scale;
            }
            vec![Some(grad)]
        }),
    ))
}

/// The three loss terms and their weighted sum.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub o: Tensor,
    pub d: Tensor,
    pub a: Tensor,
    pub total: Tensor,
}

/// Plain values of a [`LossBundle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub o: f64,
    pub d: f64,
    pub a: f64,
    pub total: f64,
}

impl LossBundle {
    /// Weighted sum `w0·L_o + w1·L_d + w2·L_a`.
    pub fn compose(o: Tensor, d: Tensor, a: Tensor, weights: [f64; 3]) -> Result<Self> {
        let total = o
            .scale(weights[0])
            .add(&d.scale(weights[1]))?
            .add(&a.scale(weights[2]))?;
        Ok(LossBundle { o, d, a, total })
    }

    pub fn values(&self) -> LossValues {
        LossValues {
            o: self.o.item(),
            d: self.d.item(),
            a: self.a.item(),
            total: self.total.item(),
        }
    }
}

pub fn total_loss(
    out: &ForwardOutput,
    truth: &ArgmaxMask,
    weights: [f64; 3],
) -> Result<LossBundle> {
    LossBundle::compose(
        softmax_cross_entropy(&out.logits_o, truth)?,
        softmax_cross_entropy(&out.logits_d, truth)?,
        softmax_cross_entropy(&out.logits_a, truth)?,
        weights,
    )
}

/// `base·(1 − iter/max_iter)^power`, zero from `max_iter` on.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// SGD state: the model, optional momentum buffers and the iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Scsm,
    velocity: Vec<Vec<f64>>,
    iter: usize,
}

impl Trainer {
    pub fn new(model: Scsm) -> Self {
        let velocity = model
            .params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Trainer {
            model,
            velocity,
            iter: 0,
        }
    }

    pub fn model(&self) -> &Scsm {
        &self.model
    }

    pub fn into_model(self) -> Scsm {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn learning_rate(&self) -> f64 {
        let c = &self.model.config;
        poly_lr(c.learning_rate, self.iter, c.max_iter, c.poly_power)
    }

    /// Mean gradient of the weighted loss over `batch`.
    pub fn gradients(&self, batch: &[(Tensor, ArgmaxMask)]) -> Result<(Vec<Vec<f64>>, LossValues)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let params = &self.model.params;
        let mut grads: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        let mut sum = LossValues {
            o: 0.0,
            d: 0.0,
            a: 0.0,
            total: 0.0,
        };
        for (image, truth) in batch {
            let bundle = self.model.loss(image, truth)?;
            let v = bundle.values();
            if !v.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {} (L_o={}, L_d={}, L_a={})",
                    self.iter, v.o, v.d, v.a
                )));
            }
            let g: Gradients = bundle.total.backward()?;
            for (acc, t) in grads.iter_mut().zip(&params.tensors) {
                if let Some(gt) = g.get(t) {
                    acc.iter_mut().zip(gt).for_each(|(a, b)| *a += b);
                }
            }
            sum.o += v.o;
            sum.d += v.d;
            sum.a += v.a;
            sum.total += v.total;
        }
        let n = batch.len() as f64;
        for g in &mut grads {
            g.iter_mut().for_each(|v| *v /= n);
        }
        let mean = LossValues {
            o: sum.o / n,
            d: sum.d / n,
            a: sum.a / n,
            total: sum.total / n,
        };
        Ok((grads, mean))
    }

    /// One SGD step; returns the batch loss before the update.
    pub fn step(&mut self, batch: &[(Tensor, ArgmaxMask)]) -> Result<LossValues> {
        let (grads, losses) = self.gradients(batch)?;
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at iteration {}",
                self.iter
            )));
        }
        let lr = self.learning_rate();
        let c = &self.model.config;
        let (wd, mu) = (c.weight_decay, c.momentum);
        let mut updated = Vec::with_capacity(grads.len());
        for ((t, g), v) in self
            .model
            .params
            .tensors
            .iter()
            .zip(&grads)
            .zip(&mut self.velocity)
        {
            let data: Vec<f64> = t
                .data()
                .iter()
                .zip(g)
                .zip(v.iter_mut())
                .map(|((&w, &g), v)| {
                    *v = mu * *v + g + wd * w;
                    w - lr * *v
                })
                .collect();
            updated.push(Tensor::param(t.shape(), data)?);
        }
        self.model.params = self.model.params.with_tensors(updated)?;
        self.iter += 1;
        Ok(losses)
    }

    /// Runs until `max_iter`, drawing batches from epoch-wise shuffles seeded by `seed`.
    pub fn fit(
        &mut self,
        data: &[(Tensor, ArgmaxMask)],
        seed: u64,
        mut on_step: impl FnMut(usize, &LossValues),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = Vec::new();
        let bs = self.model.config.batch_size;
        while self.iter < self.model.config.max_iter {
            let mut batch = Vec::with_capacity(bs);
            while batch.len() < bs {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                }
                let (image, mask) = &data[order.pop().expect("refilled")];
                if self.model.config.augment {
                    let square = mask.height() == mask.width();
                    batch.push(Dihedral::random(&mut rng, square).apply(image, mask)?);
                } else {
                    batch.push((image.clone(), mask.clone()));
                }
            }
            let it = self.iter;
            let losses = self.step(&batch)?;
            on_step(it, &losses);
        }
        Ok(())
    }
}

/// Confusion matrix of `model` predictions over `data`.
pub fn evaluate(model: &Scsm, data: &[(Tensor, ArgmaxMask)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for (image, truth) in data {
        cm.accumulate(&model.predict(image)?, truth)?;
    }
    Ok(cm)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SCK1";

/// `SCK1 | u32 config length | config text | sha256(config) | u32 count | (u16 name length | name | SCT1 tensor)*`.
pub fn encode_checkpoint(config: &ScsmConfig, params: &ScsmParams) -> Result<Vec<u8>> {
    let text = config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&config.digest());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(t)?);
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], off: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let s = off
        .checked_add(n)
        .and_then(|end| bytes.get(*off..end))
        .ok_or_else(|| Error::format(bytes.len(), format!("truncated in {what}")))?;
    *off += n;
    Ok(s)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ScsmConfig, ScsmParams)> {
    let mut off = 0;
    if take(bytes, &mut off, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let len = u32::from_le_bytes(
        take(bytes, &mut off, 4, "config length")?
            .try_into()
            .unwrap(),
    ) as usize;
    let text_at = off;
    let text = std::str::from_utf8(take(bytes, &mut off, len, "config")?)
        .map_err(|e| Error::format(text_at + e.valid_up_to(), "config is not UTF-8"))?;
    let digest_at = off;
    let digest = take(bytes, &mut off, 32, "config digest")?;
    if Sha256::digest(text.as_bytes()).as_slice() != digest {
        return Err(Error::format(digest_at, "config digest mismatch"));
    }
    let config = ScsmConfig::from_text(text).map_err(|e| Error::Incompatible(e.to_string()))?;
    let count = u32::from_le_bytes(
        take(bytes, &mut off, 4, "parameter count")?
            .try_into()
            .unwrap(),
    ) as usize;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(take(bytes, &mut off, 2, "name length")?.try_into().unwrap())
            as usize;
        let name_at = off;
        let name = std::str::from_utf8(take(bytes, &mut off, n, "name")?)
            .map_err(|_| Error::format(name_at, "parameter name is not UTF-8"))?
            .to_string();
        let (t, used) = decode_tensor(&bytes[off..]).map_err(|e| match e {
            Error::Format { offset, msg } => Error::format(off + offset, format!("{name}: {msg}")),
            other => other,
        })?;
        off += used;
        names.push(name);
        tensors.push(t.as_param());
    }
    if off != bytes.len() {
        return Err(Error::format(
            off,
            format!("{} trailing bytes", bytes.len() - off),
        ));
    }
    Ok((config, ScsmParams { names, tensors }))
}
