//! Orthonormal 2-D DCT-II, frequency selection and the per-channel scene gate.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial grid every block is pooled to before coefficient extraction.
pub const GATE_GRID: usize = 7;

/// Basis images `B[h, w, x, y]` of an orthonormal `T_H×T_W` DCT.
#[derive(Debug, Clone)]
pub struct DctBasis {
    th: usize,
    tw: usize,
    values: Vec<f64>,
}

fn alpha(k: usize, n: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

pub fn dct_basis(th: usize, tw: usize) -> Result<DctBasis> {
    if th == 0 || tw == 0 {
        return Err(Error::config(format!(
            "DCT extents must be positive, got {th}×{tw}"
        )));
    }
    let mut values = vec![0.0; th * tw * th * tw];
    for h in 0..th {
        for w in 0..tw {
            let a = alpha(h, th) * alpha(w, tw);
            for x in 0..th {
                let cx = (PI * (2 * x + 1) as f64 * h as f64 / (2 * th) as f64).cos();
                for y in 0..tw {
                    let cy = (PI * (2 * y + 1) as f64 * w as f64 / (2 * tw) as f64).cos();
                    values[((h * tw + w) * th + x) * tw + y] = a * cx * cy;
                }
            }
        }
    }
    Ok(DctBasis { th, tw, values })
}

impl DctBasis {
    pub fn extents(&self) -> (usize, usize) {
        (self.th, self.tw)
    }

    pub fn value(&self, h: usize, w: usize, x: usize, y: usize) -> f64 {
        self.values[((h * self.tw + w) * self.th + x) * self.tw + y]
    }

    /// The `th×tw` basis image of frequency `(h, w)`.
    pub fn image(&self, h: usize, w: usize) -> &[f64] {
        let n = self.th * self.tw;
        &self.values[(h * self.tw + w) * n..][..n]
    }

    fn check(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.shape() != [self.th, self.tw] {
            return Err(Error::dim(format!(
                "{what} of shape {:?} does not match a {}×{} basis",
                t.shape(),
                self.th,
                self.tw
            )));
        }
        Ok(())
    }
}

/// `T[h, w] = Σ A[x, y] · B[h, w, x, y]`.
pub fn dct2(a: &Tensor, basis: &DctBasis) -> Result<Tensor> {
    basis.check(a, "image")?;
    let (th, tw) = basis.extents();
    let coeffs = (0..th * tw)
        .map(|f| {
            let img = basis.image(f / tw, f % tw);
            img.iter().zip(a.data()).map(|(b, v)| b * v).sum()
        })
        .collect();
    Tensor::new(&[th, tw], coeffs)
}

/// `A[x, y] = Σ T[h, w] · B[h, w, x, y]`.
pub fn idct2(t: &Tensor, basis: &DctBasis) -> Result<Tensor> {
    basis.check(t, "spectrum")?;
    let (th, tw) = basis.extents();
    let mut out = vec![0.0; th * tw];
    for (f, &coeff) in t.data().iter().enumerate() {
        let img = basis.image(f / tw, f % tw);
        out.iter_mut().zip(img).for_each(|(o, b)| *o += coeff * b);
    }
    Tensor::new(&[th, tw], out)
}

/// DCT coefficients paired with the frequencies a gate reads from them.
#[derive(Debug, Clone)]
pub struct Spectrum {
    coefficients: Tensor,
    selected: Vec<(usize, usize)>,
}

impl Spectrum {
    pub fn new(coefficients: Tensor, selected: Vec<(usize, usize)>) -> Result<Self> {
        let &[th, tw] = coefficients.shape() else {
            return Err(Error::dim(format!(
                "spectrum must be 2-D, got {:?}",
                coefficients.shape()
            )));
        };
        validate_frequencies(&selected, th, tw)?;
        Ok(Spectrum {
            coefficients,
            selected,
        })
    }

    pub fn coefficients(&self) -> &Tensor {
        &self.coefficients
    }

    pub fn selected(&self) -> &[(usize, usize)] {
        &self.selected
    }

    pub fn count(&self) -> usize {
        self.selected.len()
    }

    /// Coefficient values at the selected frequencies, in selection order.
    pub fn selected_values(&self) -> Vec<f64> {
        self.selected
            .iter()
            .map(|&(u, v)| self.coefficients.at(&[u, v]))
            .collect()
    }
}

/// How gate frequencies are chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrequencyPolicy {
    /// Anti-diagonal walk from DC: (0,0), (0,1), (1,0), (2,0), (1,1), (0,2), ...
    ZigzagLow,
    Explicit(Vec<(usize, usize)>),
}

fn validate_frequencies(freqs: &[(usize, usize)], th: usize, tw: usize) -> Result<()> {
    for (i, &(u, v)) in freqs.iter().enumerate() {
        if u >= th || v >= tw {
            return Err(Error::config(format!(
                "frequency ({u}, {v}) outside the {th}×{tw} grid"
            )));
        }
        if freqs[..i].contains(&(u, v)) {
            return Err(Error::config(format!(
                "frequency ({u}, {v}) selected twice"
            )));
        }
    }
    Ok(())
}

pub fn select_frequencies(
    policy: &FrequencyPolicy,
    m: usize,
    th: usize,
    tw: usize,
) -> Result<Vec<(usize, usize)>> {
    if m == 0 || m > th * tw {
        return Err(Error::config(format!(
            "cannot select {m} frequencies from a {th}×{tw} grid"
        )));
    }
    match policy {
        FrequencyPolicy::ZigzagLow => {
            let mut out = Vec::with_capacity(m);
            for s in 0..th + tw - 1 {
                let rows: Vec<usize> = if s % 2 == 1 {
                    (0..=s).collect()
                } else {
                    (0..=s).rev().collect()
                };
                for u in rows {
                    let v = s - u;
                    if u < th && v < tw {
                        out.push((u, v));
                        if out.len() == m {
                            return Ok(out);
                        }
                    }
                }
            }
            unreachable!("grid holds at least m frequencies")
        }
        FrequencyPolicy::Explicit(list) => {
            if list.len() != m {
                return Err(Error::config(format!(
                    "explicit list has {} frequencies, {m} requested",
                    list.len()
                )));
            }
            validate_frequencies(list, th, tw)?;
            Ok(list.clone())
        }
    }
}

/// Adaptive average pooling of an `h×w` map to `oh×ow`, as a dense `(oh·ow)×(h·w)`
/// operator. Cell `i` covers source rows `floor(i·h/oh) .. ceil((i+1)·h/oh)`.
pub fn adaptive_pool_matrix(h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let span = |i: usize, inp: usize, out: usize| (i * inp / out, ((i + 1) * inp).div_ceil(out));
    let mut m = vec![0.0; oh * ow * h * w];
    for i in 0..oh {
        let (y0, y1) = span(i, h, oh);
        for j in 0..ow {
            let (x0, x1) = span(j, w, ow);
            let weight = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    m[(i * ow + j) * h * w + y * w + x] = weight;
                }
            }
        }
    }
    m
}

/// Pool-then-project operator of one block size: entry `[p, g]` is the weight of
/// block pixel `p` in the pooled DCT coefficient of frequency `g`.
#[derive(Debug, Clone)]
pub struct GateProjection {
    h: usize,
    w: usize,
    freqs: Vec<(usize, usize)>,
    weights: Tensor,
}

impl GateProjection {
    pub fn new(h: usize, w: usize, freqs: &[(usize, usize)]) -> Result<Self> {
        validate_frequencies(freqs, GATE_GRID, GATE_GRID)?;
        if freqs.is_empty() || h == 0 || w == 0 {
            return Err(Error::config(
                "gate needs a non-empty block and at least one frequency",
            ));
        }
        let basis = dct_basis(GATE_GRID, GATE_GRID)?;
        let cells = GATE_GRID * GATE_GRID;
        let pool = adaptive_pool_matrix(h, w, GATE_GRID, GATE_GRID);
        let n = h * w;
        let m = freqs.len();
        let mut weights = vec![0.0; n * m];
        for (g, &(u, v)) in freqs.iter().enumerate() {
            let img = basis.image(u, v);
            for p in 0..n {
                weights[p * m + g] = (0..cells).map(|c| pool[c * n + p] * img[c]).sum();
            }
        }
        Ok(GateProjection {
            h,
            w,
            freqs: freqs.to_vec(),
            weights: Tensor::new(&[n, m], weights)?,
        })
    }

    pub fn block(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn frequencies(&self) -> &[(usize, usize)] {
        &self.freqs
    }

    /// Per-channel pooled coefficient of a `C×h×w` block: channel `c` in group
    /// `g = c / (C/M)` reads frequency `g`.
    pub fn pooled(&self, block: &Tensor) -> Result<Tensor> {
        let &[c, h, w] = block.shape() else {
            return Err(Error::dim(format!(
                "gate input must be C×h×w, got {:?}",
                block.shape()
            )));
        };
        if (h, w) != (self.h, self.w) {
            return Err(Error::dim(format!(
                "gate built for {}×{} blocks, got {h}×{w}",
                self.h, self.w
            )));
        }
        let m = self.freqs.len();
        if c % m != 0 {
            return Err(Error::config(format!(
                "{c} channels cannot be split into {m} frequency groups"
            )));
        }
        let group = c / m;
        let per_freq = block.reshape(&[c, h * w])?.matmul(&self.weights)?;
        per_freq.gather((0..c).map(|ch| ch * m + ch / group).collect(), &[c])
    }
}

/// Two-layer perceptron `C → C/r → C` producing gate logits.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GateParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(GateParams {
            w1: Tensor::zeros(&[channels, hidden]).as_param(),
            b1: Tensor::zeros(&[hidden]).as_param(),
            w2: Tensor::zeros(&[hidden, channels]).as_param(),
            b2: Tensor::zeros(&[channels]).as_param(),
        })
    }

    /// Uniform fan-in initialisation with zero biases.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        let mut uniform = |rows: usize, cols: usize| {
            let bound = (3.0 / rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::param(&[rows, cols], data)
        };
        Ok(GateParams {
            w1: uniform(channels, hidden)?,
            b1: Tensor::zeros(&[hidden]).as_param(),
            w2: uniform(hidden, channels)?,
            b2: Tensor::zeros(&[channels]).as_param(),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn from_tensors(t: [Tensor; 4]) -> Self {
        let [w1, b1, w2, b2] = t;
        GateParams { w1, b1, w2, b2 }
    }
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels < reduction {
        return Err(Error::config(format!(
            "gate reduction {reduction} invalid for {channels} channels"
        )));
    }
    Ok(channels / reduction)
}

/// Per-channel multiplier in `(0, 1)` derived from a block's spectrum.
#[derive(Debug, Clone)]
pub struct SceneGate(Tensor);

impl SceneGate {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn len(&self) -> usize {
        self.0.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.0.numel() == 0
    }
}

/// Pools each channel group of a `C×h×w` block to the gate grid, reads its
/// assigned DCT coefficient, and squashes the perceptron output into `(0, 1)`.
pub fn scene_gate(block: &Tensor, proj: &GateProjection, params: &GateParams) -> Result<SceneGate> {
    let c = block.shape().first().copied().unwrap_or(0);
    if params.w1.shape().first() != Some(&c) || params.w2.shape().get(1) != Some(&c) {
        return Err(Error::dim(format!(
            "gate perceptron shaped {:?}/{:?} for a {c}-channel block",
            params.w1.shape(),
            params.w2.shape()
        )));
    }
    let pooled = proj.pooled(block)?.reshape(&[1, c])?;
    let hidden = pooled.matmul(&params.w1)?.add_rows(&params.b1)?.relu();
    let logits = hidden.matmul(&params.w2)?.add_rows(&params.b2)?;
    Ok(SceneGate(logits.sigmoid().reshape(&[c])?))
}
