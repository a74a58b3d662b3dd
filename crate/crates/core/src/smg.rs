//! Semantic mask generation.
//!
//! Pre-classification logits `D` weight the features `R` into one center per
//! class (spatial softmax per class, then a `K×HW · HW×Ĉ` product). The centers
//! are scattered back onto the pixel grid through the argmax mask of `D`, so
//! each pixel carries the center of its predicted class. The same construction
//! runs independently inside every spatial block to give local masks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Tensor};

/// Per-pixel class indices of an `H×W` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMask {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl ArgmaxMask {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::dim(format!(
                "{} labels for a {height}×{width} mask",
                labels.len()
            )));
        }
        Ok(ArgmaxMask {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: usize) -> Self {
        ArgmaxMask {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    fn check_classes(&self, k: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= k) {
            Some(l) => Err(Error::dim(format!(
                "mask label {l} out of range for {k} classes"
            ))),
            None => Ok(()),
        }
    }
}

/// Per-pixel argmax over the leading (class) axis of `K×H×W` logits.
/// Ties go to the lowest class index.
pub fn argmax(logits: &Tensor) -> Result<ArgmaxMask> {
    let &[k, h, w] = logits.shape() else {
        return Err(Error::dim(format!(
            "logits must be K×H×W, got {:?}",
            logits.shape()
        )));
    };
    let n = h * w;
    let d = logits.data();
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best
        })
        .collect();
    ArgmaxMask::new(h, w, labels)
}

/// Two consecutive 1×1 convolutions `Ĉ → Ĉ → K` with a ReLU between them.
#[derive(Debug, Clone)]
pub struct PreClassifier {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PreClassifier {
    pub fn zeros(channels: usize, classes: usize) -> Self {
        PreClassifier {
            w1: Tensor::zeros(&[channels, channels, 1, 1]).as_param(),
            b1: Tensor::zeros(&[channels]).as_param(),
            w2: Tensor::zeros(&[classes, channels, 1, 1]).as_param(),
            b2: Tensor::zeros(&[classes]).as_param(),
        }
    }

    pub fn init(channels: usize, classes: usize, rng: &mut impl Rng) -> Self {
        PreClassifier {
            w1: he_normal(&[channels, channels, 1, 1], rng),
            b1: Tensor::zeros(&[channels]).as_param(),
            w2: he_normal(&[classes, channels, 1, 1], rng),
            b2: Tensor::zeros(&[classes]).as_param(),
        }
    }

    pub fn forward(&self, r: &Tensor) -> Result<Tensor> {
        let one = Conv2dSpec::new(1, 0);
        r.conv2d(&self.w1, Some(&self.b1), one)?
            .relu()
            .conv2d(&self.w2, Some(&self.b2), one)
    }
}

/// Normal initialisation scaled by `sqrt(2 / fan_in)`; fan-in is the product
/// of every axis but the first.
pub fn he_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::param(shape, data).expect("non-empty shape")
}

pub fn preclassify(r: &Tensor, head: &PreClassifier) -> Result<Tensor> {
    head.forward(r)
}

fn feature_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(format!(
            "{what} must be C×H×W, got {:?}",
            t.shape()
        ))),
    }
}

/// Spatially normalised class weights times pixel tokens: `softmax(D, pixels) · R`.
/// `tokens` is `n×Ĉ`, `logits` is `K×n`; the result is the `K×Ĉ` center table.
pub fn centers_from_tokens(tokens: &Tensor, logits: &Tensor) -> Result<Tensor> {
    logits.softmax(1)?.matmul(tokens)
}

/// Length-`n` pixel tokens `n×C` of a `C×H×W` map, for the given flat pixel indices.
pub fn gather_tokens(x: &Tensor, pixels: &[usize]) -> Result<Tensor> {
    let (c, h, w) = feature_dims(x, "feature map")?;
    let hw = h * w;
    let idx = pixels
        .iter()
        .flat_map(|&p| (0..c).map(move |ch| ch * hw + p))
        .collect();
    x.gather(idx, &[pixels.len(), c])
}

/// Channel-major `C×n` slice of a `C×H×W` map at the given flat pixel indices.
pub fn gather_channels(x: &Tensor, pixels: &[usize]) -> Result<Tensor> {
    let (c, h, w) = feature_dims(x, "feature map")?;
    let hw = h * w;
    let idx = (0..c)
        .flat_map(|ch| pixels.iter().map(move |&p| ch * hw + p))
        .collect();
    x.gather(idx, &[c, pixels.len()])
}

/// Global center table `K×Ĉ` of features `r` (`Ĉ×H×W`) under logits `d` (`K×H×W`).
pub fn class_centers(r: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (_, h, w) = feature_dims(r, "features")?;
    let (_, dh, dw) = feature_dims(d, "logits")?;
    if (h, w) != (dh, dw) {
        return Err(Error::dim(format!(
            "features are {h}×{w} but logits are {dh}×{dw}"
        )));
    }
    let all: Vec<usize> = (0..h * w).collect();
    centers_from_tokens(&gather_tokens(r, &all)?, &gather_channels(d, &all)?)
}

/// Rows of `centers` picked by `labels`, as `n×Ĉ` tokens.
pub fn scatter_tokens(centers: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let &[k, c] = centers.shape() else {
        return Err(Error::dim(format!(
            "center table must be K×C, got {:?}",
            centers.shape()
        )));
    };
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::dim(format!(
            "label {l} out of range for {k} centers"
        )));
    }
    let idx = labels
        .iter()
        .flat_map(|&l| (0..c).map(move |ch| l * c + ch))
        .collect();
    centers.gather(idx, &[labels.len(), c])
}

/// Places each pixel's class center at that pixel: output `Ĉ×H×W`.
pub fn scatter(centers: &Tensor, mask: &ArgmaxMask) -> Result<Tensor> {
    let &[k, c] = centers.shape() else {
        return Err(Error::dim(format!(
            "center table must be K×C, got {:?}",
            centers.shape()
        )));
    };
    mask.check_classes(k)?;
    let labels = mask.labels();
    let idx = (0..c)
        .flat_map(|ch| labels.iter().map(move |&l| l * c + ch))
        .collect();
    centers.gather(idx, &[c, mask.height(), mask.width()])
}

/// Block tiling of an `H×W` grid. Starts advance by the block extent; when the
/// extent does not divide the map, the final block is pulled back to end at the
/// border and overlaps its neighbour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    height: usize,
    width: usize,
    block_h: usize,
    block_w: usize,
    row_starts: Vec<usize>,
    col_starts: Vec<usize>,
}

fn starts(extent: usize, block: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..extent / block).map(|i| i * block).collect();
    if extent % block != 0 {
        s.push(extent - block);
    }
    s
}

impl BlockLayout {
    pub fn new(height: usize, width: usize, block_h: usize, block_w: usize) -> Result<Self> {
        if block_h == 0 || block_w == 0 || block_h > height || block_w > width {
            return Err(Error::config(format!(
                "block {block_h}×{block_w} does not fit a {height}×{width} map"
            )));
        }
        Ok(BlockLayout {
            height,
            width,
            block_h,
            block_w,
            row_starts: starts(height, block_h),
            col_starts: starts(width, block_w),
        })
    }

    pub fn map_extents(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn block_extents(&self) -> (usize, usize) {
        (self.block_h, self.block_w)
    }

    pub fn row_starts(&self) -> &[usize] {
        &self.row_starts
    }

    pub fn col_starts(&self) -> &[usize] {
        &self.col_starts
    }

    /// `(N_h, N_w)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.row_starts.len(), self.col_starts.len())
    }

    pub fn len(&self) -> usize {
        self.row_starts.len() * self.col_starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens_per_block(&self) -> usize {
        self.block_h * self.block_w
    }

    /// Top-left `(y0, x0)` of every block, row-major over the grid.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_starts
            .iter()
            .flat_map(move |&y| self.col_starts.iter().map(move |&x| (y, x)))
    }

    /// Flat pixel indices `y·W + x` of one block, row-major inside the block.
    pub fn pixels(&self, origin: (usize, usize)) -> Vec<usize> {
        let (y0, x0) = origin;
        (y0..y0 + self.block_h)
            .flat_map(|y| (x0..x0 + self.block_w).map(move |x| y * self.width + x))
            .collect()
    }

    /// How many blocks cover each pixel.
    pub fn coverage(&self) -> Vec<usize> {
        let mut count = vec![0; self.height * self.width];
        for o in self.origins() {
            for p in self.pixels(o) {
                count[p] += 1;
            }
        }
        count
    }
}

/// Cuts a `C×H×W` map into `C×h×w` blocks following [`BlockLayout`].
pub fn split_blocks(x: &Tensor, h: usize, w: usize) -> Result<(Vec<Tensor>, BlockLayout)> {
    let (c, height, width) = feature_dims(x, "feature map")?;
    let layout = BlockLayout::new(height, width, h, w)?;
    let blocks = layout
        .origins()
        .map(|o| gather_channels(x, &layout.pixels(o))?.reshape(&[c, h, w]))
        .collect::<Result<Vec<_>>>()?;
    Ok((blocks, layout))
}

/// Writes blocks back by offset; pixels covered more than once take the mean.
pub fn merge_blocks(blocks: &[Tensor], layout: &BlockLayout) -> Result<Tensor> {
    if blocks.len() != layout.len() {
        return Err(Error::dim(format!(
            "{} blocks for a layout of {}",
            blocks.len(),
            layout.len()
        )));
    }
    let (bh, bw) = layout.block_extents();
    let c = blocks.first().map(|b| b.shape()[0]).unwrap_or(0);
    for b in blocks {
        if b.shape() != [c, bh, bw] {
            return Err(Error::dim(format!(
                "block of shape {:?} in a layout of {c}×{bh}×{bw} blocks",
                b.shape()
            )));
        }
    }
    let (height, width) = layout.map_extents();
    let hw = height * width;
    let mut idx = Vec::with_capacity(blocks.len() * c * bh * bw);
    for o in layout.origins() {
        let pixels = layout.pixels(o);
        idx.extend((0..c).flat_map(|ch| pixels.iter().map(move |&p| ch * hw + p)));
    }
    let summed = Tensor::concat(blocks)?.scatter_add(idx, &[c * hw])?;
    average_overlaps(summed, layout, c)
}

/// Same as [`merge_blocks`] for `n×C` token blocks.
pub fn merge_token_blocks(blocks: &[Tensor], layout: &BlockLayout) -> Result<Tensor> {
    if blocks.len() != layout.len() {
        return Err(Error::dim(format!(
            "{} blocks for a layout of {}",
            blocks.len(),
            layout.len()
        )));
    }
    let n = layout.tokens_per_block();
    let c = blocks.first().map(|b| b.shape()[1]).unwrap_or(0);
    for b in blocks {
        if b.shape() != [n, c] {
            return Err(Error::dim(format!(
                "token block of shape {:?}, expected [{n}, {c}]",
                b.shape()
            )));
        }
    }
    let (height, width) = layout.map_extents();
    let hw = height * width;
    let mut idx = Vec::with_capacity(blocks.len() * n * c);
    for o in layout.origins() {
        for p in layout.pixels(o) {
            idx.extend((0..c).map(|ch| ch * hw + p));
        }
    }
    let summed = Tensor::concat(blocks)?.scatter_add(idx, &[c * hw])?;
    average_overlaps(summed, layout, c)
}

fn average_overlaps(summed: Tensor, layout: &BlockLayout, c: usize) -> Result<Tensor> {
    let (height, width) = layout.map_extents();
    let coverage = layout.coverage();
    let out = if coverage.iter().all(|&n| n == 1) {
        summed
    } else {
        let inv: Vec<f64> = (0..c)
            .flat_map(|_| coverage.iter().map(|&n| 1.0 / n as f64))
            .collect();
        summed.mul(&Tensor::new(&[c * height * width], inv)?)?
    };
    out.reshape(&[c, height, width])
}

/// Labels in `mask` present anywhere in `pixels`.
fn present_classes(labels: &[usize], k: usize) -> Vec<bool> {
    let mut present = vec![false; k];
    for &l in labels {
        present[l] = true;
    }
    present
}

/// Local center table of a block: absent classes fall back to the global row.
pub fn local_center_table(
    tokens: &Tensor,
    logits: &Tensor,
    labels: &[usize],
    global: Option<&Tensor>,
) -> Result<Tensor> {
    let local = centers_from_tokens(tokens, logits)?;
    let Some(global) = global else {
        return Ok(local);
    };
    if global.shape() != local.shape() {
        return Err(Error::dim(format!(
            "global centers {:?} vs local {:?}",
            global.shape(),
            local.shape()
        )));
    }
    let (k, c) = (local.shape()[0], local.shape()[1]);
    let present = present_classes(labels, k);
    if present.iter().all(|&p| p) {
        return Ok(local);
    }
    let idx = (0..k)
        .flat_map(|row| {
            let base = if present[row] { row * c } else { (k + row) * c };
            (0..c).map(move |ch| base + ch)
        })
        .collect();
    Tensor::concat(&[local, global.clone()])?.gather(idx, &[k, c])
}

/// Local semantic masks: centers and scatter computed independently inside
/// each `Ĉ×h×w` block with its `K×h×w` logits.
pub fn smg_local(
    r_blocks: &[Tensor],
    d_blocks: &[Tensor],
    global: Option<&Tensor>,
) -> Result<Vec<Tensor>> {
    if r_blocks.len() != d_blocks.len() {
        return Err(Error::dim(format!(
            "{} feature blocks but {} logit blocks",
            r_blocks.len(),
            d_blocks.len()
        )));
    }
    r_blocks
        .iter()
        .zip(d_blocks)
        .map(|(r, d)| {
            let (_, h, w) = feature_dims(r, "feature block")?;
            let (_, dh, dw) = feature_dims(d, "logit block")?;
            if (h, w) != (dh, dw) {
                return Err(Error::dim(format!(
                    "feature block {h}×{w} vs logit block {dh}×{dw}"
                )));
            }
            let mask = argmax(d)?;
            let all: Vec<usize> = (0..h * w).collect();
            let table = local_center_table(
                &gather_tokens(r, &all)?,
                &gather_channels(d, &all)?,
                mask.labels(),
                global,
            )?;
            scatter(&table, &mask)
        })
        .collect()
}

/// Everything the attention stage consumes, as `n×Ĉ` token blocks.
#[derive(Debug, Clone)]
pub struct SemanticMasks {
    pub mask: ArgmaxMask,
    pub global_centers: Tensor,
    /// `R_l`: raw feature tokens of each block.
    pub features: Vec<Tensor>,
    /// `S_l`: local centers scattered inside each block.
    pub local: Vec<Tensor>,
    /// `S_g`: global centers scattered, then split into blocks.
    pub global: Vec<Tensor>,
}

/// Global and local semantic masks of features `r` under logits `d`.
pub fn semantic_masks(r: &Tensor, d: &Tensor, layout: &BlockLayout) -> Result<SemanticMasks> {
    let (_, h, w) = feature_dims(r, "features")?;
    if layout.map_extents() != (h, w) {
        return Err(Error::dim(format!(
            "layout covers {:?}, features are {h}×{w}",
            layout.map_extents()
        )));
    }
    let mask = argmax(d)?;
    let global_centers = class_centers(r, d)?;
    let mut features = Vec::with_capacity(layout.len());
    let mut local = Vec::with_capacity(layout.len());
    let mut global = Vec::with_capacity(layout.len());
    for origin in layout.origins() {
        let pixels = layout.pixels(origin);
        let labels: Vec<usize> = pixels.iter().map(|&p| mask.labels()[p]).collect();
        let tokens = gather_tokens(r, &pixels)?;
        let table = local_center_table(
            &tokens,
            &gather_channels(d, &pixels)?,
            &labels,
            Some(&global_centers),
        )?;
        local.push(scatter_tokens(&table, &labels)?);
        global.push(scatter_tokens(&global_centers, &labels)?);
        features.push(tokens);
    }
    Ok(SemanticMasks {
        mask,
        global_centers,
        features,
        local,
        global,
    })
}
