//! Synthetic aerial scenes and the on-disk formats for tensors, masks and
//! dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::smg::ArgmaxMask;
use crate::tensor::Tensor;

pub const BACKGROUND: usize = 0;
pub const ROAD: usize = 1;
pub const BUILDING: usize = 2;
pub const CAR: usize = 3;
pub const CLASS_NAMES: [&str; 4] = ["background", "road", "building", "car"];

/// Minimum height and width of a generated scene.
pub const MIN_EXTENT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneMode {
    Rural,
    Urban,
}

impl SceneMode {
    pub fn name(self) -> &'static str {
        match self {
            SceneMode::Rural => "rural",
            SceneMode::Urban => "urban",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub truth: ArgmaxMask,
    pub mode: SceneMode,
}

struct Canvas {
    h: usize,
    w: usize,
    labels: Vec<usize>,
}

impl Canvas {
    fn fill_rect(&mut self, y0: usize, x0: usize, y1: usize, x1: usize, class: usize) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                self.labels[y * self.w + x] = class;
            }
        }
    }

    /// Every pixel of the rectangle grown by `margin` is inside the canvas and `class`.
    fn rect_is(
        &self,
        y0: usize,
        x0: usize,
        y1: usize,
        x1: usize,
        margin: usize,
        class: usize,
    ) -> bool {
        if y0 < margin || x0 < margin || y1 + margin > self.h || x1 + margin > self.w {
            return false;
        }
        (y0 - margin..y1 + margin)
            .all(|y| (x0 - margin..x1 + margin).all(|x| self.labels[y * self.w + x] == class))
    }

    fn distance_to(
        &self,
        y0: usize,
        x0: usize,
        y1: usize,
        x1: usize,
        class: usize,
        within: usize,
    ) -> bool {
        let ya = y0.saturating_sub(within);
        let xa = x0.saturating_sub(within);
        let yb = (y1 + within).min(self.h);
        let xb = (x1 + within).min(self.w);
        (ya..yb).any(|y| (xa..xb).any(|x| self.labels[y * self.w + x] == class))
    }
}

fn draw_road(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let width = rng.gen_range(18..=24);
    let horizontal = rng.gen_bool(0.5);
    // polyline of up to three axis-aligned segments crossing the scene
    let (long, short) = if horizontal { (c.w, c.h) } else { (c.h, c.w) };
    let lane = |rng: &mut ChaCha8Rng| rng.gen_range(0..=short - width);
    let a = lane(rng);
    let turn = rng
        .gen_bool(0.5)
        .then(|| (rng.gen_range(long / 4..3 * long / 4), lane(rng)));
    let mut put = |along0: usize, along1: usize, across: usize| {
        if horizontal {
            c.fill_rect(across, along0, across + width, along1, ROAD);
        } else {
            c.fill_rect(along0, across, along1, across + width, ROAD);
        }
    };
    match turn {
        None => put(0, long, a),
        Some((t, b)) => {
            put(0, t + width, a);
            put(t + width, long, b);
            // connecting segment across at `t`
            let (lo, hi) = (a.min(b), a.max(b) + width);
            if horizontal {
                c.fill_rect(lo, t, hi, t + width, ROAD);
            } else {
                c.fill_rect(t, lo, t + width, hi, ROAD);
            }
        }
    }
}

fn place_cars(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let wanted = rng.gen_range(1..=3);
    let mut placed = 0;
    for _ in 0..200 {
        if placed == wanted {
            break;
        }
        let (mut ch, mut cw) = (rng.gen_range(12..=15), rng.gen_range(16..=22));
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut ch, &mut cw);
        }
        if ch + 2 > c.h || cw + 2 > c.w {
            continue;
        }
        let y0 = rng.gen_range(1..=c.h - ch - 1);
        let x0 = rng.gen_range(1..=c.w - cw - 1);
        if c.rect_is(y0, x0, y0 + ch, x0 + cw, 1, ROAD) {
            c.fill_rect(y0, x0, y0 + ch, x0 + cw, CAR);
            placed += 1;
        }
    }
}

fn place_buildings(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let wanted = rng.gen_range(2..=5);
    let mut placed = 0;
    for _ in 0..300 {
        if placed == wanted {
            break;
        }
        let bh = rng.gen_range(16..=26).min(c.h - 2);
        let bw = rng.gen_range(16..=26).min(c.w - 2);
        let y0 = rng.gen_range(1..=c.h - bh - 1);
        let x0 = rng.gen_range(1..=c.w - bw - 1);
        if c.rect_is(y0, x0, y0 + bh, x0 + bw, 1, BACKGROUND)
            && c.distance_to(y0, x0, y0 + bh, x0 + bw, ROAD, 5)
        {
            c.fill_rect(y0, x0, y0 + bh, x0 + bw, BUILDING);
            placed += 1;
        }
    }
}

fn jitter(base: [f64; 3], rng: &mut ChaCha8Rng, amount: f64) -> [f64; 3] {
    base.map(|v| v + rng.gen_range(-amount..amount))
}

/// Deterministic scene for `(seed, mode, h, w)`.
pub fn generate_scene(seed: u64, mode: SceneMode, h: usize, w: usize) -> Result<SceneSample> {
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::config(format!(
            "scene extents {h}×{w} below the {MIN_EXTENT}×{MIN_EXTENT} minimum"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mode as u64);
    let mut canvas = Canvas {
        h,
        w,
        labels: vec![BACKGROUND; h * w],
    };
    draw_road(&mut canvas, &mut rng);
    if (h * w) >= 48 * 48 && rng.gen_bool(0.5) {
        draw_road(&mut canvas, &mut rng);
    }
    place_cars(&mut canvas, &mut rng);
    if mode == SceneMode::Urban {
        place_buildings(&mut canvas, &mut rng);
    }

    let road = jitter([0.45, 0.45, 0.48], &mut rng, 0.06);
    let building = jitter([0.78, 0.38, 0.30], &mut rng, 0.08);
    let car = jitter([0.20, 0.30, 0.80], &mut rng, 0.08);
    let ground = match mode {
        SceneMode::Urban => jitter([0.60, 0.56, 0.44], &mut rng, 0.06),
        SceneMode::Rural => jitter([0.30, 0.55, 0.22], &mut rng, 0.06),
    };
    let furrow = jitter([0.52, 0.46, 0.28], &mut rng, 0.06);
    let period = rng.gen_range(4..=8);
    let vertical_rows = rng.gen_bool(0.5);

    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let color = match canvas.labels[p] {
                ROAD => road,
                BUILDING => building,
                CAR => car,
                _ => {
                    let phase = if vertical_rows { x } else { y };
                    if mode == SceneMode::Rural && (phase / period) % 2 == 1 {
                        furrow
                    } else {
                        ground
                    }
                }
            };
            for (ch, v) in color.iter().enumerate() {
                let noise: f64 = rng.gen_range(-0.05..0.05);
                data[ch * hw + p] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok(SceneSample {
        image: Tensor::new(&[3, h, w], data)?,
        truth: ArgmaxMask::new(h, w, canvas.labels)?,
        mode,
    })
}

/// Sample `index` of a dataset drawn with `seed`; modes alternate.
pub fn dataset_sample(seed: u64, index: usize, h: usize, w: usize) -> Result<SceneSample> {
    let mode = if index % 2 == 0 {
        SceneMode::Rural
    } else {
        SceneMode::Urban
    };
    let mixed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    generate_scene(mixed, mode, h, w)
}

pub fn generate_dataset(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<SceneSample>> {
    (0..count).map(|i| dataset_sample(seed, i, h, w)).collect()
}

/// One of the eight flips/rotations of the square: optional transpose, then
/// optional vertical and horizontal flips. Transpose needs a square input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_v: bool,
    pub flip_h: bool,
}

impl Dihedral {
    pub fn random(rng: &mut impl Rng, square: bool) -> Self {
        Dihedral {
            transpose: square && rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
            flip_h: rng.gen_bool(0.5),
        }
    }

    /// Source pixel of output pixel `(y, x)` in an `h×w` grid.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> usize {
        let y = if self.flip_v { h - 1 - y } else { y };
        let x = if self.flip_h { w - 1 - x } else { x };
        if self.transpose {
            x * w + y
        } else {
            y * w + x
        }
    }

    fn indices(self, h: usize, w: usize) -> Result<Vec<usize>> {
        if self.transpose && h != w {
            return Err(Error::dim(format!("cannot transpose a {h}×{w} grid")));
        }
        Ok((0..h)
            .flat_map(|y| (0..w).map(move |x| self.source(y, x, h, w)))
            .collect())
    }

    /// Applies the transform to a `C×H×W` image and its mask.
    pub fn apply(self, image: &Tensor, mask: &ArgmaxMask) -> Result<(Tensor, ArgmaxMask)> {
        let (h, w) = (mask.height(), mask.width());
        let &[c, ih, iw] = image.shape() else {
            return Err(Error::dim(format!(
                "expected C×H×W image, got {:?}",
                image.shape()
            )));
        };
        if (ih, iw) != (h, w) {
            return Err(Error::dim(format!("image {ih}×{iw} vs mask {h}×{w}")));
        }
        let idx = self.indices(h, w)?;
        let src = image.data();
        let data = (0..c)
            .flat_map(|ch| idx.iter().map(move |&p| src[ch * h * w + p]))
            .collect();
        let labels = idx.iter().map(|&p| mask.labels()[p]).collect();
        Ok((
            Tensor::new(image.shape(), data)?,
            ArgmaxMask::new(h, w, labels)?,
        ))
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"SCT1";

/// Serialises `t` in the `SCT1` layout.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::dim(format!(
            "rank {} does not fit in one byte",
            t.rank()
        )));
    }
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        let e = u32::try_from(e)
            .map_err(|_| Error::dim(format!("extent {e} does not fit in 32 bits")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses one tensor from the front of `bytes`, returning it and the number of bytes used.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len(), "truncated before end of magic"));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::format(0, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let rank = *bytes
        .get(4)
        .ok_or_else(|| Error::format(4, "missing rank byte"))? as usize;
    let mut off = 5;
    let mut shape = Vec::with_capacity(rank);
    for axis in 0..rank {
        let raw = bytes
            .get(off..off + 4)
            .ok_or_else(|| Error::format(bytes.len(), format!("truncated in extent {axis}")))?;
        let e = u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize;
        if e == 0 {
            return Err(Error::format(off, format!("extent {axis} is zero")));
        }
        shape.push(e);
        off += 4;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(8).map(|b| (n, b)));
    let Some((n, payload)) = count else {
        return Err(Error::format(5, "extents overflow"));
    };
    let Some(body) = off.checked_add(payload).and_then(|end| bytes.get(off..end)) else {
        return Err(Error::format(
            bytes.len(),
            format!("payload truncated: need {payload} bytes after offset {off}"),
        ));
    };
    let mut data = Vec::with_capacity(n);
    for chunk in body.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
    }
    Ok((Tensor::new(&shape, data)?, off + payload))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::format(
            used,
            format!("{} trailing bytes", bytes.len() - used),
        ));
    }
    Ok(t)
}

/// Binary PGM (`P5`) with one byte per pixel holding the class index.
pub fn encode_mask(mask: &ArgmaxMask) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    for &l in mask.labels() {
        let b =
            u8::try_from(l).map_err(|_| Error::Contract(format!("class index {l} exceeds 255")))?;
        out.push(b);
    }
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<ArgmaxMask> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "missing P5 signature"));
    }
    let mut off = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header number
        loop {
            match bytes.get(off) {
                Some(b) if b.is_ascii_whitespace() => off += 1,
                Some(b'#') => {
                    while bytes.get(off).is_some_and(|&b| b != b'\n') {
                        off += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(off, "header truncated")),
            }
        }
        let start = off;
        while bytes.get(off).is_some_and(u8::is_ascii_digit) {
            off += 1;
        }
        if start == off {
            return Err(Error::format(start, format!("expected header field {i}")));
        }
        let text = std::str::from_utf8(&bytes[start..off]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::format(start, format!("header field {text} out of range")))?;
    }
    match bytes.get(off) {
        Some(b) if b.is_ascii_whitespace() => off += 1,
        _ => {
            return Err(Error::format(
                off,
                "expected one whitespace byte after maxval",
            ))
        }
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::format(3, format!("empty image {w}×{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            off - 1,
            format!("maxval {maxval} not in 1..=255"),
        ));
    }
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::format(3, "extents overflow"))?;
    let body = &bytes[off..];
    if body.len() < n {
        return Err(Error::format(
            bytes.len(),
            format!("need {n} pixel bytes, found {}", body.len()),
        ));
    }
    if body.len() > n {
        return Err(Error::format(
            off + n,
            format!("{} trailing bytes", body.len() - n),
        ));
    }
    if let Some(i) = body.iter().position(|&b| b as usize > maxval) {
        return Err(Error::format(
            off + i,
            format!("pixel {} above maxval {maxval}", body[i]),
        ));
    }
    ArgmaxMask::new(h, w, body.iter().map(|&b| b as usize).collect())
}

pub fn write_mask(path: impl AsRef<Path>, mask: &ArgmaxMask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(mask)?).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<ArgmaxMask> {
    let path = path.as_ref();
    decode_mask(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// One `image mask` path pair per line. Relative paths resolve against the
/// manifest's directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = line.split('#').next().unwrap_or("").trim();
        if !content.is_empty() {
            let parts: Vec<&str> = content.split_whitespace().collect();
            let [image, mask] = parts[..] else {
                return Err(Error::format(
                    offset,
                    format!("expected two paths, got {:?}", content),
                ));
            };
            pairs.push((base.join(image), base.join(mask)));
        }
        offset += line.len();
    }
    Ok(pairs)
}

/// Writes every sample as `NNNN.sct` / `NNNN.pgm` plus `manifest.txt` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[SceneSample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let image = format!("{i:04}.sct");
        let mask = format!("{i:04}.pgm");
        write_tensor(dir.join(&image), &s.image)?;
        write_mask(dir.join(&mask), &s.truth)?;
        manifest.push_str(&format!("{image} {mask}\n"));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<(Tensor, ArgmaxMask)>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|(image, mask)| {
            let image_t = read_tensor(&image)?;
            let mask_m = read_mask(&mask)?;
            if image_t.rank() != 3 || image_t.shape()[1..] != [mask_m.height(), mask_m.width()] {
                return Err(Error::dim(format!(
                    "{} has shape {:?}, mask {} is {}×{}",
                    image.display(),
                    image_t.shape(),
                    mask.display(),
                    mask_m.height(),
                    mask_m.width()
                )));
            }
            Ok((image_t, mask_m))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_neighbours(m: &ArgmaxMask, y: usize, x: usize) -> impl Iterator<Item = usize> + '_ {
        let (h, w) = (m.height() as isize, m.width() as isize);
        [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)]
            .into_iter()
            .filter_map(move |(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                (ny >= 0 && nx >= 0 && ny < h && nx < w).then(|| m.get(ny as usize, nx as usize))
            })
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(5, SceneMode::Urban, 64, 64).unwrap();
        let b = generate_scene(5, SceneMode::Urban, 64, 64).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.truth, b.truth);
        let c = generate_scene(5, SceneMode::Rural, 64, 64).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn too_small_is_config_error() {
        assert!(matches!(
            generate_scene(0, SceneMode::Rural, 16, 64),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn values_in_unit_interval() {
        let s = generate_scene(9, SceneMode::Rural, 48, 40).unwrap();
        assert_eq!(s.image.shape(), &[3, 48, 40]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cars_touch_road_and_buildings_only_in_urban() {
        for seed in 0..100 {
            for mode in [SceneMode::Rural, SceneMode::Urban] {
                let s = generate_scene(seed, mode, 64, 64).unwrap();
                let m = &s.truth;
                for y in 0..64 {
                    for x in 0..64 {
                        match m.get(y, x) {
                            CAR => assert!(four_neighbours(m, y, x).all(|c| c == CAR || c == ROAD)),
                            BUILDING => assert_eq!(mode, SceneMode::Urban),
                            _ => {}
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn buildings_sit_near_roads() {
        for seed in 0..50 {
            let s = generate_scene(seed, SceneMode::Urban, 64, 64).unwrap();
            let m = &s.truth;
            for y in 0..64 {
                for x in 0..64 {
                    if m.get(y, x) != BUILDING {
                        continue;
                    }
                    // building sides are at most 26 px and within 5 px of a road
                    let near = (y.saturating_sub(32)..(y + 32).min(64)).any(|yy| {
                        (x.saturating_sub(32)..(x + 32).min(64)).any(|xx| m.get(yy, xx) == ROAD)
                    });
                    assert!(near, "seed {seed} ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn class_coverage_over_many_samples() {
        let mut counts = [0usize; 4];
        let n = 1000;
        for i in 0..n {
            let s = dataset_sample(3, i, 64, 64).unwrap();
            for &l in s.truth.labels() {
                counts[l] += 1;
            }
        }
        let total = (n * 64 * 64) as f64;
        for (k, &c) in counts.iter().enumerate() {
            assert!(
                c as f64 / total >= 0.01,
                "{} covers {}",
                CLASS_NAMES[k],
                c as f64 / total
            );
        }
    }

    #[test]
    fn dihedral_transforms() {
        let img = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = ArgmaxMask::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let t = |transpose, flip_v, flip_h| {
            Dihedral {
                transpose,
                flip_v,
                flip_h,
            }
            .apply(&img, &m)
            .unwrap()
        };
        assert_eq!(t(false, false, false).1, m);
        assert_eq!(t(false, false, true).0.data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(t(false, true, false).1.labels(), &[2, 3, 0, 1]);
        assert_eq!(t(true, false, false).0.data(), &[1.0, 3.0, 2.0, 4.0]);
        // labels follow pixels
        let s = generate_scene(2, SceneMode::Urban, 32, 32).unwrap();
        let (a, b) = Dihedral {
            transpose: true,
            flip_v: true,
            flip_h: false,
        }
        .apply(&s.image, &s.truth)
        .unwrap();
        let mut counts = [[0usize; 4]; 2];
        for (&l, &k) in s.truth.labels().iter().zip(b.labels()) {
            counts[0][l] += 1;
            counts[1][k] += 1;
        }
        assert_eq!(counts[0], counts[1]);
        let mut sorted_a = a.to_vec();
        let mut sorted_s = s.image.to_vec();
        sorted_a.sort_by(f64::total_cmp);
        sorted_s.sort_by(f64::total_cmp);
        assert_eq!(sorted_a, sorted_s);
        let wide = ArgmaxMask::filled(2, 3, 0);
        let r = Dihedral {
            transpose: true,
            ..Default::default()
        }
        .apply(&Tensor::zeros(&[1, 2, 3]), &wide);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn scalar_payload_layout() {
        let bytes = encode_tensor(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(&bytes[..4], b"SCT1");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &[1, 0, 0, 0]);
        assert_eq!(
            &bytes[9..],
            &[0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F]
        );
    }

    #[test]
    fn tensor_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(
            &[2, 3],
            vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, f64::EPSILON],
        )
        .unwrap();
        let p = dir.path().join("t.sct");
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));

        let good = encode_tensor(&t).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_tensor(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        for cut in 0..good.len() {
            assert!(
                matches!(decode_tensor(&good[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
        let mut trailing = good.clone();
        trailing.push(0);
        fs::write(&p, &trailing).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format { .. })));
        let mut zero = good;
        zero[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_tensor(&zero),
            Err(Error::Format { offset: 5, .. })
        ));
        assert!(matches!(
            read_tensor(dir.path().join("none")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mask_byte_layout() {
        let m = ArgmaxMask::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let bytes = encode_mask(&m).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 1, 2, 3]);
        assert_eq!(decode_mask(&bytes).unwrap(), m);
    }

    #[test]
    fn mask_errors() {
        let big = ArgmaxMask::new(1, 1, vec![256]).unwrap();
        assert!(matches!(encode_mask(&big), Err(Error::Contract(_))));
        assert!(matches!(
            decode_mask(b"P6\n1 1\n255\n\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_mask(b"P5\n1 x\n255\n\0"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_mask(b"P5\n2 1\n255\n\0"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_mask(b"P5\n1 1\n300\n\0"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_mask(b"P5\n1 1\n3\n\x05"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_mask(b"P5\n99999999999999999999999 1\n255\n"),
            Err(Error::Format { .. })
        ));
        let commented = decode_mask(b"P5\n# made by hand\n1 2\n255\n\x01\x02").unwrap();
        assert_eq!(commented.labels(), &[1, 2]);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(1, 3, 32, 32).unwrap();
        let manifest = write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.len(), 3);
        for ((img, mask), s) in loaded.iter().zip(&samples) {
            assert_eq!(img.data(), s.image.data());
            assert_eq!(mask, &s.truth);
        }
        fs::write(&manifest, "only_one_path\n").unwrap();
        assert!(matches!(
            read_manifest(&manifest),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            read_manifest(dir.path().join("missing.txt")),
            Err(Error::Io { .. })
        ));
    }
}
