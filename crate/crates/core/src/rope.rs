//! Two-dimensional rotary position encoding.
//!
//! Channel pair `i` (channels `2i`, `2i+1`) of a token at pixel `(mx, my)` is
//! rotated in its plane by `mx·θx[i] + my·θy[i]`. Because rotations compose
//! additively, the inner product of a rotated query and a rotated key only
//! depends on the offset between their pixels.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{counter, rule, Tensor};

const BASE: f64 = 10000.0;

/// Per-pair base angles for the width (`x`) and height (`y`) directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    d: usize,
    theta_x: Vec<f64>,
    theta_y: Vec<f64>,
}

impl RopeConfig {
    /// `θx[i] = 10000^(-2i/d)` and `θy[i] = 10000^(-(2i+1)/d)` for `i = 0..d/2`.
    pub fn base_angles(d: usize) -> Result<Self> {
        check_even(d)?;
        let df = d as f64;
        let theta_x = (0..d / 2)
            .map(|i| BASE.powf(-((2 * i) as f64) / df))
            .collect();
        let theta_y = (0..d / 2)
            .map(|i| BASE.powf(-((2 * i + 1) as f64) / df))
            .collect();
        Ok(RopeConfig {
            d,
            theta_x,
            theta_y,
        })
    }

    /// Both directions share the width schedule.
    pub fn identical_angles(d: usize) -> Result<Self> {
        let cfg = Self::base_angles(d)?;
        Ok(RopeConfig {
            theta_y: cfg.theta_x.clone(),
            ..cfg
        })
    }

    pub fn with_angles(theta_x: Vec<f64>, theta_y: Vec<f64>) -> Result<Self> {
        if theta_x.len() != theta_y.len() || theta_x.is_empty() {
            return Err(Error::config(format!(
                "angle lists must be non-empty and equally long, got {} and {}",
                theta_x.len(),
                theta_y.len()
            )));
        }
        Ok(RopeConfig {
            d: theta_x.len() * 2,
            theta_x,
            theta_y,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn theta_x(&self) -> &[f64] {
        &self.theta_x
    }

    pub fn theta_y(&self) -> &[f64] {
        &self.theta_y
    }

    fn angle(&self, pair: usize, mx: f64, my: f64) -> f64 {
        mx * self.theta_x[pair] + my * self.theta_y[pair]
    }
}

fn check_even(d: usize) -> Result<()> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::config(format!(
            "rotary channel count must be even and >= 2, got {d}"
        )));
    }
    Ok(())
}

/// Integer pixel coordinates `(mx, my)` of each token, in feature-map units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionGrid {
    coords: Vec<(usize, usize)>,
    width: usize,
    height: usize,
}

impl PositionGrid {
    pub fn new(coords: Vec<(usize, usize)>, width: usize, height: usize) -> Result<Self> {
        if let Some(&(x, y)) = coords.iter().find(|&&(x, y)| x >= width || y >= height) {
            return Err(Error::dim(format!(
                "position ({x}, {y}) outside a {width}×{height} feature map"
            )));
        }
        Ok(PositionGrid {
            coords,
            width,
            height,
        })
    }

    /// Row-major coordinates of an `h×w` window whose top-left pixel is `(x0, y0)`.
    pub fn window(
        x0: usize,
        y0: usize,
        h: usize,
        w: usize,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let coords = (0..h)
            .flat_map(|dy| (0..w).map(move |dx| (x0 + dx, y0 + dy)))
            .collect();
        Self::new(coords, width, height)
    }

    /// Every token at the origin.
    pub fn zeros(n: usize) -> Self {
        PositionGrid {
            coords: vec![(0, 0); n],
            width: 1,
            height: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    /// Same tokens moved by a constant offset inside a larger map.
    pub fn shifted(&self, dx: usize, dy: usize) -> Self {
        PositionGrid {
            coords: self.coords.iter().map(|&(x, y)| (x + dx, y + dy)).collect(),
            width: self.width + dx,
            height: self.height + dy,
        }
    }
}

/// Rotates channel pairs of every token of an `n×d` tensor by its position.
pub fn apply_rope(x: &Tensor, pos: &PositionGrid, cfg: &RopeConfig) -> Result<Tensor> {
    let &[n, d] = x.shape() else {
        return Err(Error::dim(format!(
            "rotary input must be n×d, got {:?}",
            x.shape()
        )));
    };
    if d != cfg.d {
        return Err(Error::dim(format!(
            "rotary input has {d} channels, configuration expects {}",
            cfg.d
        )));
    }
    if pos.len() != n {
        return Err(Error::dim(format!(
            "{} positions for {n} tokens",
            pos.len()
        )));
    }
    let pairs = d / 2;
    let mut cos_sin = Vec::with_capacity(n * pairs);
    for &(mx, my) in pos.coords() {
        for i in 0..pairs {
            let a = cfg.angle(i, mx as f64, my as f64);
            cos_sin.push((a.cos(), a.sin()));
        }
    }
    let cos_sin = Arc::new(cos_sin);
    let out = rotate(x.data(), &cos_sin, pairs, false);
    counter::add((2 * n * d) as u64);
    Ok(Tensor::from_op(
        "rope",
        vec![n, d],
        out,
        vec![x.clone()],
        rule(move |_, _, g| vec![Some(rotate(g, &cos_sin, pairs, true))]),
    ))
}

fn rotate(data: &[f64], cos_sin: &[(f64, f64)], pairs: usize, inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (t, (src, dst)) in data
        .chunks(2 * pairs)
        .zip(out.chunks_mut(2 * pairs))
        .enumerate()
    {
        for i in 0..pairs {
            let (c, s) = cos_sin[t * pairs + i];
            let s = if inverse { -s } else { s };
            let (a, b) = (src[2 * i], src[2 * i + 1]);
            dst[2 * i] = c * a - s * b;
            dst[2 * i + 1] = s * a + c * b;
        }
    }
    out
}

/// Materialises the full `d×d` block-diagonal product `R(θx, mx) · R(θy, my)`.
/// Offsets may be negative, which is what relative-position checks need.
pub fn explicit_rotation_oracle(cfg: &RopeConfig, pos: (i64, i64)) -> Tensor {
    let d = cfg.d;
    let block_diag = |angles: &[f64], m: f64| {
        let mut r = vec![0.0; d * d];
        for (i, &theta) in angles.iter().enumerate() {
            let (s, c) = (m * theta).sin_cos();
            let (a, b) = (2 * i, 2 * i + 1);
            r[a * d + a] = c;
            r[a * d + b] = -s;
            r[b * d + a] = s;
            r[b * d + b] = c;
        }
        r
    };
    let rx = block_diag(&cfg.theta_x, pos.0 as f64);
    let ry = block_diag(&cfg.theta_y, pos.1 as f64);
    let mut r = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            r[i * d + j] = (0..d).map(|k| rx[i * d + k] * ry[k * d + j]).sum();
        }
    }
    Tensor::new(&[d, d], r).expect("d×d matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        (0..d)
            .map(|i| dot(&m.data()[i * d..(i + 1) * d], v))
            .collect()
    }

    #[test]
    fn base_angle_schedules() {
        let c = RopeConfig::base_angles(4).unwrap();
        assert_eq!(c.theta_x()[0], 1.0);
        assert!((c.theta_x()[1] - 0.01).abs() < 1e-15);
        assert!((c.theta_y()[0] - 0.1).abs() < 1e-15);
        assert!((c.theta_y()[1] - 0.001).abs() < 1e-15);
        let c = RopeConfig::base_angles(2).unwrap();
        assert_eq!(c.theta_x(), &[1.0]);
        assert!((c.theta_y()[0] - 0.01).abs() < 1e-15);
        for d in [2, 4, 16, 64] {
            let c = RopeConfig::base_angles(d).unwrap();
            assert_eq!(c.theta_x().len(), d / 2);
            assert!(c.theta_x().iter().zip(c.theta_y()).all(|(a, b)| a != b));
        }
    }

    #[test]
    fn odd_channel_count_rejected() {
        assert!(matches!(RopeConfig::base_angles(3), Err(Error::Config(_))));
        assert!(matches!(RopeConfig::base_angles(0), Err(Error::Config(_))));
    }

    #[test]
    fn origin_is_identity() {
        let cfg = RopeConfig::base_angles(4).unwrap();
        let x = row(&[0.3, -1.2, 2.0, 0.5]);
        let y = apply_rope(&x, &PositionGrid::zeros(1), &cfg).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(
            explicit_rotation_oracle(&cfg, (0, 0)).data(),
            Tensor::eye(4).data()
        );
    }

    #[test]
    fn unit_step_along_width() {
        let cfg = RopeConfig::base_angles(2).unwrap();
        let pos = PositionGrid::new(vec![(1, 0)], 2, 1).unwrap();
        let y = apply_rope(&row(&[1.0, 0.0]), &pos, &cfg).unwrap();
        // explicit 2×2 rotation by 1 rad applied to e0
        let r = [[1f64.cos(), -1f64.sin()], [1f64.sin(), 1f64.cos()]];
        assert!((y.data()[0] - r[0][0]).abs() < 1e-15);
        assert!((y.data()[1] - r[1][0]).abs() < 1e-15);
        assert!((y.data()[0] - 0.540302).abs() < 1e-6 && (y.data()[1] - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn width_mismatch_rejected() {
        let cfg = RopeConfig::base_angles(4).unwrap();
        let err = apply_rope(&row(&[1.0, 2.0]), &PositionGrid::zeros(1), &cfg);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn positions_must_lie_inside_map() {
        assert!(PositionGrid::new(vec![(3, 0)], 3, 3).is_err());
        assert!(PositionGrid::window(1, 1, 2, 2, 3, 3).is_ok());
        assert!(PositionGrid::window(2, 2, 2, 2, 3, 3).is_err());
    }

    #[test]
    fn oracle_matches_basis_vectors() {
        let cfg = RopeConfig::base_angles(4).unwrap();
        let r = explicit_rotation_oracle(&cfg, (1, 1));
        let pos = PositionGrid::new(vec![(1, 1)], 2, 2).unwrap();
        for j in 0..4 {
            let mut e = [0.0; 4];
            e[j] = 1.0;
            let y = apply_rope(&row(&e), &pos, &cfg).unwrap();
            for i in 0..4 {
                assert!((y.data()[i] - r.at(&[i, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_is_orthogonal_with_unit_determinant() {
        let cfg = RopeConfig::base_angles(6).unwrap();
        let r = explicit_rotation_oracle(&cfg, (5, -3));
        let rtr = r.transpose().unwrap().matmul(&r).unwrap();
        for (a, b) in rtr.data().iter().zip(Tensor::eye(6).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // block diagonal: determinant is the product of 2×2 block determinants
        let det: f64 = (0..3)
            .map(|i| {
                let (a, b) = (2 * i, 2 * i + 1);
                r.at(&[a, a]) * r.at(&[b, b]) - r.at(&[a, b]) * r.at(&[b, a])
            })
            .product();
        assert!((det - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relative_offset_identity(
            pairs in 1usize..9,
            seed in proptest::collection::vec(-1.0f64..1.0, 32),
            m in (0usize..40, 0usize..40),
            n in (0usize..40, 0usize..40),
        ) {
            let d = 2 * pairs;
            let cfg = RopeConfig::base_angles(d).unwrap();
            let q = &seed[..d];
            let k = &seed[16..16 + d];
            let rq = apply_rope(&row(q), &PositionGrid::new(vec![m], 40, 40).unwrap(), &cfg).unwrap();
            let rk = apply_rope(&row(k), &PositionGrid::new(vec![n], 40, 40).unwrap(), &cfg).unwrap();
            let offset = (n.0 as i64 - m.0 as i64, n.1 as i64 - m.1 as i64);
            let expected = dot(q, &mat_vec(&explicit_rotation_oracle(&cfg, offset), k));
            prop_assert!((dot(rq.data(), rk.data()) - expected).abs() < 1e-9);
        }

        #[test]
        fn norm_preserved_and_translation_invariant(
            values in proptest::collection::vec(-2.0f64..2.0, 24),
            shift in (0usize..50, 0usize..50),
        ) {
            let cfg = RopeConfig::base_angles(8).unwrap();
            let x = Tensor::new(&[3, 8], values).unwrap();
            let pos = PositionGrid::new(vec![(0, 0), (2, 1), (1, 3)], 4, 4).unwrap();
            let a = apply_rope(&x, &pos, &cfg).unwrap();
            let b = apply_rope(&x, &pos.shifted(shift.0, shift.1), &cfg).unwrap();
            for t in 0..3 {
                let norm = |v: &[f64]| dot(v, v).sqrt();
                prop_assert!((norm(&x.data()[t * 8..][..8]) - norm(&a.data()[t * 8..][..8])).abs() < 1e-12);
            }
            let ga = a.matmul(&a.transpose().unwrap()).unwrap();
            let gb = b.matmul(&b.transpose().unwrap()).unwrap();
            for (u, v) in ga.data().iter().zip(gb.data()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rope_gradient() {
        let cfg = RopeConfig::base_angles(6).unwrap();
        let pos = PositionGrid::window(1, 2, 2, 2, 8, 8).unwrap();
        let x = Tensor::new(&[4, 6], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(&[4, 6], (0..24).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let f = |t: &[Tensor]| {
            let y = apply_rope(&t[0], &pos, &cfg)?;
            Ok(y.mul(&w)?.mul(&y)?.sum())
        };
        let err = grad_check(f, &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
