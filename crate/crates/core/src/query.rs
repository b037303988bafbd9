//! Point queries, correlation pyramids and multi-scale correlation lookups.
//!
//! A correlation vector has `L·(2r+1)²` entries laid out as `(level, dy, dx)`
//! with `dx` fastest. Entry `(ℓ, dy, dx)` is the inner product of the query
//! feature with level `ℓ` bilinearly sampled at `P / (S·2^ℓ) + (dx, dy)`;
//! samples off the map read as zero.

use fetap_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A query as read from a query file: birth time and initial position in
/// full-resolution pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: u64,
    pub t_us: u64,
    pub x: f32,
    pub y: f32,
}

impl QuerySpec {
    pub fn position(&self) -> [f32; 2] {
        [self.x, self.y]
    }
}

/// A query with its content template, sampled once from a frame feature map
/// and never modified afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct PointQuery {
    pub id: u64,
    pub t_birth: u64,
    pub position: [f32; 2],
    pub template: Vec<f32>,
}

pub fn corr_len(levels: usize, radius: usize) -> usize {
    levels * (2 * radius + 1).pow(2)
}

/// Fused map plus its successive 2×2 average poolings.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationPyramid {
    pub levels: Vec<Tensor<f32>>,
}

impl CorrelationPyramid {
    pub fn build(map: &Tensor<f32>, levels: usize) -> Result<Self> {
        let mut g = Graph::no_grad();
        let m = g.constant(map.clone());
        let vars = build_pyramid(&mut g, m, levels)?;
        Ok(Self { levels: vars.into_iter().map(|v| g.value(v).clone()).collect() })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }
}

/// Graph form of the pyramid; level 0 is `map` itself.
pub fn build_pyramid(g: &mut Graph, map: Var, levels: usize) -> Result<Vec<Var>> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let s = g.shape(map).to_vec();
    if s.len() != 3 {
        return Err(Error::Config(format!("pyramid input must be (C, H, W), got {s:?}")));
    }
    let mut out = vec![map];
    let (mut h, mut w) = (s[1], s[2]);
    for l in 1..levels {
        if h == 1 && w == 1 {
            return Err(Error::Config(format!(
                "{levels} pyramid levels are too deep for a {}x{} map (level {l} would repeat a 1x1 cell)",
                s[1], s[2]
            )));
        }
        let prev = out[l - 1];
        out.push(g.avg_pool2(prev)?);
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    Ok(out)
}

/// Sampling positions for one level, `(dy, dx)` row-major around each point.
fn lookup_points(positions: &[[f32; 2]], scale: f32, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let mut pts = Vec::with_capacity(positions.len() * (2 * radius + 1).pow(2) * 2);
    for p in positions {
        let (cx, cy) = (p[0] / scale, p[1] / scale);
        for dy in -r..=r {
            for dx in -r..=r {
                pts.push(cx + dx as f32);
                pts.push(cy + dy as f32);
            }
        }
    }
    pts
}

/// Correlation vectors `[N, L·(2r+1)²]` for features `[N, C]` at full-res
/// `positions`. Differentiable w.r.t. the features and the pyramid; the
/// positions are treated as constants.
pub fn correlate_graph(
    g: &mut Graph,
    features: Var,
    pyramid: &[Var],
    positions: &[[f32; 2]],
    radius: usize,
    stride: usize,
) -> Result<Var> {
    let n = positions.len();
    let fs = g.shape(features).to_vec();
    let c = g.shape(pyramid[0])[0];
    if fs != [n, c] {
        return Err(Error::Config(format!("features {fs:?} for {n} positions and {c} channels")));
    }
    let k = (2 * radius + 1).pow(2);
    let f3 = g.reshape(features, &[n, c, 1])?;
    let mut per_level = Vec::with_capacity(pyramid.len());
    for (l, &level) in pyramid.iter().enumerate() {
        let scale = (stride << l) as f32;
        let pts = g.constant(Tensor::new(vec![n * k, 2], lookup_points(positions, scale, radius))?);
        let sampled = g.bilinear_sample(level, pts)?;
        let sampled = g.reshape(sampled, &[n, k, c])?;
        let dots = g.matmul(sampled, f3, false)?;
        per_level.push(g.reshape(dots, &[n, k])?);
    }
    if per_level.len() == 1 {
        Ok(per_level[0])
    } else {
        Ok(g.concat(&per_level, 1)?)
    }
}

/// Correlation vector of one feature at one position.
pub fn correlate(f: &[f32], pyramid: &CorrelationPyramid, p: [f32; 2], radius: usize, stride: usize) -> Result<Vec<f32>> {
    let mut g = Graph::no_grad();
    let levels: Vec<Var> = pyramid.levels.iter().map(|t| g.constant(t.clone())).collect();
    let fv = g.constant(Tensor::new(vec![1, f.len()], f.to_vec())?);
    let out = correlate_graph(&mut g, fv, &levels, &[p], radius, stride)?;
    Ok(g.value(out).data().to_vec())
}

/// Reference lookup: computes the full inner-product volume of `f` against
/// every cell of every level, then bilinearly reads the window off that
/// scalar volume with zero padding.
pub fn correlate_oracle(f: &[f32], pyramid: &CorrelationPyramid, p: [f32; 2], radius: usize, stride: usize) -> Vec<f32> {
    let r = radius as i64;
    let mut out = Vec::new();
    for (l, level) in pyramid.levels.iter().enumerate() {
        let (c, h, w) = (level.shape()[0], level.shape()[1], level.shape()[2]);
        let map = level.data();
        let mut volume = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                volume[y * w + x] = (0..c).map(|ch| f[ch] as f64 * map[(ch * h + y) * w + x] as f64).sum();
            }
        }
        let cell = |x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0.0
            } else {
                volume[y as usize * w + x as usize]
            }
        };
        let scale = (stride as f64) * 2f64.powi(l as i32);
        for dy in -r..=r {
            for dx in -r..=r {
                let px = p[0] as f64 / scale + dx as f64;
                let py = p[1] as f64 / scale + dy as f64;
                let (x0, y0) = (px.floor(), py.floor());
                let (ax, ay) = (px - x0, py - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v = (1.0 - ax) * (1.0 - ay) * cell(x0, y0)
                    + ax * (1.0 - ay) * cell(x0 + 1, y0)
                    + (1.0 - ax) * ay * cell(x0, y0 + 1)
                    + ax * ay * cell(x0 + 1, y0 + 1);
                out.push(v as f32);
            }
        }
    }
    out
}

/// Templates `[N, C]` sampled from a frame feature map at `positions / S`.
pub fn sample_templates(g: &mut Graph, map: Var, positions: &[[f32; 2]], stride: usize) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Usage("no queries to initialize".into()));
    }
    let s = stride as f32;
    let pts: Vec<f32> = positions.iter().flat_map(|p| [p[0] / s, p[1] / s]).collect();
    let pts = g.constant(Tensor::new(vec![positions.len(), 2], pts)?);
    Ok(g.bilinear_sample(map, pts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_e1(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[c, h, w], |i| if i < h * w { 1.0 } else { 0.0 })
    }

    #[test]
    fn pyramid_extents() {
        let p = CorrelationPyramid::build(&Tensor::zeros(&[2, 45, 60]), 4).unwrap();
        let ext: Vec<_> = p.levels.iter().map(|t| (t.shape()[1], t.shape()[2])).collect();
        assert_eq!(ext, vec![(45, 60), (23, 30), (12, 15), (6, 8)]);
    }

    #[test]
    fn one_level_pyramid_is_the_map() {
        let m = Tensor::from_fn(&[2, 3, 3], |i| i as f32);
        assert_eq!(CorrelationPyramid::build(&m, 1).unwrap().levels, vec![m]);
    }

    #[test]
    fn too_deep_pyramid_is_config_error() {
        assert!(matches!(CorrelationPyramid::build(&Tensor::zeros(&[1, 2, 2]), 3), Err(Error::Config(_))));
    }

    #[test]
    fn unit_vector_against_constant_map() {
        let p = CorrelationPyramid::build(&constant_e1(3, 16, 16), 4).unwrap();
        let v = correlate(&[1.0, 0.0, 0.0], &p, [20.0, 24.0], 3, 4).unwrap();
        assert_eq!(v.len(), 196);
        // level 0 window around (5, 6) is fully inside the 16x16 map
        assert!(v[..49].iter().all(|&x| x == 1.0));
        assert_eq!(v, correlate_oracle(&[1.0, 0.0, 0.0], &p, [20.0, 24.0], 3, 4));
    }

    #[test]
    fn far_outside_is_zero() {
        let p = CorrelationPyramid::build(&constant_e1(3, 8, 8), 2).unwrap();
        let v = correlate(&[1.0, 2.0, 3.0], &p, [-500.0, 900.0], 3, 4).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn self_correlation_center_is_squared_norm() {
        let m = Tensor::from_fn(&[4, 5, 5], |i| ((i * 7 % 11) as f32) * 0.25 - 1.0);
        let mut g = Graph::no_grad();
        let mv = g.constant(m.clone());
        let t = sample_templates(&mut g, mv, &[[8.0, 12.0]], 4).unwrap();
        let f = g.value(t).data().to_vec();
        let p = CorrelationPyramid::build(&m, 1).unwrap();
        let v = correlate(&f, &p, [8.0, 12.0], 1, 4).unwrap();
        let norm2: f32 = f.iter().map(|x| x * x).sum();
        assert!((v[4] - norm2).abs() <= 1e-5 * norm2);
    }

    #[test]
    fn integer_cell_template_is_exact() {
        let m = Tensor::from_fn(&[3, 4, 4], |i| i as f32);
        let mut g = Graph::no_grad();
        let mv = g.constant(m);
        let t = sample_templates(&mut g, mv, &[[8.0, 4.0], [8.0, 4.0]], 4).unwrap();
        // cell (x=2, y=1) → flat index y*4+x = 6 in each channel
        assert_eq!(g.value(t).data(), &[6.0, 22.0, 38.0, 6.0, 22.0, 38.0]);
        assert!(sample_templates(&mut g, mv, &[], 4).is_err());
    }
}
