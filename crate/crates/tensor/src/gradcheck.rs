//! Central finite-difference gradient checking in double precision.
//!
//! The checker only ever evaluates the forward pass; analytic gradients come
//! from [`Graph::backward`]. Step size per coordinate is `h = 1e-4·max(1,|x|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest per-input relative error: `max|analytic − numeric| / max(max|numeric|, 1e-8)`.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks `f`, which maps fresh leaves for `inputs` to a scalar loss.
/// `wrt[i]` selects which inputs are differentiated.
pub fn check<F>(inputs: &[Tensor<f64>], wrt: &[bool], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &w)| g.leaf(t.clone().with_requires_grad(w)))
        .collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut per_input = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let analytic = grads.wrt(&g, vars[i]);
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for j in 0..input.numel() {
            let x = input.data()[j];
            let h = 1e-4 * x.abs().max(1.0);
            work[i].data_mut()[j] = x + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((analytic.data()[j] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        per_input.push(worst / scale.max(1e-8));
    }
    Ok(GradCheckReport { per_input })
}

/// Reduces a tensor output to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct direction.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}

/// Uniform tensor in `[lo, hi)` whose entries keep at least `margin` away
/// from zero (keeps finite differences clear of |x| and ReLU kinks).
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, margin: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.gen_range(lo..hi);
        if v.abs() >= margin {
            break v;
        }
    })
}

/// Randomized gradient checks, one named case per primitive.
pub mod suite {
    use rand::Rng;

    use super::{check, random_tensor, weighted_sum, GradCheckReport};
    use crate::error::Result;
    use crate::graph::{Graph, Var};
    use crate::tensor::Tensor;

    type Case = fn(&mut rand_chacha::ChaCha8Rng, u64) -> Result<GradCheckReport>;

    fn wsum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
        weighted_sum(g, out, seed)
    }

    fn conv2d(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..=k / 2);
        let h = rng.gen_range(k..k + 4);
        let w = rng.gen_range(k..k + 4);
        let inputs = [
            random_tensor(&[cin, h, w], -1.0, 1.0, 0.0, rng),
            random_tensor(&[cout, cin, k, k], -1.0, 1.0, 0.0, rng),
            random_tensor(&[cout], -1.0, 1.0, 0.0, rng),
        ];
        check(&inputs, &[true; 3], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            wsum(g, y, seed)
        })
    }

    fn linear(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let (r, din, dout) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let inputs = [
            random_tensor(&[2, r, din], -1.0, 1.0, 0.0, rng),
            random_tensor(&[dout, din], -1.0, 1.0, 0.0, rng),
            random_tensor(&[dout], -1.0, 1.0, 0.0, rng),
        ];
        check(&inputs, &[true; 3], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            wsum(g, y, seed)
        })
    }

    fn relu(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let inputs = [random_tensor(&[rng.gen_range(1..20)], -1.0, 1.0, 1e-2, rng)];
        check(&inputs, &[true], |g, v| {
            let y = g.relu(v[0]);
            wsum(g, y, seed)
        })
    }

    fn sigmoid(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let inputs = [random_tensor(&[rng.gen_range(1..20)], -6.0, 6.0, 0.0, rng)];
        check(&inputs, &[true], |g, v| {
            let y = g.sigmoid(v[0]);
            wsum(g, y, seed)
        })
    }

    fn softmax(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let inputs = [random_tensor(&[rng.gen_range(1..4), rng.gen_range(1..7)], -3.0, 3.0, 0.0, rng)];
        check(&inputs, &[true], |g, v| {
            let y = g.softmax_lastdim(v[0]);
            wsum(g, y, seed)
        })
    }

    fn bilinear(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let (c, h, w, n) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let map = random_tensor(&[c, h, w], -1.0, 1.0, 0.0, rng);
        // Keep points off integer grid lines, where the sampler has kinks.
        let pts = Tensor::from_fn(&[n, 2], |i| loop {
            let extent = if i % 2 == 0 { w } else { h } as f64;
            let v: f64 = rng.gen_range(-1.5..extent + 0.5);
            let frac = v - v.floor();
            if (0.02..0.98).contains(&frac) {
                break v;
            }
        });
        check(&[map, pts], &[true, true], |g, v| {
            let y = g.bilinear_sample(v[0], v[1])?;
            wsum(g, y, seed)
        })
    }

    fn avg_pool2(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let inputs = [random_tensor(&[rng.gen_range(1..3), rng.gen_range(1..6), rng.gen_range(1..6)], -1.0, 1.0, 0.0, rng)];
        check(&inputs, &[true], |g, v| {
            let y = g.avg_pool2(v[0])?;
            wsum(g, y, seed)
        })
    }

    fn upsample(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (th, tw) = (2 * h - rng.gen_range(0..2), 2 * w - rng.gen_range(0..2));
        let inputs = [random_tensor(&[2, h, w], -1.0, 1.0, 0.0, rng)];
        check(&inputs, &[true], |g, v| {
            let y = g.upsample_nearest2(v[0], th, tw)?;
            wsum(g, y, seed)
        })
    }

    fn elementwise(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let inputs = [
            random_tensor(&shape, -1.0, 1.0, 1e-2, rng),
            random_tensor(&shape, -1.0, 1.0, 0.0, rng),
            random_tensor(&[1], -1.0, 1.0, 0.0, rng),
        ];
        check(&inputs, &[true; 3], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let m = g.scale(m, 1.7);
            let m = g.add_scalar(m, -0.3);
            let m = g.scale_by(m, v[2])?;
            let ab = g.abs(v[0]);
            let y = g.add(m, ab)?;
            wsum(g, y, seed)
        })
    }

    fn matmul(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let (b, m, k, n) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let trans = rng.gen_bool(0.5);
        let bshape = if trans { [b, n, k] } else { [b, k, n] };
        let inputs = [random_tensor(&[b, m, k], -1.0, 1.0, 0.0, rng), random_tensor(&bshape, -1.0, 1.0, 0.0, rng)];
        check(&inputs, &[true, true], |g, v| {
            let y = g.matmul(v[0], v[1], trans)?;
            wsum(g, y, seed)
        })
    }

    fn shape_ops(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let (a, b, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let extra = rng.gen_range(1..3);
        let inputs = [random_tensor(&[a, b, c], -1.0, 1.0, 0.0, rng), random_tensor(&[a, extra, c], -1.0, 1.0, 0.0, rng)];
        check(&inputs, &[true, true], |g, v| {
            let cat = g.concat(&[v[0], v[1]], 1)?;
            let p = g.permute(cat, &[2, 0, 1])?;
            let r = g.reshape(p, &[c * a, b + extra])?;
            let n = g.narrow(r, 0, c * a - (c * a) / 2)?;
            let y = wsum(g, n, seed)?;
            let m = g.mean(v[0]);
            let m = g.scale(m, 0.5);
            g.add(y, m)
        })
    }

    fn layer_norm(rng: &mut rand_chacha::ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
        let d = rng.gen_range(2..7);
        let inputs = [
            random_tensor(&[rng.gen_range(1..4), d], -2.0, 2.0, 0.0, rng),
            random_tensor(&[d], 0.5, 1.5, 0.0, rng),
            random_tensor(&[d], -1.0, 1.0, 0.0, rng),
        ];
        check(&inputs, &[true; 3], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            wsum(g, y, seed)
        })
    }

    /// Every differentiable primitive paired with its random-instance generator.
    pub fn cases() -> Vec<(&'static str, Case)> {
        vec![
            ("conv2d", conv2d as Case),
            ("linear", linear),
            ("relu", relu),
            ("sigmoid", sigmoid),
            ("softmax_lastdim", softmax),
            ("bilinear_sample", bilinear),
            ("avg_pool2", avg_pool2),
            ("upsample_nearest2", upsample),
            ("elementwise", elementwise),
            ("matmul", matmul),
            ("shape_ops", shape_ops),
            ("layer_norm", layer_norm),
        ]
    }

    /// Runs `instances` random cases per primitive; returns the worst relative
    /// error for each.
    pub fn run(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
        use rand::SeedableRng;
        let mut out = Vec::new();
        for (i, (name, case)) in cases().into_iter().enumerate() {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 32));
            let mut worst = 0.0f64;
            for k in 0..instances {
                worst = worst.max(case(&mut rng, seed.wrapping_add(k as u64))?.max_rel_error());
            }
            out.push((name, worst));
        }
        Ok(out)
    }
}
