use fetap_tensor::{Graph, Tensor};
use std::time::Instant;

fn bench(cin: usize, h: usize, cout: usize, k: usize, stride: usize, reps: usize) {
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(&[cin, h, h], |i| (i as f32).sin()).with_requires_grad(true));
        let w = g.leaf(Tensor::from_fn(&[cout, cin, k, k], |i| (i as f32).cos() * 0.1).with_requires_grad(true));
        let b = g.leaf(Tensor::zeros(&[cout]).with_requires_grad(true));
        let y = g.conv2d(x, w, b, stride, k / 2).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let oh = (h + 2 * (k / 2) - k) / stride + 1;
    let macs = (oh * oh * cout * cin * k * k) as f64;
    println!("conv {cin}->{cout} k{k} s{stride} {h}x{h}: {:.3} ms fwd+bwd, {:.2} GMAC/s (x3)", dt * 1e3, 3.0 * macs / dt / 1e9);
}

fn main() {
    bench(10, 64, 16, 7, 2, 20);
    bench(64, 16, 64, 3, 1, 20);
    bench(32, 16, 64, 3, 1, 20);
    bench(24, 16, 24, 3, 1, 20);
    bench(64, 16, 64, 1, 1, 20);
}
