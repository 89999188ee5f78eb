use std::time::Instant;

use biometry_nets::{seg_loss, Adam, AdamConfig, Branch, NetConfig, SegTarget, Tensor, UNet};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let (base, side) = (args.first().copied().unwrap_or(8), args.get(1).copied().unwrap_or(128));
    let model = UNet::<f32>::shared(&NetConfig { base_width: base, ..NetConfig::default() }).unwrap();
    let x = Tensor::from_vec(1, side, side, (0..side * side).map(|i| (i as f32 * 0.01).sin()).collect());
    let t = SegTarget::new(side, side, (0..side * side).map(|i| i % side < side / 2).collect(), Branch::Head).unwrap();
    let mut g = model.params.zeros_like();
    let mut model = model;
    let mut opt = Adam::new(AdamConfig::default(), &model.params);
    let n = 10;
    let start = Instant::now();
    for _ in 0..n {
        model.loss_and_grad(&x, 0, &mut g, |y| seg_loss(y, &t)).unwrap();
    }
    opt.update(&mut model.params, &g);
    let dt = start.elapsed().as_secs_f64() / n as f64;
    let s2 = Instant::now();
    for _ in 0..n {
        model.forward(&x, 0).unwrap();
    }
    println!("base {base} side {side}: train {:.1} ms/sample, forward {:.1} ms", dt * 1e3, s2.elapsed().as_secs_f64() / n as f64 * 1e3);
}
