//! Reverse-mode gradients of a small conv net checked against central differences.
//!
//! cargo run --release --example autodiff_gradcheck

use pairlora::autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net(t: &mut Tape<f64>, x: Var, w1: Var, gamma: Var, beta: Var, w2: Var) -> Var {
    let h = t.conv2d_3x3(x, w1, None, 2).unwrap();
    let h = t.layernorm(h, gamma, beta).unwrap();
    let h = t.silu(h);
    let h = t.upsample2x(h).unwrap();
    let y = t.conv2d_3x3(h, w2, None, 1).unwrap();
    let target = t.constant(Tensor::zeros(t.value(y).shape().to_vec()));
    t.mse(y, target).unwrap()
}

fn loss(inputs: &[Tensor<f64>]) -> f64 {
    let mut t = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|x| t.input(x.clone(), false)).collect();
    let l = net(&mut t, v[0], v[1], v[2], v[3], v[4]);
    t.value(l).item()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<Tensor<f64>> = [vec![1, 2, 6, 6], vec![4, 18], vec![4], vec![4], vec![2, 36]]
        .into_iter()
        .map(|s| Tensor::randn(s, &mut rng))
        .collect();

    let mut t = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|x| t.input(x.clone(), true)).collect();
    let l = net(&mut t, v[0], v[1], v[2], v[3], v[4]);
    let grads = t.backward(l).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(v[k]).unwrap();
        for i in 0..x.numel() {
            let mut p = inputs.clone();
            p[k].data_mut()[i] += h;
            let mut m = inputs.clone();
            m[k].data_mut()[i] -= h;
            let numeric = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    println!("loss {:.6}, {} tape nodes", t.value(l).item(), t.len());
    println!("max relative gradient error {worst:.2e}");
}
