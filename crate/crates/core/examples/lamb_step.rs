//! Fit a noisy linear model with Lamb and report the per-tensor trust ratios.

use batchsim::nn::{ParamGroup, ParamSet, Tensor};
use batchsim::train::{lamb_step, LambConfig, OptimizerState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (inputs, samples) = (8, 256);
    let truth: Vec<f64> = (0..inputs).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let xs: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + 0.5 + rng.gen_range(-0.01..0.01))
        .collect();

    let mut params = ParamSet::<f64>::default();
    params.push(
        "weight",
        Tensor::from_vec(&[inputs], vec![0.1; inputs]).unwrap(),
        ParamGroup::Default,
    );
    params.push("bias", Tensor::zeros(&[1]), ParamGroup::NoTrust);
    let mut state = OptimizerState::new(&params);
    let cfg = LambConfig {
        weight_decay: 0.0,
        ..LambConfig::default()
    };

    for step in 0..=400 {
        let (w, b) = (params.tensor(0).data().to_vec(), params.tensor(1).data()[0]);
        let mut gw = vec![0.0; inputs];
        let mut gb = 0.0;
        let mut loss = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let r = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b - y;
            loss += r * r / samples as f64;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += 2.0 * r * xi / samples as f64;
            }
            gb += 2.0 * r / samples as f64;
        }
        let grads = vec![
            Tensor::from_vec(&[inputs], gw).unwrap(),
            Tensor::from_vec(&[1], vec![gb]).unwrap(),
        ];
        let stats = lamb_step(&mut params, &grads, &mut state, 0.02, &cfg);
        if step % 50 == 0 {
            println!(
                "step {step:>3}  loss {loss:.6}  trust ratios {:.3?}",
                stats.trust_ratios
            );
        }
    }
    let err: f64 = params
        .tensor(0)
        .data()
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max weight error {err:.4}, bias {:.4}", params.tensor(1).data()[0]);
}
