//! Fit a tiny linear model with the tensor library's reverse-mode autodiff
//! and Adam: y = W x + b regressed onto a known affine map.

use crossflow::tensor::{self, adam_update, AdamState, Tensor};

fn main() -> crossflow::Result<()> {
    // ground truth: y = 2x0 - 3x1 + 0.5
    let inputs: Vec<Vec<f32>> = (0..16)
        .map(|i| vec![(i % 4) as f32 / 3.0, (i / 4) as f32 / 3.0])
        .collect();
    let targets: Vec<f32> = inputs.iter().map(|x| 2.0 * x[0] - 3.0 * x[1] + 0.5).collect();

    let w = Tensor::zeros(&[1, 2]);
    let b = Tensor::zeros(&[1]);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    let mut w_state = AdamState::for_param(&w);
    let mut b_state = AdamState::for_param(&b);

    for step in 0..400 {
        let mut total = Tensor::scalar(0.0);
        for (x, &t) in inputs.iter().zip(targets.iter()) {
            let xt = Tensor::from_vec(&[2, 1], x.clone())?;
            let pred = tensor::add_row_broadcast(&tensor::transpose(&tensor::matmul(&w, &xt)?)?, &b)?;
            let diff = tensor::add_scalar(&pred, -t);
            total = tensor::add(&total, &tensor::mul(&diff, &diff)?)?;
        }
        let loss = tensor::scale(&total, 1.0 / inputs.len() as f32);
        loss.backward()?;
        adam_update(&w, &mut w_state, 0.05)?;
        adam_update(&b, &mut b_state, 0.05)?;
        if step % 100 == 0 {
            println!("step {step:>3}  loss {:.6}", loss.item());
        }
    }

    let wv = w.to_vec();
    println!("learned W = [{:.3}, {:.3}]  b = {:.3}", wv[0], wv[1], b.item());
    println!("target  W = [2.000, -3.000]  b = 0.500");

    // gradient check against central finite differences
    let x = Tensor::from_vec(&[2, 1], vec![0.3, -0.7])?;
    let loss_of = |wd: &[f32]| -> f32 {
        let w = Tensor::from_vec(&[1, 2], wd.to_vec()).unwrap();
        tensor::sum(&tensor::matmul(&w, &x).unwrap()).item()
    };
    let probe = Tensor::from_vec(&[1, 2], vec![0.11, -0.42])?;
    probe.set_requires_grad(true);
    tensor::sum(&tensor::matmul(&probe, &x)?).backward()?;
    let grad = probe.grad().unwrap();
    let h = 1e-3;
    for i in 0..2 {
        let mut plus = vec![0.11, -0.42];
        plus[i] += h;
        let mut minus = vec![0.11, -0.42];
        minus[i] -= h;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        println!("dL/dw[{i}]: autodiff {:.5}  finite-diff {:.5}", grad[i], fd);
    }
    Ok(())
}
