//! Reverse-mode gradients through a fake-quantized linear layer, checked
//! against a central finite difference.

use rqat::autodiff::{FakeQuantConfig, Tape};
use rqat::quant::{QuantSpec, Scheme};

fn loss(x: &[f64], w: &[f64], spec: QuantSpec) -> rqat::Result<f64> {
    let tape = Tape::new();
    let x = tape.leaf(&[2, 4], x.to_vec())?;
    let w = tape.constant(&[3, 4], w.to_vec())?;
    let y = x.matmul_t(&w.fake_quant(&FakeQuantConfig::dynamic(spec))?)?;
    Ok(y.silu().sum().item())
}

fn main() -> rqat::Result<()> {
    let spec = QuantSpec::grouped(2, 4, Scheme::Asymmetric)?;
    let x = vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.8, 1.1, -0.6];
    let w = vec![0.2, -0.4, 0.9, 0.1, -0.7, 0.3, 0.5, -0.2, 0.6, 0.6, -0.1, 0.4];

    let tape = Tape::new();
    let xt = tape.leaf(&[2, 4], x.clone())?;
    let wt = tape.leaf(&[3, 4], w.clone())?;
    let l = xt.matmul_t(&wt.fake_quant(&FakeQuantConfig::dynamic(spec))?)?.silu().sum();
    l.backward()?;
    let gx = xt.grad().unwrap();
    println!("loss {:.6}, tape holds {} nodes", l.item(), tape.len());
    println!("STE weight grad {:?}", wt.grad().unwrap());

    let h = 1e-6;
    for i in 0..x.len() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += h;
        b[i] -= h;
        let fd = (loss(&a, &w, spec)? - loss(&b, &w, spec)?) / (2.0 * h);
        println!("dL/dx[{i}] analytic {:+.6} numeric {fd:+.6}", gx[i]);
    }
    Ok(())
}
