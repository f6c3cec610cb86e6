//! Affine quantization of a small weight matrix: per-group parameters, codes,
//! reconstruction error, and the fake-quant forward used during QAT.

use rqat::linalg::Matrix;
use rqat::quant::{compute_params, dequantize, fake_quantize, quantize, quantize_grouped, QuantSpec, Scheme};

fn main() -> rqat::Result<()> {
    let values = [-1.0, 0.4, 2.0];
    for scheme in [Scheme::Symmetric, Scheme::Asymmetric] {
        let spec = QuantSpec::grouped(2, 3, scheme)?;
        let p = compute_params(&values, &spec)?;
        let codes = quantize(&values, &p)?;
        println!("{scheme:?} W2: s={} z={} codes={codes:?} -> {:?}", p.scale, p.zero, dequantize(&codes, &p)?);
    }

    // 4 x 8 weights, groups of 4 along the input axis
    let w = Matrix { rows: 4, cols: 8, data: (0..32).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect() };
    let spec = QuantSpec::grouped(3, 4, Scheme::Asymmetric)?;
    let q = quantize_grouped(&w, &spec)?;
    let err: f64 = w.data.iter().zip(&q.dequantize().data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("W3G4: {} groups, max abs error {err:.4}", q.params.len());

    let (wq, mask, _) = fake_quantize(&w, &spec, None)?;
    println!("fake-quant keeps shape {}x{}; {} of {} weights pass gradient", w.rows, w.cols, mask.iter().filter(|&&m| m).count(), wq.len());
    Ok(())
}
