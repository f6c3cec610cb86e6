//! GPTQ against round-to-nearest on one layer with correlated inputs.
//! Proxy loss is the Hessian-weighted reconstruction error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rqat::linalg::Matrix;
use rqat::ptq::{gptq, proxy_loss, rtn, GptqOptions, HessianAccumulator};
use rqat::quant::{QuantSpec, Scheme};

fn main() -> rqat::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (rows, cols, n) = (32, 64, 512);
    let w = Matrix { rows, cols, data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    // inputs with a shared latent factor so columns correlate
    let mut x = Matrix::zeros(n, cols);
    for r in 0..n {
        let f: f64 = rng.gen_range(-1.0..1.0);
        for c in 0..cols {
            x.data[r * cols + c] = f + 0.3 * rng.gen_range(-1.0..1.0);
        }
    }
    let mut acc = HessianAccumulator::new(cols);
    acc.accumulate(&x)?;
    let h = acc.damped_hessian(0.01)?;
    for bits in [2, 3, 4] {
        let spec = QuantSpec::grouped(bits, 16, Scheme::Asymmetric)?;
        let r = rtn(&w, &spec)?;
        let g = gptq(&w, &acc, &spec, &GptqOptions::default())?;
        println!("W{bits}G16  rtn {:>9.3}  gptq {:>9.3}", proxy_loss(&w, &r.latent, &h), g.proxy_loss);
    }
    Ok(())
}
