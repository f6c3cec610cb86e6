//! Bit-packs 2-bit codes, then writes and reloads a checkpoint holding a
//! quantized tensor next to a dense one.

use rqat::linalg::Matrix;
use rqat::packing::{load_checkpoint, pack, save_checkpoint, unpack, Checkpoint, TensorData};
use rqat::quant::{quantize_grouped, QuantSpec, Scheme};

fn main() -> rqat::Result<()> {
    let spec = QuantSpec::grouped(2, 16, Scheme::Asymmetric)?;
    let w = Matrix { rows: 8, cols: 32, data: (0..256).map(|i| (i as f64 * 0.37).sin()).collect() };
    let q = quantize_grouped(&w, &spec)?;

    let first: Vec<i32> = q.codes[..16].iter().map(|&c| c as i32).collect();
    let buf = pack(&first, &q.params[0], 2)?;
    println!("16 codes -> {} u32 word(s): {:08x?}", buf.words.len(), buf.words);
    assert_eq!(unpack(&buf, &q.params[0])?, first);

    let mut ck = Checkpoint::new();
    ck.push("layer.w", TensorData::Quantized(q));
    ck.push("layer.gain", TensorData::dense(vec![32], vec![1.0; 32]));
    let path = std::env::temp_dir().join("rqat-pack-example.ckpt");
    save_checkpoint(&path, &ck)?;
    let back = load_checkpoint(&path)?;
    println!("{} bytes on disk, roundtrip equal: {}", std::fs::metadata(&path)?.len(), back == ck);
    println!("{}", serde_json::to_string_pretty(&back.manifest()?)?);
    Ok(())
}
