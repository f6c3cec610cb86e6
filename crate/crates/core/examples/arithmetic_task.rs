//! The synthetic arithmetic task: generation, tokenization, and calibration
//! sets drawn from held-out problems or random tokens.

use rqat::taskgen::{generate, make_calibration, parse_example, ArithTaskConfig, CalibKind};

fn main() -> rqat::Result<()> {
    let cfg = ArithTaskConfig::default();
    let ds = generate(&cfg)?;
    println!("train {} / eval {} / calib {}", ds.train.len(), ds.eval.len(), ds.calib.len());
    for e in &ds.train[..3] {
        println!("{} -> {} (answer {})", e.prompt, e.trace, e.answer);
    }
    let ids = ds.train[0].full_ids();
    println!("token ids {ids:?}");
    assert_eq!(parse_example(&ids).as_ref(), Some(&ds.train[0]));

    for kind in [CalibKind::InDomain, CalibKind::OutOfDomain] {
        let seqs = make_calibration(kind, 512, 0, &cfg, &ds)?;
        let n: usize = seqs.iter().map(Vec::len).sum();
        println!("{kind:?}: {} sequences, {n} tokens", seqs.len());
    }
    Ok(())
}
