//! Training objectives: KD against a copy of the student, GRPO advantages,
//! the KL estimator, and GRPO on a two-armed bandit.

use rqat::autodiff::Tape;
use rqat::model::{ModelConfig, TinyDecoder};
use rqat::objectives::{bandit_grpo, group_advantages, kd_loss, kl_estimate, sft_loss, Batch};
use rqat::taskgen::{generate, ArithTaskConfig};

fn main() -> rqat::Result<()> {
    let ds = generate(&ArithTaskConfig { n_train: 8, n_eval: 1, n_calib: 1, ..Default::default() })?;
    let pairs: Vec<_> = ds.train.iter().map(|e| (e.prompt_ids(), e.response_ids())).collect();
    let batch = Batch::from_pairs(&pairs)?;
    let student = TinyDecoder::new(ModelConfig::default(), 1)?;
    let teacher = student.clone();

    let tape = Tape::new();
    let (sft, _) = sft_loss(&student, &tape, &batch)?;
    let tape = Tape::new();
    let (kd, _) = kd_loss(&student, &teacher, &tape, &batch, None, 1.0)?;
    println!("untrained SFT loss {:.4} (ln 40 = {:.4}); KD against itself {:.2e}", sft.item(), 40f64.ln(), kd.item());

    let adv = group_advantages(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0], 1e-4);
    println!("advantages {adv:.3?}");
    println!("KL estimate at log-ratio 0: {}, at 0.5: {:.4}", kl_estimate(0.0), kl_estimate(0.5));

    let p = bandit_grpo(1, 50, 8, 0.1)?;
    println!("bandit P(best arm): {:.3} -> {:.3}", p[0], p[p.len() - 1]);
    Ok(())
}
