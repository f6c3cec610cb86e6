//! Builds the default decoder, runs a forward pass and samples a few
//! continuations with the KV-cached sampler.

use rqat::autodiff::Tape;
use rqat::model::{ModelConfig, SamplerConfig, TinyDecoder};
use rqat::taskgen::{detokenize, tokenize};

fn main() -> rqat::Result<()> {
    let model = TinyDecoder::new(ModelConfig::default(), 0)?;
    println!("{} parameters, quantizable layers: {:?}", model.num_parameters(), model.quantizable_layers());

    let prompt = tokenize("&BOS&3+4-2+1=")?;
    let tape = Tape::new();
    let (logits, _) = model.forward(&tape, &prompt, 1, prompt.len(), false)?;
    println!("logits shape {:?}", logits.shape());

    let w = model.inference_weights()?;
    let sampler = SamplerConfig { max_new_tokens: 12, ..Default::default() };
    let samples = model.sample_batch(&w, &[&prompt, &prompt], &sampler, &[1, 2])?;
    for s in samples {
        println!("untrained sample: {:?}", detokenize(&s.ids));
    }
    Ok(())
}
