//! Encode token sequences, attach LoRA adapters, then merge them back.
use effirlab::encoder::{format_tokens, parse_tokens, EncoderConfig, EncoderModel, Pooling, Proj};
use effirlab::evalbench::similarity;

fn main() -> effirlab::Result<()> {
    let mut model = EncoderModel::<f32>::new(EncoderConfig::default(), 0)?;
    println!("desk model: {} parameters", model.count_params());
    println!("{:#?}", model.breakdown());

    let q = parse_tokens("17 203 44 9")?;
    let d = parse_tokens("5 17 88 203 61 2 44 9 300")?;
    let (eq, ed) = (model.encode(&q)?, model.encode(&d)?);
    println!("query [{}] · doc = {:.4}", format_tokens(&q), similarity(&eq, &ed));

    model.attach_lora(&Proj::ALL, 8, 16.0, 1)?;
    println!("with adapters: {} parameters", model.count_params());
    // B starts at zero, so the adapted model encodes identically
    assert_eq!(model.encode(&q)?, eq);
    model.merge_lora();
    println!("merged: {} parameters, lora left: {}", model.count_params(), model.has_lora());

    let mean = EncoderModel::<f32>::new(EncoderConfig { pooling: Pooling::Mean, ..Default::default() }, 0)?;
    println!("mean pooling · = {:.4}", similarity(&mean.encode(&q)?, &mean.encode(&d)?));
    Ok(())
}
