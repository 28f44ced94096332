//! Save and reload a pruned, slimmed checkpoint.
use effirlab::checkpoint::{self, CheckpointMeta};
use effirlab::encoder::{EncoderConfig, EncoderModel, Group};
use effirlab::slimming::{apply_mask, global_prune, install_gates, shrink, SlimState};

fn main() -> effirlab::Result<()> {
    let mut model = EncoderModel::<f32>::new(EncoderConfig::default(), 0)?;
    model.remove_sublayer(Group::Mlp, 7);
    install_gates(&mut model)?;
    let mask = global_prune(&SlimState::of(&model), 0.3)?;
    apply_mask(&mut model, &mask)?;
    let small = shrink(&model, &mask)?;

    let dir = std::env::temp_dir().join("effirlab-checkpoint-example");
    let _ = std::fs::remove_dir_all(&dir);
    let meta = CheckpointMeta { slim_mask: Some(mask), history: vec!["drop".into(), "slim".into()], ..Default::default() };
    let manifest = checkpoint::save(&small, &meta, &dir)?;
    println!("{} tensors, fingerprint {}", manifest.tensors.len(), &manifest.fingerprint[..16]);

    let (back, _) = checkpoint::load(&dir)?;
    let x = [3, 14, 15, 92, 65];
    assert_eq!(back.encode(&x)?, small.encode(&x)?);
    println!("reloaded {} params from {}", back.count_params(), dir.display());
    Ok(())
}
