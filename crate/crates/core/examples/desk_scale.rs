//! Runs the lexicon-swap comparison for a list of seeds and prints per-seed BLEU.
//!
//! cargo run --release --example desk_scale -- configs/desk_scale.toml runs/desk 1 2 3

use std::path::PathBuf;

use seqkd::cli::{gen_data, ExperimentConfig};
use seqkd::experiment::run_seed;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [config, root, seeds @ ..] = args.as_slice() else {
        anyhow::bail!("usage: desk_scale CONFIG ROOT SEED...");
    };
    let root = PathBuf::from(root);
    let mut base = ExperimentConfig::resolve(Some(config.as_ref()), &[], &[])?;
    base.data.dir = root.join("data").to_string_lossy().into_owned();
    gen_data(&base)?;
    for s in seeds {
        base.train.seed = s.parse()?;
        let r = run_seed(&base, &root)?;
        println!(
            "seed {}: cbkd {:.2}  multi {:.2}  plain {:.2}  low-confidence mass {:.2} -> {:.2}  ({:.0}s)",
            r.seed,
            r.bleu_cbkd,
            r.bleu_multi,
            r.bleu_plain,
            r.confidence_plain.mass_below(0.5),
            r.confidence_cbkd.mass_below(0.5),
            r.seconds
        );
    }
    Ok(())
}
