//! One seed of the desk-scale transfer experiment at the scaled profile:
//! pretrain on a 4-class pretext set, fine-tune the frozen backbone on a
//! similar 2-class pair, and compare with the same fine-tune from random
//! weights. Usage: `desk_scale [seed]`.

use deeptransfer::data::synthetic::synthesize;
use deeptransfer::data::{Dataset, SyntheticSpec};
use deeptransfer::train::{evaluate, fine_tune_with, network_from_checkpoint, pretrain_with, EpochReport, TrainConfig};
use deeptransfer::{build_backbone, ArchProfile};

/// First `train` images of every class for training, the rest for validation.
fn split(ds: &Dataset, train: usize) -> (Dataset, Dataset) {
    let mut seen = vec![0; ds.num_classes()];
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, item) in ds.items.iter().enumerate() {
        if seen[item.label] < train {
            tr.push(i);
        } else {
            va.push(i);
        }
        seen[item.label] += 1;
    }
    (ds.subset(&tr), ds.subset(&va))
}

fn print(stage: &str) -> impl FnMut(&EpochReport) + '_ {
    move |r| println!("{stage} {}", serde_json::to_string(r).expect("plain data"))
}

fn main() -> deeptransfer::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |a| a.parse().expect("seed is an integer"));
    let profile = ArchProfile::scaled();
    let pretext = synthesize(&SyntheticSpec { classes: 4, per_class: 575, size: [32, 32], similarity: 0.0, first_index: 0 }, seed)?;
    let pair = synthesize(&SyntheticSpec { classes: 2, per_class: 650, size: [32, 32], similarity: 0.8, first_index: 0 }, seed)?;
    let (ptrain, pval) = split(&pretext, 500);
    let (train, val) = split(&pair, 500);

    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let pre_cfg = TrainConfig { lr: Some(3e-4), ..cfg.clone() };
    let pre = pretrain_with(&pre_cfg, &ptrain, &pval, &profile, None, &mut print("pretrain"))?;
    let ft = fine_tune_with(&cfg, &train, &val, &pre.checkpoint, &profile, &mut print("finetune"))?;
    let (net, _) = network_from_checkpoint(&ft.checkpoint)?;
    println!("best fine-tuned checkpoint: val accuracy {:.4}", evaluate(&net, &val)?.accuracy);

    let random = build_backbone(&profile, 1_000_003 + seed)?.to_checkpoint(Default::default());
    let scratch_cfg = TrainConfig { epochs: 5, ..cfg };
    fine_tune_with(&scratch_cfg, &train, &val, &random, &profile, &mut print("scratch"))?;
    Ok(())
}
