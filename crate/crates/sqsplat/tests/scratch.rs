//! Temporary convergence probe (deleted before release).

use sqsplat::dataset::{synth_dataset, SynthScene};
use sqsplat::optimize::{stage1_fit, Stage1Config};
use sqsplat::semantics::OracleProvider;

fn oracle(ds: &sqsplat::dataset::Dataset) -> OracleProvider {
    let masks: std::collections::HashMap<u32, sqsplat::img::LabelImage> = ds
        .views
        .iter()
        .map(|v| (v.id, v.mask.clone().unwrap()))
        .collect();
    OracleProvider::new(masks)
}

#[test]
#[ignore]
fn probe_dumbbell_e2e() {
    let ds = synth_dataset(SynthScene::Dumbbell, 16, 64, 0);
    let provider = oracle(&ds);
    let cfg = Stage1Config {
        total_iters: 2500,
        initial_k: 1,
        subdivision_level: 2,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let with_split = stage1_fit(&ds, Some(&provider), &cfg, 0).unwrap();
    println!("with split: took {:?}", t0.elapsed());
    for e in &with_split.events {
        println!("  event iter {} {} ids {:?}", e.iter, e.event, e.ids);
    }
    let row = with_split.metrics.last().unwrap();
    println!("  final K {} cd {:?}", row.k_active, row.chamfer);

    let cfg_nosplit = Stage1Config {
        enable_split: false,
        ..cfg.clone()
    };
    let t0 = std::time::Instant::now();
    let without = stage1_fit(&ds, Some(&provider), &cfg_nosplit, 0).unwrap();
    println!("without split: took {:?}", t0.elapsed());
    let row2 = without.metrics.last().unwrap();
    println!("  final K {} cd {:?}", row2.k_active, row2.chamfer);
}

#[test]
#[ignore]
fn probe_fusion_e2e() {
    // Three primitives on a single-part scene must fuse down to one.
    let ds = synth_dataset(SynthScene::Ellipsoid, 12, 64, 0);
    let provider = oracle(&ds);
    let cfg = Stage1Config {
        total_iters: 1500,
        initial_k: 3,
        subdivision_level: 2,
        enable_split: false,
        ..Default::default()
    };
    let out = stage1_fit(&ds, Some(&provider), &cfg, 1).unwrap();
    for e in &out.events {
        println!("event iter {} {} ids {:?}", e.iter, e.event, e.ids);
    }
    let row = out.metrics.last().unwrap();
    println!("final K {} cd {:?}", row.k_active, row.chamfer);
}
