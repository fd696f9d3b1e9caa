use ccnet::config::RunConfig;
use ccnet::dataset::{write_dataset, DataDir};
use ccnet::run::train_run;
use ccnet_core::synth::{generate, SyntheticSpec, EVAL_SPLIT};
use ccnet_core::train::epoch_means;
use ccnet_core::Ccnet;

/// Desk defaults end to end: default synthetic data, default training
/// config. One run feeds both checks.
#[test]
fn desk_run_halves_loss_and_learns_direction() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), &generate(&SyntheticSpec::default()).unwrap()).unwrap();
    let data = DataDir::load(tmp.path()).unwrap();
    let cfg = RunConfig::default();
    assert_eq!(cfg.train.epochs, 10);
    let out = train_run(&cfg, &data, &tmp.path().join("desk.ckpt"), None).unwrap();

    let means = epoch_means(&out.logs);
    assert_eq!(means.len(), 10);
    let (first, tenth) = (means[0].1, means[9].1);
    assert!(tenth <= 0.5 * first, "epoch 1 {first}, epoch 10 {tenth}");

    // Correction scores of the true caption drop when reference and target
    // trade places.
    let model = Ccnet::new(out.params).unwrap();
    let split = data.split(EVAL_SPLIT).unwrap();
    let mut lowered = 0;
    for q in &split.queries {
        let r = model.embed_images(&[&data.pooled.raws[q.ref_pos]]).unwrap();
        let t = model.embed_images(&[&data.pooled.raws[q.trg_pos]]).unwrap();
        let forward = model.score_query(&r, &q.words, &t).unwrap().correction[0];
        let swapped = model.score_query(&t, &q.words, &r).unwrap().correction[0];
        if swapped < forward {
            lowered += 1;
        }
    }
    let frac = lowered as f64 / split.queries.len() as f64;
    assert!(frac >= 0.9, "swap lowered the correction score on {frac}");
}
