use indirec_core::data::{leave_one_out, SplitDataset};
use indirec_core::diffusion::{Denoiser, PARAM_PREFIX};
use indirec_core::encoder::{Encoder, SeqBatch};
use indirec_core::numerics::random::seeded;
use indirec_core::numerics::{Adam, AdamConfig, ParamStore, Tape};
use indirec_core::objectives::{rec_loss, score_items, target_columns};
use indirec_core::orchestrator::{make_synthetic, SynthKind, SynthParams, TrainConfig, Trainer};
use indirec_core::Error;
use rand::seq::SliceRandom;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        max_len: 10,
        num_layers: 1,
        num_heads: 2,
        batch_size: 32,
        num_clusters: 4,
        diffusion_steps: 4,
        epochs: 2,
        patience: 5,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn tiny_split(kind: SynthKind) -> SplitDataset {
    let params = SynthParams {
        users: 30,
        max_len: 14,
        ..SynthParams::for_kind(kind)
    };
    leave_one_out(&make_synthetic(kind, params, 1).unwrap().dataset)
}

fn param_values(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store.iter().map(|(n, t)| (n.to_string(), t.values().to_vec())).collect()
}

#[test]
fn same_seed_gives_identical_runs() {
    let split = tiny_split(SynthKind::TwoIntent);
    let run = || {
        let mut t = Trainer::new(&tiny_config(), &split).unwrap();
        t.fit().unwrap();
        (t.history().to_vec(), param_values(&t.model.store))
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.0.len(), 2);
    assert!(a.0.iter().all(|l| l.cl.is_some() && l.diff.is_some()));
}

#[test]
fn zero_weights_match_plain_encoder_training() {
    let split = tiny_split(SynthKind::Cyclic);
    let cfg = TrainConfig {
        gamma: 0.0,
        lambda: 0.0,
        ..tiny_config()
    };
    let mut trainer = Trainer::new(&cfg, &split).unwrap();
    let before = param_values(&trainer.model.store);
    trainer.fit().unwrap();
    assert!(trainer.intent_index().is_none());

    // Independent baseline: encoder plus next-item loss only, same stream.
    let mut rng = seeded(cfg.seed);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, cfg.encoder(split.num_items), &mut rng).unwrap();
    Denoiser::new(&mut ParamStore::new(), cfg.dim, &mut rng).unwrap();
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let subseqs = trainer.subsequences().to_vec();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..subseqs.len()).collect();
        order.shuffle(&mut rng);
        for ids in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[u32]> = ids.iter().map(|&i| &subseqs[i][..subseqs[i].len() - 1]).collect();
            let targets: Vec<u32> = ids.iter().map(|&i| *subseqs[i].last().unwrap()).collect();
            let batch = SeqBatch::new(&inputs, cfg.max_len).unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let rows = enc.item_rows(&mut tape, &p, &batch).unwrap();
            let h0 = enc.add_positions(&mut tape, &p, rows, batch.width, Some(&mut rng)).unwrap();
            let hidden = enc.encode(&mut tape, &p, h0, &batch, Some(&mut rng)).unwrap();
            let h = enc.last(&mut tape, hidden).unwrap();
            let logits = score_items(&mut tape, h, p[enc.item_embeddings()]).unwrap();
            let cols = target_columns(&targets, split.num_items).unwrap();
            let loss = rec_loss(&mut tape, logits, &cols).unwrap();
            let grads = tape.backward(loss).unwrap();
            store.accumulate_grads(&p, &grads).unwrap();
            adam.step(&mut store).unwrap();
            store.zero_grads();
        }
    }

    let after = param_values(&trainer.model.store);
    for ((name, old), (_, new)) in before.iter().zip(&after) {
        if name.starts_with(PARAM_PREFIX) {
            assert_eq!(old, new, "{name} moved");
        }
    }
    let baseline = param_values(&store);
    let encoder_part: Vec<_> = after.into_iter().filter(|(n, _)| !n.starts_with(PARAM_PREFIX)).collect();
    assert_eq!(encoder_part, baseline);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let split = tiny_split(SynthKind::TwoIntent);
    let cfg = TrainConfig {
        epochs: 3,
        ..tiny_config()
    };
    let mut straight = Trainer::new(&cfg, &split).unwrap();
    straight.fit().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(&cfg, &split).unwrap();
    first.run_epoch().unwrap();
    first.save(dir.path()).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(dir.path(), &split).unwrap();
    assert_eq!(resumed.epoch(), 1);
    resumed.fit().unwrap();

    assert_eq!(resumed.history(), straight.history());
    assert_eq!(param_values(&resumed.model.store), param_values(&straight.model.store));
    assert_eq!(
        param_values(&resumed.best_model().unwrap().store),
        param_values(&straight.best_model().unwrap().store)
    );
}

#[test]
fn early_stopping_keeps_best_epoch() {
    let split = tiny_split(SynthKind::TwoIntent);
    let cfg = TrainConfig {
        epochs: 30,
        patience: 2,
        lr: 0.05,
        ..tiny_config()
    };
    let mut t = Trainer::new(&cfg, &split).unwrap();
    t.fit().unwrap();
    let h = t.history();
    assert!(h.len() < 30, "never stopped early");
    assert_eq!(h.len(), t.best_epoch() + cfg.patience);
    let best = h.iter().map(|l| l.valid_ndcg).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(h[t.best_epoch() - 1].valid_ndcg, best);
    assert_eq!(t.best_metric(), best);

    let dir = tempfile::tempdir().unwrap();
    t.save_best(dir.path()).unwrap();
    let loaded = indirec_core::orchestrator::load_model(dir.path()).unwrap();
    assert_eq!(param_values(&loaded.store), param_values(&t.best_model().unwrap().store));
}

#[test]
fn every_parameter_steps_once_per_batch() {
    let split = tiny_split(SynthKind::TwoIntent);
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let mut t = Trainer::new(&cfg, &split).unwrap();
    t.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.save(dir.path()).unwrap();
    let state: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("state.json")).unwrap()).unwrap();
    let batches = t.subsequences().len().div_ceil(cfg.batch_size) as u64;
    let steps = state["adam_steps"].as_array().unwrap();
    assert_eq!(steps.len(), t.model.store.len());
    assert!(steps.iter().all(|s| s.as_u64() == Some(batches)));
}

#[test]
fn divergence_is_reported() {
    let split = tiny_split(SynthKind::Cyclic);
    let cfg = TrainConfig {
        lr: 1e300,
        epochs: 3,
        ..tiny_config()
    };
    let mut t = Trainer::new(&cfg, &split).unwrap();
    let err = t.fit().unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}
