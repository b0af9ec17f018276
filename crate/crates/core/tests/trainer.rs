mod common;

use nar_core::checkpoint;
use nar_core::model::Nar;
use nar_core::trainer::{train, TrainConfig, Trainer};

fn setup(n: usize) -> (nar_core::bench_data::SyntheticSpace, Vec<nar_core::encoding::ArchitectureRecord>) {
    let s = common::small_space();
    let records = s.space().records().iter().step_by(7).take(n).cloned().collect();
    (s, records)
}

fn config(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        epochs,
        warmup: 5,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_identical_runs() {
    let (s, records) = setup(60);
    let layout = s.spec.layout();
    let run = || {
        let model = Nar::new(common::small_model_config(&layout), 1).unwrap();
        train(model, config(2, 16), layout, &records).unwrap()
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(a.buckets, b.buckets);
    assert_eq!(checkpoint::to_bytes(&a).unwrap(), checkpoint::to_bytes(&b).unwrap());
}

#[test]
fn initial_loss_with_zero_heads() {
    let (s, records) = setup(40);
    let layout = s.spec.layout();
    let mut model = Nar::new(common::small_model_config(&layout), 0).unwrap();
    model.zero_params(&["score.w2", "prob.w2"]);
    let trainer = Trainer::new(model, config(1, 32), layout, &records).unwrap();
    let batch: Vec<usize> = (0..32).collect();
    let mut acc: Vec<f64> = batch.iter().map(|&i| records[i].test_accuracy().unwrap()).collect();
    acc.sort_by(f64::total_cmp);
    acc.dedup();
    assert_eq!(acc.len(), 32, "batch accuracies must be distinct");
    let loss = trainer.batch_loss(&batch).unwrap();
    assert!((loss.l2 - 5f64.ln()).abs() < 1e-6, "{}", loss.l2);
    let pairs = (32 * 31 / 2) as f64;
    assert!((loss.l1 - pairs * 2f64.ln()).abs() < 1e-9 * pairs, "{}", loss.l1);
    assert!((loss.total - (loss.l2 + loss.l1)).abs() < 1e-9);
}

#[test]
fn one_iteration_logs_one_histogram_per_tier() {
    let (s, records) = setup(10);
    let layout = s.spec.layout();
    let model = Nar::new(common::small_model_config(&layout), 0).unwrap();
    let mut trainer = Trainer::new(model, config(1, 10), layout, &records).unwrap();
    let entry = trainer.step(&(0..10).collect::<Vec<_>>()).unwrap();
    assert_eq!(entry.iteration, 1);
    assert_eq!(entry.tier_counts, vec![2; 5]);
    for b in trainer.buckets() {
        assert_eq!((b.flops_log.len(), b.params_log.len()), (1, 1));
        assert_eq!(b.flops_log[0].members, 2);
        assert_eq!(b.flops_log[0].batch_size, 10);
        assert!(!b.op_counts.is_empty());
    }
}

#[test]
fn training_loss_decreases() {
    let (s, records) = setup(128);
    let layout = s.spec.layout();
    let model = Nar::new(common::small_model_config(&layout), 3).unwrap();
    let (_, log) = train(model, config(12, 32), layout, &records).unwrap();
    let mean = |epoch: usize| {
        let v: Vec<f64> = log.iter().filter(|e| e.epoch == epoch).map(|e| e.total).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(11) < mean(0), "first {} last {}", mean(0), mean(11));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (s, records) = setup(40);
    let layout = s.spec.layout();
    let model = Nar::new(common::small_model_config(&layout), 5).unwrap();
    let (ranker, _) = train(model, config(1, 20), layout, &records).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&ranker, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.buckets, ranker.buckets);
    assert_eq!(back.stats, ranker.stats);
    let probe: Vec<_> = s.space().records().iter().take(30).collect();
    let (p, q) = (ranker.predict(&probe).unwrap(), back.predict(&probe).unwrap());
    assert_eq!(p.scores, q.scores);
    assert_eq!(p.probs, q.probs);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(checkpoint::from_bytes(&bytes).is_err());
    assert!(checkpoint::from_bytes(&std::fs::read(&path).unwrap()[..100]).is_err());
}

#[test]
fn undersized_batch_rejected() {
    let (s, records) = setup(20);
    let layout = s.spec.layout();
    let model = Nar::new(common::small_model_config(&layout), 0).unwrap();
    assert!(Trainer::new(model, config(1, 3), layout, &records).is_err());
}
