use fbnet::harness::checkpoint::{Checkpoint, TrainState};
use fbnet::harness::config::{DataSource, TrainConfig};
use fbnet::harness::dataset::SyntheticSpec;
use fbnet::harness::metrics::{centroid_separation, evaluate, export_representations, representations};
use fbnet::harness::train::{initial_state, train, Data, TrainOutcome};
use fbnet::Error;

fn config(seed: u64, train_per_class: usize, test_per_class: usize) -> TrainConfig {
    let mut cfg = TrainConfig::with_seed(seed);
    cfg.eval_every = 0;
    cfg.data = DataSource::Synthetic(SyntheticSpec {
        train_per_class,
        test_per_class,
        seed,
        ..SyntheticSpec::default()
    });
    cfg
}

/// One epoch at zero learning rate: weights stay at their initial values
/// while batch norm gathers running statistics.
fn untrained(cfg: &TrainConfig) -> (TrainOutcome, Data) {
    let mut cfg = cfg.clone();
    cfg.lr = 0.0;
    cfg.epochs = 1;
    train(&cfg, |_| {}).unwrap()
}

#[test]
fn export_layout_and_determinism() {
    let cfg = config(3, 1, 9);
    let (outcome, data) = untrained(&cfg);
    let mut test = data.test.clone();
    let keep = 100.min(test.len());
    test.pixels.truncate(keep * test.sample_len());
    test.fine.truncate(keep);
    test.coarse.truncate(keep);
    assert_eq!(test.len(), 100);

    let mut state = outcome.state;
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let rows = export_representations(&mut state.net, &test, &a).unwrap();
    export_representations(&mut state.net, &test, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(rows, 400);
    assert_eq!(text.lines().count(), 400);
    assert!(text.lines().all(|l| l.split(',').count() == 68));
    let first: Vec<&str> = text.lines().next().unwrap().split(',').take(4).collect();
    assert_eq!(first, ["0", "1", &test.fine[0].to_string(), &test.coarse[0].to_string()]);
    assert_eq!(text.into_bytes(), std::fs::read(&b).unwrap());
}

#[test]
fn untrained_network_is_at_chance() {
    let cfg = config(5, 2, 40);
    let data = Data::load(&cfg.data).unwrap();
    let mut fresh = initial_state(&cfg, data.network_spec(&cfg).unwrap()).unwrap();
    assert!(matches!(
        evaluate(&mut fresh.net, &data.test, &data.taxonomy),
        Err(Error::Contract(_))
    ));
    let (outcome, data) = untrained(&cfg);
    let mut state = outcome.state;
    let m = evaluate(&mut state.net, &data.test, &data.taxonomy).unwrap();
    let chance = 1.0 / data.taxonomy.fine_count() as f64;
    for &acc in &m.fine_accuracy {
        assert!((acc - chance).abs() < 0.1, "{acc} vs chance {chance}");
    }
}

#[test]
fn training_separates_classes_and_checkpoint_reproduces_metrics() {
    let mut cfg = config(7, 30, 20);
    cfg.net.width = 8;
    cfg.epochs = 3;
    let (outcome, data) = train(&cfg, |_| {}).unwrap();
    let before = representations(&mut untrained(&cfg).0.state.net, &data.test).unwrap();
    let mut state = outcome.state;
    let after = representations(&mut state.net, &data.test).unwrap();
    let sep = |r: &[Vec<f32>]| centroid_separation(r, &data.test.fine);
    let last = after.len() - 1;
    assert!(sep(&after[last]) > sep(&after[0]), "{} !> {}", sep(&after[last]), sep(&after[0]));
    assert!(sep(&after[last]) > sep(&before[last]));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.fbnc");
    state.to_checkpoint().save(&path).unwrap();
    let mut reloaded = TrainState::from_checkpoint(&Checkpoint::load(&path).unwrap(), 0.0, 0.0).unwrap();
    assert_eq!(
        evaluate(&mut state.net, &data.test, &data.taxonomy).unwrap(),
        evaluate(&mut reloaded.net, &data.test, &data.taxonomy).unwrap()
    );
}
