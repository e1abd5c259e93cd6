use lorafit::checkpoint::{adapters_to_bytes, adapters_from_bytes, load_adapters, save_adapters};
use lorafit::data::{generate_fixture, resplit, stratified_split, FixtureSpec, SplitCounts};
use lorafit::eval::{predict, predict_logits};
use lorafit::run::{base_of, read_dataset};
use lorafit::{
    inject_adapters, train, AdapterSpec, Bits, Dataset, Error, ModelConfig, Split, Task, TrainConfig,
    TransformerModel,
};

fn small_config(n_classes: usize) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_layers: 1,
        d_ff: 64,
        max_len: 48,
        n_classes,
        ..ModelConfig::default()
    }
}

fn fixture(task: Task, train: Vec<usize>, valid: Vec<usize>, test: Vec<usize>) -> Dataset {
    let mut spec = FixtureSpec::new(task, SplitCounts { train, valid, test }, 21);
    spec.min_words = 1;
    spec.max_words = 3;
    generate_fixture(&spec).unwrap()
}

#[test]
fn detection_corpus_split_stays_proportional() {
    let mut labels = vec![0usize; 16805];
    labels.extend(vec![1usize; 2214]);
    let fractions = [0.7, 0.15, 0.15];
    let buckets = stratified_split(&labels, &fractions, 17).unwrap();
    for (class, n) in [(0usize, 16805usize), (1, 2214)] {
        for (b, f) in fractions.iter().enumerate() {
            let got = labels
                .iter()
                .zip(&buckets)
                .filter(|(&l, &x)| l == class && x == b)
                .count();
            let want = n as f64 * f;
            assert!((got as f64 - want).abs() <= 1.0, "class {class} bucket {b}: {got} vs {want}");
        }
    }
    assert_eq!(buckets, stratified_split(&labels, &fractions, 17).unwrap());
}

#[test]
fn resplit_keeps_counts_consistent() {
    let d = fixture(Task::Target, vec![40, 30, 10], vec![0, 0, 0], vec![0, 0, 0]);
    let r = resplit(&d, [0.8, 0.1, 0.1], 2).unwrap();
    assert!(r.counts_consistent());
    assert_eq!(r.counts(Split::Train), &[32, 24, 8]);
    assert_eq!(r.counts(Split::Valid), &[4, 3, 1]);
}

#[test]
fn dataset_survives_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let d = fixture(Task::Target, vec![3, 2, 1], vec![1, 1, 1], vec![1, 0, 1]);
    let path = dir.path().join("t.jsonl");
    d.write_jsonl(&path).unwrap();
    assert_eq!(read_dataset(&path, Task::Target).unwrap(), d);
    let dist = d.class_distribution();
    assert_eq!(dist.split(Split::Test).imbalance_ratio, Some(f64::INFINITY));
}

#[test]
fn predictions_do_not_depend_on_batch_size() {
    let d = fixture(Task::Detection, vec![0, 0], vec![0, 0], vec![9, 8]);
    let model = inject_adapters(TransformerModel::<f32>::init(small_config(2)).unwrap(), &AdapterSpec::default())
        .unwrap();
    let test = d.split(Split::Test);
    let one = predict_logits(&model, &test, d.schema(), 1).unwrap();
    let eight = predict_logits(&model, &test, d.schema(), 8).unwrap();
    assert_eq!(one.len(), test.len());
    for (a, b) in one.iter().zip(&eight) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    assert_eq!(
        predict(&model, &test, d.schema(), 1).unwrap(),
        predict(&model, &test, d.schema(), 8).unwrap()
    );
    let wrong = predict(&model, &test, &Task::Target.schema(), 4);
    assert!(matches!(wrong, Err(Error::Config(_))));
}

#[test]
fn trained_adapters_round_trip_onto_a_quantized_base() {
    let dir = tempfile::tempdir().unwrap();
    let d = fixture(Task::Target, vec![6, 6, 6], vec![2, 2, 2], vec![2, 2, 2]);
    let spec = AdapterSpec {
        rank: 4,
        alpha: 8.0,
        ..AdapterSpec::default()
    };
    let mut model = inject_adapters(TransformerModel::<f32>::init(small_config(3)).unwrap(), &spec).unwrap();
    model.quantize_frozen(Bits::Four, 64).unwrap();
    let config = TrainConfig {
        epochs: Some(2),
        batch_size: 6,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &d, &config).unwrap();
    assert_eq!(history.epochs.len(), 2);
    assert!(history.params.trainable < history.params.total);

    let path = dir.path().join("a.lfck");
    save_adapters(&path, &model, &spec).unwrap();
    let (restored, restored_spec) = load_adapters(&path, base_of(&model).unwrap()).unwrap();
    assert_eq!(restored_spec, spec);
    let test = d.split(Split::Test);
    assert_eq!(
        predict_logits(&model, &test, d.schema(), 4).unwrap(),
        predict_logits(&restored, &test, d.schema(), 4).unwrap()
    );
}

#[test]
fn detection_adapters_do_not_fit_a_target_head() {
    let spec = AdapterSpec::default();
    let det = inject_adapters(TransformerModel::<f32>::init(small_config(2)).unwrap(), &spec).unwrap();
    let bytes = adapters_to_bytes(&det, &spec).unwrap();
    let target_base = TransformerModel::<f32>::init(small_config(3)).unwrap();
    match adapters_from_bytes(&bytes, target_base) {
        Err(Error::Mismatch(problems)) => assert!(problems.iter().any(|p| p.contains("head"))),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("mismatched head accepted"),
    }
}

#[test]
fn class_weights_of_one_do_not_change_training() {
    let d = fixture(Task::Detection, vec![8, 4], vec![2, 2], vec![0, 0]);
    let run = |weights: Option<Vec<f64>>| {
        let mut m = inject_adapters(TransformerModel::<f64>::init(small_config(2)).unwrap(), &AdapterSpec::default())
            .unwrap();
        let config = TrainConfig {
            epochs: Some(1),
            batch_size: 4,
            class_weights: weights,
            ..TrainConfig::default()
        };
        train(&mut m, &d, &config).unwrap().step_losses
    };
    assert_eq!(run(None), run(Some(vec![1.0, 1.0])));
    assert_ne!(run(None), run(Some(vec![1.0, 5.0])));
}
