use pctl::autodiff::Tape;
use pctl::classifier::extract_patches;
use pctl::config::{AblationFlags, ModelSettings, TrainConfig};
use pctl::data::{generate_synthetic_pair, HsiCube, SynthParams};
use pctl::model::{Model, ModelState};
use pctl::rng::stream;
use pctl::trainer::{metrics_csv, predict, sample_rows, total_loss, train, StepBatch, ABLATION_VARIANTS};
use pctl::Error;

fn small_pair() -> (HsiCube, HsiCube) {
    let params = SynthParams {
        pixels_per_class: 60,
        ..SynthParams::default()
    };
    let (s, t, _) = generate_synthetic_pair(&params.build().unwrap()).unwrap();
    (s, t)
}

fn settings() -> ModelSettings {
    ModelSettings {
        patch: 3,
        block_channels: vec![2, 3, 2, 2, 3],
        ..ModelSettings::default()
    }
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_recon: 64,
        batch_class: 16,
        train_fraction: 0.2,
        eval_every: 1,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

fn fresh(source: &HsiCube, cfg: &TrainConfig) -> ModelState {
    let model = Model::new(&settings(), source.bands, source.num_classes(), cfg.seed).unwrap();
    ModelState::new(model, cfg.learning_rate)
}

fn run(source: &HsiCube, target: &HsiCube, cfg: &TrainConfig) -> (ModelState, String) {
    let mut state = fresh(source, cfg);
    let report = train(&mut state, source, target, cfg, |_| {}).unwrap();
    (state, metrics_csv(&report.epochs))
}

#[test]
fn training_is_bitwise_reproducible() {
    let (s, t) = small_pair();
    let cfg = config(2);
    let (a, log_a) = run(&s, &t, &cfg);
    let (b, log_b) = run(&s, &t, &cfg);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(log_a, log_b);
    let (c, _) = run(&s, &t, &TrainConfig { seed: 1, ..cfg });
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn target_labels_never_steer_optimization() {
    let (s, t) = small_pair();
    let cfg = config(2);
    let (with, log) = run(&s, &t, &cfg);
    let (without, log_blind) = run(&s, &t.without_labels(), &cfg);
    assert_eq!(with.to_bytes(), without.to_bytes());
    // Only the target accuracy column may differ.
    for (a, b) in log.lines().zip(log_blind.lines()).skip(1) {
        let (a, b): (Vec<&str>, Vec<&str>) = (a.split(',').collect(), b.split(',').collect());
        assert_eq!(a[..7], b[..7]);
        assert_eq!(b[7], "NaN");
    }
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let (s, t) = small_pair();
    let cfg = config(0);
    let mut state = fresh(&s, &cfg);
    let before = state.to_bytes();
    let report = train(&mut state, &s, &t, &cfg, |_| {}).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(state.to_bytes(), before);
}

#[test]
fn logged_total_is_the_weighted_sum_of_its_terms() {
    let (s, t) = small_pair();
    let cfg = TrainConfig {
        alpha: 0.37,
        lambda: 0.21,
        ..config(1)
    };
    let state = fresh(&s, &cfg);
    let mut r = stream(3, "test/batch");
    let labels = s.labels.as_ref().unwrap();
    let centers: Vec<(usize, usize)> = s
        .labeled_indices()
        .into_iter()
        .step_by(97)
        .take(6)
        .map(|i| (i / s.width, i % s.width))
        .collect();
    let batch = StepBatch {
        source: sample_rows(&s, 32, &mut r).unwrap(),
        target: sample_rows(&t, 32, &mut r).unwrap(),
        patches: extract_patches(&s, &centers, 3).unwrap(),
        labels: centers.iter().map(|&(y, x)| labels[y * s.width + x]).collect(),
    };
    let mut tape = Tape::new();
    let bound = state.model.store.bind(&mut tape);
    let terms = total_loss(
        &state.model,
        &mut tape,
        &bound,
        &batch,
        &cfg,
        &mut stream(0, "s"),
        &mut stream(0, "d"),
    )
    .unwrap();
    let v = terms.values(&tape, cfg.lambda, 0).unwrap();
    assert!(v.l2 > 0.0 && v.lh > 0.0 && v.ls > 0.0);
    assert!(v.li > 0.0, "the bound is non-positive, so −λ·I is non-negative");
    let recomposed = v.l2 + cfg.alpha * v.lh + v.li + v.ls;
    assert!((v.total - recomposed).abs() < 1e-10, "{} vs {recomposed}", v.total);
}

#[test]
fn checkpoints_round_trip_predictions_exactly() {
    let (s, t) = small_pair();
    let cfg = config(1);
    let (state, _) = run(&s, &t, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    state.save(&path).unwrap();
    let back = ModelState::load(&path, &settings()).unwrap();
    assert_eq!(back.to_bytes(), state.to_bytes());
    assert_eq!(predict(&back.model, &t).unwrap(), predict(&state.model, &t).unwrap());

    let other = ModelSettings { patch: 5, ..settings() };
    assert!(matches!(
        ModelState::load(&path, &other).unwrap_err(),
        Error::Incompatible(_)
    ));
    let bytes = state.to_bytes();
    assert!(matches!(
        ModelState::from_bytes(&bytes[..bytes.len() - 3], &settings()).unwrap_err(),
        Error::Parse { .. }
    ));
    assert!(matches!(
        ModelState::from_bytes(b"NOPE", &settings()).unwrap_err(),
        Error::Parse { .. }
    ));
}

#[test]
fn classifier_only_leaves_the_reconstruction_path_alone() {
    let (s, t) = small_pair();
    let flags = ABLATION_VARIANTS[0].1;
    assert!(flags.classifier_only);
    let cfg = TrainConfig { flags, ..config(1) };
    let mut state = fresh(&s, &cfg);
    let ids = state.model.reconstruction_param_ids();
    let before: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| state.model.store.get(id).data().to_vec())
        .collect();
    let enc_before = state
        .model
        .store
        .get(state.model.encoder.param_ids()[0])
        .data()
        .to_vec();
    train(&mut state, &s, &t, &cfg, |_| {}).unwrap();
    for (id, b) in ids.iter().zip(&before) {
        assert_eq!(state.model.store.get(*id).data(), &b[..]);
    }
    assert_ne!(
        state.model.store.get(state.model.encoder.param_ids()[0]).data(),
        &enc_before[..]
    );
    assert_eq!(AblationFlags::default(), ABLATION_VARIANTS[4].1);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (s, t) = small_pair();
    let cfg = config(1);
    let mut state = fresh(&s, &cfg);
    assert!(train(&mut state, &s.without_labels(), &t, &cfg, |_| {}).is_err());
    let narrow = HsiCube::new(2, 2, 3, vec![0.0; 12], None).unwrap();
    assert!(matches!(
        train(&mut state, &s, &narrow, &cfg, |_| {}).unwrap_err(),
        Error::Incompatible(_)
    ));
}
