use ipagnn_core::corpus::{generate_corpus, CorpusManifest, Example, GenerateOptions, Split};
use ipagnn_models::train::{evaluate, train, train_with_callback};
use ipagnn_models::{Checkpoint, ModelError, ModelKind, ModulationMethod, TrainConfig};

fn config(kind: ModelKind, method: ModulationMethod) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model_kind = kind;
    c.modulation.method = method;
    c.hidden_size = 8;
    c.encoder.embed_dim = 8;
    c.encoder.mlp_dim = 8;
    c.batch_size = 4;
    c.max_steps = 6;
    c.validate_every = 3;
    c
}

fn corpus() -> CorpusManifest {
    generate_corpus(&GenerateOptions::new(3, 120)).unwrap()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut c = config(ModelKind::ExceptionIpaGnn, ModulationMethod::Film);
    c.learning_rate = 0.0;
    let m = corpus();
    let out = train(&c, &m).unwrap();
    let fresh = out.checkpoint.model().unwrap().init_params();
    let mut a = Vec::new();
    let mut b = Vec::new();
    out.final_params.write_text(&mut a).unwrap();
    fresh.write_text(&mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn clipped_norm_never_exceeds_the_limit() {
    let mut c = config(ModelKind::ExceptionIpaGnn, ModulationMethod::None);
    c.clip_norm = 0.5;
    c.learning_rate = 0.3;
    c.max_steps = 20;
    let mut seen = 0;
    train_with_callback(&c, &corpus(), |s| {
        assert!(s.clipped_norm <= 0.5 + 1e-9, "step {}: {}", s.step, s.clipped_norm);
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 20);
}

#[test]
fn single_example_overfits() {
    let m = corpus();
    let e: Example = m.examples.iter().find(|e| e.is_error()).unwrap().clone();
    let one = CorpusManifest {
        examples: vec![Example { split: Split::Train, ..e }],
        seed: None,
    };
    let mut c = config(ModelKind::ExceptionIpaGnn, ModulationMethod::None);
    c.learning_rate = 0.3;
    c.batch_size = 1;
    c.max_steps = 2000;
    c.validate_every = 2000;
    let mut losses = Vec::new();
    train_with_callback(&c, &one, |s| losses.push(s.loss)).unwrap();
    let early: f64 = losses[..100].iter().sum::<f64>() / 100.0;
    let late: f64 = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(late < early, "{early} -> {late}");
    assert!(*losses.last().unwrap() < 0.01, "final loss {}", losses.last().unwrap());
}

#[test]
fn every_model_kind_trains_and_evaluates() {
    let m = corpus();
    for (kind, method) in [
        (ModelKind::IpaGnn, ModulationMethod::None),
        (ModelKind::ExceptionIpaGnn, ModulationMethod::CrossAttention),
        (ModelKind::ExceptionIpaGnn, ModulationMethod::Docstring),
        (ModelKind::Transformer, ModulationMethod::None),
        (ModelKind::Lstm, ModulationMethod::None),
        (ModelKind::MilTransformer, ModulationMethod::Docstring),
    ] {
        let out = train(&config(kind, method), &m).unwrap();
        assert_eq!(out.history.iter().map(|h| h.step).collect::<Vec<_>>(), [3, 6]);
        let bytes = out.checkpoint.to_bytes().unwrap();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        let r = evaluate(&back, &m, Split::Test).unwrap();
        let rows: usize = r.confusion.iter().flatten().sum();
        assert_eq!(rows, m.split(Split::Test).count());
        assert_eq!(r.localization_accuracy.is_some(), kind.localizes(), "{kind}");
    }
}

#[test]
fn description_is_required_by_modulation() {
    let c = config(ModelKind::ExceptionIpaGnn, ModulationMethod::Film);
    let out = train(&c, &corpus()).unwrap();
    let model = out.checkpoint.model().unwrap();
    assert!(matches!(model.prepare("x = 1\n", None), Err(ModelError::MissingDescription(_))));
    assert!(model.prepare("x = 1\n", Some("one integer")).is_ok());
}

#[test]
fn metrics_ignore_evaluation_order() {
    let m = corpus();
    let out = train(&config(ModelKind::ExceptionIpaGnn, ModulationMethod::None), &m).unwrap();
    let a = evaluate(&out.checkpoint, &m, Split::Valid).unwrap();
    let mut rev = m.clone();
    rev.examples.reverse();
    let b = evaluate(&out.checkpoint, &rev, Split::Valid).unwrap();
    assert_eq!(a.confusion, b.confusion);
    assert!((a.weighted_f1 - b.weighted_f1).abs() < 1e-12);
}
