use localsdf::fixtures;
use localsdf::geometry::{normalize_mesh, sample_perturbed, sample_surface, PerturbConfig, TriangleIndex};
use localsdf::nets::{Architecture, ModelConfig};
use localsdf::trainer::{infer_latent, load_state, save_state, train, ModelState, ShapeEntry, TrainConfig};

fn shape(id: &str, mesh: localsdf::geometry::TriangleMesh, n: usize) -> ShapeEntry {
    let (mesh, _) = normalize_mesh(&mesh).unwrap();
    let mut samples = sample_surface(&mesh, n, 1).unwrap();
    let index = TriangleIndex::new(&mesh).unwrap();
    let perturbed = sample_perturbed(&samples, &index, n, &PerturbConfig::default(), 2).unwrap();
    samples.extend(&perturbed);
    ShapeEntry { id: id.into(), mesh, samples }
}

fn tiny(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        decay_epoch: epochs,
        batch_size: 64,
        batches_per_epoch: Some(2),
        ..Default::default()
    }
}

fn fresh(arch: Architecture, shapes: &[ShapeEntry], cfg: &TrainConfig) -> ModelState {
    ModelState::initialize(&ModelConfig::for_architecture(arch), shapes, cfg).unwrap()
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type().unwrap().is_dir() {
            files.extend(dir_bytes(&e.path()).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            files.push((name, std::fs::read(e.path()).unwrap()));
        }
    }
    files.sort();
    files
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let shapes = [shape("s", fixtures::icosphere(1), 400)];
    let cfg = tiny(0);
    let mut state = fresh(Architecture::LgclCheb, &shapes, &cfg);
    let before = state.clone();
    let log = train(&shapes, &mut state, &cfg, &mut |_| {}).unwrap();
    assert!(log.rows.is_empty() && log.epochs.is_empty());
    assert_eq!(state, before);
}

#[test]
fn one_step_moves_every_parameter_group() {
    let shapes = [shape("s", fixtures::dumbbell(1), 400)];
    let cfg = TrainConfig { batches_per_epoch: Some(1), ..tiny(1) };
    let mut state = fresh(Architecture::LgclCheb, &shapes, &cfg);
    let before = state.clone();
    train(&shapes, &mut state, &cfg, &mut |_| {}).unwrap();
    for prefix in ["decoder.", "g2l.", "latent."] {
        let changed = state
            .store
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .any(|(n, e)| &e.value != before.store.get(n).unwrap());
        assert!(changed, "{prefix} parameters did not move");
    }
    assert_eq!(state.epoch, 1);
}

#[test]
fn loss_falls_on_the_sphere() {
    let shapes = [shape("sphere", fixtures::icosphere(2), 1000)];
    let cfg = tiny(50);
    let mut state = fresh(Architecture::Sdf4, &shapes, &cfg);
    let log = train(&shapes, &mut state, &cfg, &mut |_| {}).unwrap();
    assert_eq!(log.epochs.len(), 50);
    let (first, last) = (log.epochs[0].mean.total, log.epochs[49].mean.total);
    assert!(last < first, "{last} ≥ {first}");
}

#[test]
fn learning_rate_halves_after_the_decay_epoch() {
    let shapes = [shape("s", fixtures::icosphere(1), 400)];
    let cfg = TrainConfig { epochs: 251, batches_per_epoch: Some(1), batch_size: 16, ..Default::default() };
    let mut state = fresh(Architecture::Sdf4, &shapes, &cfg);
    state.epoch = 250;
    let log = train(&shapes, &mut state, &cfg, &mut |_| {}).unwrap();
    assert_eq!(log.epochs.len(), 1);
    assert_eq!(log.epochs[0].epoch, 250);
    assert_eq!(log.epochs[0].lr_net, cfg.lr_net * 0.5);
    assert_eq!(log.epochs[0].lr_latent, cfg.lr_latent * 0.5);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let shapes = [shape("a", fixtures::icosphere(1), 400), shape("b", fixtures::dumbbell(1), 400)];
    let cfg = TrainConfig { decay_epoch: 2, ..tiny(4) };
    let mut straight = fresh(Architecture::LgclCheb, &shapes, &cfg);
    train(&shapes, &mut straight, &cfg, &mut |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = fresh(Architecture::LgclCheb, &shapes, &cfg);
    train(&shapes, &mut first, &TrainConfig { epochs: 2, ..cfg.clone() }, &mut |_| {}).unwrap();
    save_state(dir.path(), &first, &cfg, "h", serde_json::Value::Null).unwrap();
    let (mut resumed, manifest) = load_state(dir.path(), Some(&first.model)).unwrap();
    assert_eq!(manifest.epoch, 2);
    train(&shapes, &mut resumed, &cfg, &mut |_| {}).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn save_load_save_is_byte_identical() {
    let shapes = [shape("s", fixtures::multi_limb(1), 400)];
    let cfg = tiny(1);
    let mut state = fresh(Architecture::LgclVc, &shapes, &cfg);
    train(&shapes, &mut state, &cfg, &mut |_| {}).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_state(a.path(), &state, &cfg, "hash", serde_json::json!({"k": 1})).unwrap();
    let (loaded, _) = load_state(a.path(), None).unwrap();
    assert_eq!(loaded, state);
    save_state(b.path(), &loaded, &cfg, "hash", serde_json::json!({"k": 1})).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
}

#[test]
fn loading_with_another_architecture_fails() {
    let shapes = [shape("s", fixtures::icosphere(1), 400)];
    let cfg = tiny(0);
    let state = fresh(Architecture::Sdf4, &shapes, &cfg);
    let dir = tempfile::tempdir().unwrap();
    save_state(dir.path(), &state, &cfg, "h", serde_json::Value::Null).unwrap();
    let err = load_state(dir.path(), Some(&ModelConfig::for_architecture(Architecture::Sdf8))).unwrap_err();
    assert!(err.to_string().contains("architecture mismatch"), "{err}");
    let mut other_radius = ModelConfig::for_architecture(Architecture::Sdf4);
    other_radius.init_radius = 0.25;
    assert!(load_state(dir.path(), Some(&other_radius)).is_err());
}

#[test]
fn inference_freezes_the_network_and_is_deterministic() {
    let shapes = [shape("train", fixtures::dumbbell(1), 400)];
    let cfg = tiny(2);
    let mut state = fresh(Architecture::LgclCheb, &shapes, &cfg);
    train(&shapes, &mut state, &cfg, &mut |_| {}).unwrap();
    let hash = state.network_hash();
    let unseen = shape("test", fixtures::multi_limb(1), 400);
    let (z1, log) = infer_latent(&unseen, &state, &cfg, &mut |_| {}).unwrap();
    let (z2, _) = infer_latent(&unseen, &state, &cfg, &mut |_| {}).unwrap();
    assert_eq!(state.network_hash(), hash);
    assert_eq!(z1, z2);
    assert_eq!(log.rows.len(), 4);
    assert!(state.latent("test").is_none());
}
