use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use localsdf::geometry::{load_mesh, read_sample_cache};
use localsdf::nets::{Architecture, ModelConfig};
use localsdf::trainer::{load_state, ModelState, TrainConfig};

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_localsdf"))
            .args(args)
            .env("LOCALSDF_CACHE_DIR", self.path("cache"))
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn preprocess(&self, shape: &str) {
        self.ok(&["preprocess", shape, "--surface-samples", "600", "--perturbed-samples", "600"]);
    }

    fn train(&self, shape: &str, arch: &str, epochs: &str, out: &str) -> String {
        self.ok(&[
            "train", shape, "--out", out, "--arch", arch, "--epochs", epochs, "--batches-per-epoch", "2",
            "--batch-size", "64",
        ])
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn preprocess_writes_requested_counts_and_is_reproducible() {
    let s = Sandbox::new();
    s.preprocess("fixture:icosphere@2");
    let bin = s.path("cache/icosphere.samples.bin");
    let (samples, info) = read_sample_cache(&bin, &s.path("cache/icosphere.samples.json")).unwrap();
    assert_eq!((info.surface_count, info.perturbed_count), (600, 600));
    assert_eq!(samples.len(), 1200);
    for i in samples.surface_indices() {
        assert_eq!(samples.unsigned_distance[i], 0.0);
    }
    assert_eq!(samples.surface_indices().len(), 600);
    let first = std::fs::read(&bin).unwrap();
    s.preprocess("fixture:icosphere@2");
    assert_eq!(std::fs::read(&bin).unwrap(), first);
}

#[test]
fn corrupt_mesh_exits_nonzero_naming_the_file() {
    let s = Sandbox::new();
    std::fs::write(s.path("broken.obj"), "v 0 0 0\nv 1 0 0\nf 1 2 7\n").unwrap();
    let out = s.run(&["preprocess", "fixture:icosphere@1", "broken.obj"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.obj"));
    // the good input is still processed
    assert!(s.path("cache/icosphere.samples.bin").exists());
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let s = Sandbox::new();
    s.preprocess("fixture:dumbbell@1");
    s.train("dumbbell", "lgcl-cheb", "0", "ck");
    let (state, manifest) = load_state(&s.path("ck"), None).unwrap();
    assert_eq!(manifest.epoch, 0);
    let cfg: TrainConfig = serde_json::from_value(manifest.hyperparameters).unwrap();
    let shape = localsdf::trainer::ShapeEntry {
        id: "dumbbell".into(),
        mesh: load_mesh(&s.path("cache/dumbbell.mesh.ply")).unwrap(),
        samples: read_sample_cache(&s.path("cache/dumbbell.samples.bin"), &s.path("cache/dumbbell.samples.json"))
            .unwrap()
            .0,
    };
    let fresh = ModelState::initialize(&ModelConfig::for_architecture(Architecture::LgclCheb), &[shape], &cfg).unwrap();
    assert_eq!(state, fresh);
}

#[test]
fn parameter_counts_are_logged() {
    let s = Sandbox::new();
    s.preprocess("fixture:icosphere@1");
    assert!(s.train("icosphere", "sdf4", "0", "a").contains("net params 41857"));
    assert!(s.train("icosphere", "lgcl-cheb", "0", "b").contains("net params 58489"));
}

#[test]
fn reconstruction_is_deterministic_and_empty_grids_warn() {
    let s = Sandbox::new();
    s.preprocess("fixture:icosphere@1");
    s.train("icosphere", "sdf4", "2", "ck");
    let args = |out: &'static str| ["reconstruct", "--checkpoint", "ck", "--shape", "icosphere", "--out", out, "--resolution", "24"];
    s.ok(&args("a.ply"));
    s.ok(&args("b.ply"));
    let a = std::fs::read(s.path("a.ply")).unwrap();
    assert_eq!(a, std::fs::read(s.path("b.ply")).unwrap());
    assert!(load_mesh(&s.path("a.ply")).unwrap().num_faces() > 0);

    // a 2³ grid far outside the shape sees only positive values
    let far = ["--resolution", "2", "--bounds", "-4,3,3,-3,4,4"];
    let mut empty = vec!["reconstruct", "--checkpoint", "ck", "--shape", "icosphere", "--out", "e.obj"];
    empty.extend(far);
    let out = s.run(&empty);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    assert!(load_mesh(&s.path("e.obj")).unwrap().is_empty());
    empty.push("--fail-on-empty");
    assert_eq!(code(&s.run(&empty)), 2);
}

#[test]
fn error_channel_needs_ply() {
    let s = Sandbox::new();
    s.preprocess("fixture:icosphere@1");
    s.train("icosphere", "sdf4", "1", "ck");
    let base = ["reconstruct", "--checkpoint", "ck", "--shape", "icosphere", "--resolution", "16", "--gt", "fixture:icosphere@1"];
    let mut ply = base.to_vec();
    ply.extend(["--out", "r.ply"]);
    s.ok(&ply);
    let header = std::fs::read(s.path("r.ply")).unwrap();
    assert!(String::from_utf8_lossy(&header[..400]).contains("property double error"));
    let mut obj = base.to_vec();
    obj.extend(["--out", "r.obj"]);
    assert_eq!(code(&s.run(&obj)), 1);
}

fn report_row(s: &Sandbox, name: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(s.path(name)).unwrap()).unwrap()
}

#[test]
fn eval_identical_and_shrunk_spheres() {
    let s = Sandbox::new();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/icosphere_3.obj");
    let fixture = fixture.to_str().unwrap();
    s.ok(&["eval", "--gt", fixture, "--recon", fixture, "--out", "same.json", "--samples", "2000"]);
    let same = report_row(&s, "same.json");
    for k in ["cd", "hd", "ed_mean", "ed_max"] {
        assert!(same[k].as_f64().unwrap() < 1e-12, "{k} = {}", same[k]);
    }

    let mesh = load_mesh(Path::new(fixture)).unwrap().map_vertices(|v| v.map(|c| 0.9 * c));
    localsdf::extract::export_mesh(&mesh, &s.path("small.ply"), localsdf::geometry::MeshFormat::PlyBinary, &[], &[])
        .unwrap();
    s.ok(&["eval", "--gt", fixture, "--recon", "small.ply", "--out", "small.json", "--samples", "2000"]);
    let ed = report_row(&s, "small.json")["ed_mean"].as_f64().unwrap();
    assert!((ed - 0.1).abs() < 0.005, "{ed}");
}

#[test]
fn report_averages_rows_per_method() {
    let s = Sandbox::new();
    let header = "method,shape,unit,chamfer,cd,hd,cd_mm,hd_mm,ed_mean,ed_std,ed_median,ed_p90,ed_max,\
pct_over_5mm,pct_over_10mm,pct_over_20mm,net_params,latent_params,surface_samples,seed,config_hash";
    let row = |m: &str, v: f64| {
        format!("{m},s,mm,unsquared,{v},{v},{v},{v},{v},{v},{v},{v},{v},{v},{v},{v},100,8,30000,0,h")
    };
    let body = [header.to_string(), row("a", 1.0), row("a", 2.0), row("a", 6.0), row("b", 5.0)].join("\n");
    std::fs::write(s.path("rows.csv"), body + "\n").unwrap();
    let out = s.ok(&["report", "rows.csv", "--out", "summary.csv"]);
    assert!(out.contains("method"));
    let summary = std::fs::read_to_string(s.path("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("a,3,100.0,8.0,3.0,3.0,3.0,3.0"), "{}", lines[1]);
    assert!(lines[2].starts_with("b,1,"), "{}", lines[2]);
}

#[test]
fn config_errors_exit_with_one_and_help_lists_keys() {
    let s = Sandbox::new();
    std::fs::write(s.path("c.json"), r#"{"train": {"epochz": 3}}"#).unwrap();
    assert_eq!(code(&s.run(&["preprocess", "fixture:icosphere@0", "--config", "c.json"])), 1);
    assert_eq!(code(&s.run(&["preprocess", "fixture:icosphere@0", "--set", "sampling.nope=1"])), 1);
    assert_eq!(code(&s.run(&["train", "--bogus-flag"])), 1);
    assert_eq!(code(&s.run(&["train", "missing", "--out", "x"])), 1);

    let help = s.ok(&["train", "--help"]);
    for key in ["train.weights.sim", "train.lr_net", "model.architecture", "train.sim_rings"] {
        assert!(help.contains(key), "train --help lacks {key}");
    }
    assert!(s.ok(&["reconstruct", "--help"]).contains("grid.resolution"));
    assert!(s.ok(&["preprocess", "--help"]).contains("sampling.perturb.knn_k"));
}

#[test]
fn flags_override_the_config_file() {
    let s = Sandbox::new();
    std::fs::write(
        s.path("c.json"),
        r#"{"sampling": {"surface_samples": 100, "perturbed_samples": 100, "seed": 4}}"#,
    )
    .unwrap();
    s.ok(&["preprocess", "fixture:icosphere@1", "--config", "c.json", "--surface-samples", "300"]);
    let (_, info) =
        read_sample_cache(&s.path("cache/icosphere.samples.bin"), &s.path("cache/icosphere.samples.json")).unwrap();
    assert_eq!((info.surface_count, info.perturbed_count, info.seed), (300, 100, 4));
}

#[test]
fn inference_keeps_the_network() {
    let s = Sandbox::new();
    s.preprocess("fixture:dumbbell@1");
    s.preprocess("fixture:multi_limb@1");
    s.train("dumbbell", "lgcl-cheb", "1", "ck");
    s.ok(&["infer", "--checkpoint", "ck", "--shape", "multi_limb", "--out", "inf", "--epochs", "2", "--set", "train.batch_size=64", "--set", "train.batches_per_epoch=1"]);
    let (trained, _) = load_state(&s.path("ck"), None).unwrap();
    let (inferred, _) = load_state(&s.path("inf"), None).unwrap();
    assert_eq!(trained.network_hash(), inferred.network_hash());
    assert!(inferred.latent("multi_limb").is_some());
    s.ok(&["reconstruct", "--checkpoint", "inf", "--shape", "multi_limb", "--out", "m.obj", "--resolution", "16"]);
}

#[test]
fn shipped_fixtures_match_the_generators() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut expected = vec![
        ("icosphere_1", localsdf::fixtures::icosphere(1)),
        ("icosphere_2", localsdf::fixtures::icosphere(2)),
        ("icosphere_3", localsdf::fixtures::icosphere(3)),
        ("dumbbell", localsdf::fixtures::dumbbell(3)),
        ("multi_limb", localsdf::fixtures::multi_limb(3)),
    ];
    for (p, name) in ["multi_limb_pose1", "multi_limb_pose2", "multi_limb_pose3"].into_iter().enumerate() {
        expected.push((name, localsdf::fixtures::multi_limb_pose(3, p + 1)));
    }
    for (name, mesh) in expected {
        let loaded = load_mesh(&dir.join(format!("{name}.obj"))).unwrap();
        assert_eq!(loaded, mesh, "{name}");
    }
}
