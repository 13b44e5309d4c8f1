use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use localsdf::extract::{export_mesh, GridSpec, ShapeField};
use localsdf::geometry::{
    load_mesh, normalize_mesh, read_sample_cache, sample_perturbed, sample_surface, write_sample_cache, MeshFormat,
    NormalizationTransform, SampleCacheInfo, TriangleIndex, TriangleMesh, SAMPLE_COLUMNS,
};
use localsdf::metrics::{evaluate, ChamferVariant};
use localsdf::nets::{self, count_parameters};
use localsdf::trainer::{self, infer_latent, load_state, save_state, ModelState, ShapeEntry};
use localsdf::{fixtures, rng};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Marks failures that get exit code 2.
#[derive(Debug)]
pub struct Numerical(pub String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

/// A mesh argument: a file path, or `fixture:<name>[@level]` for a built-in
/// shape (level 3 by default). Returns the shape id and the mesh.
pub fn resolve_mesh(spec: &str) -> Result<(String, TriangleMesh)> {
    if let Some(rest) = spec.strip_prefix("fixture:") {
        let (name, level) = match rest.split_once('@') {
            Some((n, l)) => (n, l.parse().with_context(|| format!("bad fixture level in {spec:?}"))?),
            None => (rest, 3),
        };
        let mesh = fixtures::by_name(name, level).ok_or_else(|| anyhow!("unknown fixture {name:?}"))?;
        return Ok((name.to_string(), mesh));
    }
    let path = Path::new(spec);
    let mesh = load_mesh(path).with_context(|| format!("loading {spec}"))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("cannot derive a shape id from {spec:?}"))?;
    Ok((id.to_string(), mesh))
}

struct CachePaths {
    samples: PathBuf,
    sidecar: PathBuf,
    mesh: PathBuf,
}

fn cache_paths(cache: &Path, id: &str) -> CachePaths {
    CachePaths {
        samples: cache.join(format!("{id}.samples.bin")),
        sidecar: cache.join(format!("{id}.samples.json")),
        mesh: cache.join(format!("{id}.mesh.ply")),
    }
}

fn preprocess_one(spec: &str, cfg: &RunConfig, cache: &Path, hash: &str) -> Result<String> {
    let (id, raw) = resolve_mesh(spec)?;
    let (mesh, mut transform) = normalize_mesh(&raw).with_context(|| format!("normalizing {spec}"))?;
    transform.unit_name = cfg.sampling.units.clone();
    let s = &cfg.sampling;
    let surface = sample_surface(&mesh, s.surface_samples, rng::derive_seed(s.seed, &format!("surface.{id}"), 0))?;
    let index = TriangleIndex::new(&mesh)?;
    let perturbed = sample_perturbed(
        &surface,
        &index,
        s.perturbed_samples,
        &s.perturb,
        rng::derive_seed(s.seed, &format!("perturbed.{id}"), 0),
    )?;
    let mut samples = surface;
    samples.extend(&perturbed);
    let info = SampleCacheInfo {
        shape_id: id.clone(),
        surface_count: s.surface_samples,
        perturbed_count: s.perturbed_samples,
        seed: s.seed,
        sigma_global: s.perturb.sigma_global,
        knn_k: s.perturb.knn_k,
        sigma_local_override: s.perturb.sigma_local_override,
        mesh_hash: raw.content_hash(),
        config_hash: hash.to_string(),
        normalization: transform,
        columns: SAMPLE_COLUMNS.iter().map(|c| c.to_string()).collect(),
    };
    let p = cache_paths(cache, &id);
    write_sample_cache(&p.samples, &p.sidecar, &samples, &info)?;
    export_mesh(&mesh, &p.mesh, MeshFormat::PlyBinary, &[format!("config_hash {hash}")], &[])?;
    Ok(id)
}

pub fn preprocess(inputs: &[String], cfg: &RunConfig, cache: &Path) -> Result<()> {
    fs::create_dir_all(cache).with_context(|| format!("creating cache {}", cache.display()))?;
    let hash = cfg.hash();
    let mut failed = 0;
    for spec in inputs {
        match preprocess_one(spec, cfg, cache, &hash) {
            Ok(id) => println!("{id}: {} samples cached in {}", cfg.sampling.surface_samples + cfg.sampling.perturbed_samples, cache.display()),
            Err(e) => {
                eprintln!("error: {spec}: {e:#}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} inputs failed", inputs.len());
    }
    Ok(())
}

fn load_shape(cache: &Path, id: &str) -> Result<(ShapeEntry, NormalizationTransform)> {
    let p = cache_paths(cache, id);
    let (samples, info) = read_sample_cache(&p.samples, &p.sidecar)
        .with_context(|| format!("shape {id}: no usable sample cache in {} (run preprocess)", cache.display()))?;
    let mesh = load_mesh(&p.mesh).with_context(|| format!("shape {id}: cached mesh"))?;
    let entry = ShapeEntry {
        id: id.to_string(),
        mesh,
        samples,
    };
    Ok((entry, info.normalization))
}

fn numerical(e: trainer::TrainError) -> anyhow::Error {
    if e.is_numerical() {
        anyhow::Error::new(Numerical(e.to_string()))
    } else {
        e.into()
    }
}

fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    total: f64,
    sal: f64,
    igr_eikonal: f64,
    igr_normal: f64,
    sim: f64,
    reg: f64,
    lr_net: f64,
    lr_latent: f64,
}

/// Latent scalars per shape for `model` on `mesh`.
fn latent_len(state: &ModelState, mesh: &TriangleMesh) -> usize {
    state.model.latent_len(mesh.num_vertices())
}

pub fn train(ids: &[String], cfg: &RunConfig, cache: &Path, out: &Path, resume: bool) -> Result<()> {
    if ids.is_empty() {
        bail!("no shapes given");
    }
    let model = cfg.model.build()?;
    let shapes: Vec<ShapeEntry> = ids.iter().map(|id| load_shape(cache, id).map(|s| s.0)).collect::<Result<_>>()?;
    let hash = cfg.hash();
    let mut state = if resume && out.join("manifest.json").exists() {
        let (state, manifest) = load_state(out, Some(&model))?;
        if state.shape_ids != ids {
            bail!("checkpoint was trained on {:?}, not {:?}", state.shape_ids, ids);
        }
        if manifest.config_hash != hash {
            eprintln!("warning: resuming a checkpoint written under config {}", manifest.config_hash);
        }
        eprintln!("resuming at epoch {}", state.epoch);
        state
    } else {
        ModelState::initialize(&model, &shapes, &cfg.train)?
    };
    let net = count_parameters(&state.store);
    let per_shape = latent_len(&state, &shapes[0].mesh);
    println!("architecture {:?}: net params {net}, latent params {per_shape} per shape", model.architecture);

    fs::create_dir_all(out)?;
    let log = out.join("train_log.csv");
    if !resume {
        let _ = fs::remove_file(&log);
    }
    let mut write_err = None;
    let result = trainer::train(&shapes, &mut state, &cfg.train, &mut |e| {
        eprintln!("{e}");
        let m = &e.mean;
        let row = EpochRow {
            epoch: e.epoch,
            total: m.total,
            sal: m.sal,
            igr_eikonal: m.igr_eikonal,
            igr_normal: m.igr_normal,
            sim: m.sim,
            reg: m.reg,
            lr_net: e.lr_net,
            lr_latent: e.lr_latent,
        };
        if let Err(err) = append_csv(&log, &[row]) {
            write_err.get_or_insert(err);
        }
    });
    if let Some(e) = write_err {
        return Err(e.context("writing the training log"));
    }
    result.map_err(numerical)?;
    let extra = serde_json::json!({ "net_params": net, "latent_params": per_shape });
    save_state(out, &state, &cfg.train, &hash, extra)?;
    println!("checkpoint at epoch {} written to {}", state.epoch, out.display());
    Ok(())
}

pub fn infer(id: &str, cfg: &RunConfig, cache: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let (state, _) = load_state(checkpoint, None)?;
    let (shape, _) = load_shape(cache, id)?;
    let before = state.network_hash();
    let tcfg = cfg.infer_config();
    let (z, _) = infer_latent(&shape, &state, &tcfg, &mut |e| eprintln!("{e}")).map_err(numerical)?;
    let mut store = localsdf::ParameterStore::new();
    for (name, e) in state.store.iter() {
        if !name.starts_with(nets::LATENT_PREFIX) {
            store.insert_entry(name.clone(), e.clone())?;
        }
    }
    store.insert(nets::latent_name(id), z);
    let inferred = ModelState {
        model: state.model.clone(),
        store,
        epoch: tcfg.epochs,
        shape_ids: vec![id.to_string()],
    };
    debug_assert_eq!(inferred.network_hash(), before);
    let extra = serde_json::json!({
        "network_hash": before,
        "net_params": count_parameters(&inferred.store),
        "latent_params": latent_len(&inferred, &shape.mesh),
    });
    save_state(out, &inferred, &tcfg, &cfg.hash(), extra)?;
    println!("code for {id} written to {} (network {before})", out.display());
    Ok(())
}

pub struct ReconstructArgs<'a> {
    pub id: &'a str,
    pub checkpoint: &'a Path,
    pub out: &'a Path,
    pub gt: Option<&'a str>,
    pub fail_on_empty: bool,
}

pub fn reconstruct(a: &ReconstructArgs, cfg: &RunConfig, cache: &Path) -> Result<()> {
    let (state, _) = load_state(a.checkpoint, None)?;
    let z = state.latent(a.id).ok_or_else(|| {
        anyhow!("checkpoint has no code for shape {} (it holds {:?}); run infer first", a.id, state.shape_ids)
    })?;
    let (shape, transform) = load_shape(cache, a.id)?;
    let grid = match cfg.grid.bounds {
        Some([lo, hi]) => GridSpec::new([cfg.grid.resolution; 3], lo, hi)?,
        None => GridSpec::around(&shape.mesh, cfg.grid.resolution, cfg.grid.margin)?,
    };
    let field = ShapeField::new(&state.store, &state.model, &shape.mesh, z)?;
    let (recon, _) = field.extract(&grid)?;
    let recon = recon.map_vertices(|v| transform.invert(v));
    let format = MeshFormat::from_path(a.out)?;
    let hash = cfg.hash();
    let comments = vec![format!("shape {}", a.id), format!("config_hash {hash}")];
    let errors = match a.gt {
        Some(spec) => {
            let (_, gt) = resolve_mesh(spec)?;
            let index = TriangleIndex::new(&gt)?;
            Some(recon.vertices().iter().map(|&v| index.distance(v).0).collect::<Vec<f64>>())
        }
        None => None,
    };
    let scalars: Vec<(&str, &[f64])> = errors.iter().map(|e| ("error", e.as_slice())).collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    export_mesh(&recon, a.out, format, &comments, &scalars)?;
    if recon.is_empty() {
        eprintln!("warning: the zero level-set of {} is empty on this grid; wrote an empty mesh", a.id);
        if a.fail_on_empty {
            return Err(Numerical(format!("empty reconstruction for {}", a.id)).into());
        }
    }
    println!(
        "{}: {} vertices, {} faces written to {}",
        a.id,
        recon.num_vertices(),
        recon.num_faces(),
        a.out.display()
    );
    Ok(())
}

/// One evaluation as a flat CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub shape: String,
    pub unit: String,
    pub chamfer: ChamferVariant,
    pub cd: f64,
    pub hd: f64,
    pub cd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
    pub ed_mean: f64,
    pub ed_std: f64,
    pub ed_median: f64,
    pub ed_p90: f64,
    pub ed_max: f64,
    pub pct_over_5mm: Option<f64>,
    pub pct_over_10mm: Option<f64>,
    pub pct_over_20mm: Option<f64>,
    pub net_params: Option<usize>,
    pub latent_params: Option<usize>,
    pub surface_samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub struct EvalArgs<'a> {
    pub gt: &'a str,
    pub recon: &'a Path,
    pub method: &'a str,
    pub shape: Option<&'a str>,
    pub checkpoint: Option<&'a Path>,
    pub json: Option<&'a Path>,
    pub csv: Option<&'a Path>,
}

pub fn eval(a: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let (gt_id, gt) = resolve_mesh(a.gt)?;
    let recon = load_mesh(a.recon).with_context(|| format!("loading {}", a.recon.display()))?;
    let (gt_n, mut transform) = normalize_mesh(&gt)?;
    transform.unit_name = cfg.sampling.units.clone();
    let recon_n = recon.map_vertices(|v| transform.apply(v));
    let (cd, hd, ed, _) =
        evaluate(&gt_n, &recon_n, &transform, &cfg.metrics).map_err(|e| anyhow!("failed reconstruction: {e}"))?;
    let params = match a.checkpoint {
        Some(dir) => {
            let (state, _) = load_state(dir, None)?;
            (Some(count_parameters(&state.store)), Some(state.model.latent_len(gt.num_vertices())))
        }
        None => (None, None),
    };
    let mm = transform.mm_per_unit();
    let chamfer_mm = match cfg.metrics.chamfer {
        ChamferVariant::Unsquared => mm.map(|k| cd * k),
        ChamferVariant::Squared => mm.map(|k| cd * k * k),
    };
    let row = ReportRow {
        method: a.method.to_string(),
        shape: a.shape.unwrap_or(&gt_id).to_string(),
        unit: transform.unit_name.clone(),
        chamfer: cfg.metrics.chamfer,
        cd,
        hd,
        cd_mm: chamfer_mm,
        hd_mm: mm.map(|k| hd * k),
        ed_mean: ed.mean,
        ed_std: ed.std,
        ed_median: ed.median,
        ed_p90: ed.p90,
        ed_max: ed.max,
        pct_over_5mm: ed.pct_over_5mm,
        pct_over_10mm: ed.pct_over_10mm,
        pct_over_20mm: ed.pct_over_20mm,
        net_params: params.0,
        latent_params: params.1,
        surface_samples: cfg.metrics.surface_samples,
        seed: cfg.metrics.seed,
        config_hash: cfg.hash(),
    };
    println!(
        "{} {}: CD {:.6} HD {:.6} ED {:.6} ± {:.6} {}",
        row.method, row.shape, cd, hd, ed.mean, ed.std, row.unit
    );
    if let Some(p) = a.json {
        fs::write(p, serde_json::to_string_pretty(&row)? + "\n")?;
    }
    if let Some(p) = a.csv {
        append_csv(p, &[row])?;
    }
    Ok(())
}

/// Per-method means, in first-appearance order of the methods.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub shapes: usize,
    pub net_params: Option<f64>,
    pub latent_params: Option<f64>,
    pub cd: f64,
    pub hd: f64,
    pub ed_mean: f64,
    pub ed_std: f64,
    pub ed_median: f64,
    pub ed_p90: f64,
    pub pct_over_5mm: Option<f64>,
    pub pct_over_10mm: Option<f64>,
    pub pct_over_20mm: Option<f64>,
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let group: Vec<&ReportRow> = rows.iter().filter(|r| r.method == m).collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&ReportRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            let mean_opt = |f: &dyn Fn(&ReportRow) -> Option<f64>| {
                let v: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            SummaryRow {
                method: m.to_string(),
                shapes: group.len(),
                net_params: mean_opt(&|r| r.net_params.map(|v| v as f64)),
                latent_params: mean_opt(&|r| r.latent_params.map(|v| v as f64)),
                cd: mean(&|r| r.cd),
                hd: mean(&|r| r.hd),
                ed_mean: mean(&|r| r.ed_mean),
                ed_std: mean(&|r| r.ed_std),
                ed_median: mean(&|r| r.ed_median),
                ed_p90: mean(&|r| r.ed_p90),
                pct_over_5mm: mean_opt(&|r| r.pct_over_5mm),
                pct_over_10mm: mean_opt(&|r| r.pct_over_10mm),
                pct_over_20mm: mean_opt(&|r| r.pct_over_20mm),
            }
        })
        .collect()
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |x| format!("{x:.digits$}"))
}

pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for p in inputs {
        let mut r = csv::Reader::from_path(p).with_context(|| format!("reading {}", p.display()))?;
        for row in r.deserialize() {
            rows.push(row.with_context(|| format!("parsing {}", p.display()))?);
        }
    }
    if rows.is_empty() {
        bail!("no report rows found");
    }
    let summary = summarize(&rows);
    println!(
        "{:<16} {:>6} {:>12} {:>13} {:>10} {:>10} {:>10} {:>10}",
        "method", "shapes", "net params", "latent params", "CD", "HD", "ED mean", "ED std"
    );
    for s in &summary {
        println!(
            "{:<16} {:>6} {:>12} {:>13} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            s.method,
            s.shapes,
            opt(s.net_params, 0),
            opt(s.latent_params, 0),
            s.cd,
            s.hd,
            s.ed_mean,
            s.ed_std
        );
    }
    println!();
    println!(
        "{:<16} {:>10} {:>10} {:>8} {:>8} {:>8}",
        "method", "median", "p90", ">5mm %", ">10mm %", ">20mm %"
    );
    for s in &summary {
        println!(
            "{:<16} {:>10.6} {:>10.6} {:>8} {:>8} {:>8}",
            s.method,
            s.ed_median,
            s.ed_p90,
            opt(s.pct_over_5mm, 2),
            opt(s.pct_over_10mm, 2),
            opt(s.pct_over_20mm, 2)
        );
    }
    if let Some(p) = out {
        let mut w = csv::Writer::from_path(p)?;
        for s in &summary {
            w.serialize(s)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Writes the built-in fixtures as OBJ files.
pub fn write_fixtures(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut shapes: Vec<(String, TriangleMesh)> =
        (1..=3).map(|l| (format!("icosphere_{l}"), fixtures::icosphere(l))).collect();
    shapes.push(("dumbbell".into(), fixtures::dumbbell(3)));
    shapes.push(("multi_limb".into(), fixtures::multi_limb(3)));
    for p in 1..4 {
        shapes.push((format!("multi_limb_pose{p}"), fixtures::multi_limb_pose(3, p)));
    }
    for (name, mesh) in shapes {
        let path = dir.join(format!("{name}.obj"));
        export_mesh(&mesh, &path, MeshFormat::Obj, &[], &[])?;
        println!("{}", path.display());
    }
    Ok(())
}
