mod common;

use common::*;
use localsdf::extract::{export_mesh, extract_surface, marching_cubes, GridSpec, ShapeField};
use localsdf::fixtures;
use localsdf::geometry::vec3::norm;
use localsdf::geometry::{load_mesh, MeshFormat, Point3, TriangleMesh};
use localsdf::nets::decoder::decoder_eval;
use localsdf::nets::{Architecture, ModelConfig};
use localsdf::regions::KeyPointSet;
use localsdf::{ParameterStore, Tensor};

fn sampled(grid: &GridSpec, f: impl Fn(Point3) -> f64) -> Vec<f64> {
    grid.nodes().into_iter().map(f).collect()
}

fn max_radial_error(mesh: &TriangleMesh, r: f64) -> f64 {
    mesh.vertices().iter().map(|&v| (norm(v) - r).abs()).fold(0.0, f64::max)
}

#[test]
fn sphere_error_does_not_grow_with_resolution() {
    let f = |p: Point3| norm(p) - 0.5;
    let mut last = f64::INFINITY;
    for n in [16, 32, 64] {
        let grid = GridSpec::cube(n, -1.0, 1.0).unwrap();
        let mesh = marching_cubes(&sampled(&grid, f), &grid).unwrap();
        let e = max_radial_error(&mesh, 0.5);
        assert!(e <= grid.cell_diagonal());
        assert!(e <= last, "resolution {n}: {e} > {last}");
        last = e;
    }
}

#[test]
fn extracted_meshes_have_no_dangling_vertices() {
    let fields: [&(dyn Fn(Point3) -> f64 + Sync); 3] = [
        &|p| norm(p) - 0.5,
        &|p| p[0] * p[1] - 0.1 * p[2],
        &|p| (norm([p[0] - 0.4, p[1], p[2]]) - 0.3).min(norm([p[0] + 0.4, p[1], p[2]]) - 0.3),
    ];
    for f in fields {
        let grid = GridSpec::cube(24, -1.0, 1.0).unwrap();
        let (mesh, values) =
            extract_surface(&grid, |pts| Ok::<_, localsdf::extract::ExtractError>(pts.iter().map(|&p| f(p)).collect()))
                .unwrap();
        assert_eq!(values.len(), grid.num_nodes());
        let mut used = vec![false; mesh.num_vertices()];
        for face in mesh.faces() {
            face.iter().for_each(|&i| used[i] = true);
        }
        assert!(mesh.num_faces() > 0 && used.iter().all(|&u| u));
    }
}

#[test]
fn empty_field_yields_empty_mesh() {
    let grid = GridSpec::cube(8, -1.0, 1.0).unwrap();
    let mesh = marching_cubes(&sampled(&grid, |_| -0.3), &grid).unwrap();
    assert!(mesh.is_empty());
    assert_eq!(mesh.num_vertices(), 0);
}

fn decoder_store(model: &ModelConfig) -> ParameterStore {
    let mut store = ParameterStore::new();
    model.init_network(&mut store, None, 5).unwrap();
    store
}

#[test]
fn compose_routes_to_nearest_key_with_its_code() {
    let model = ModelConfig::for_architecture(Architecture::Sdf4);
    let store = decoder_store(&model);
    let m = model.decoder.latent_dim;
    let keys = [[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]];
    let mut r = rng("compose", 0);
    let codes = uniform(&mut r, 2, m, -1.0, 1.0);
    let field = ShapeField::from_codes(&store, &model, KeyPointSet::new(keys.to_vec()).unwrap(), codes.clone()).unwrap();

    let direct = |x: Point3, i: usize| {
        let p = keys[i];
        let local = Tensor::matrix(1, 3, vec![x[0] - p[0], x[1] - p[1], x[2] - p[2]]).unwrap();
        let z = Tensor::matrix(1, m, codes.row_slice(i).to_vec()).unwrap();
        decoder_eval(&store, &model.decoder, local, z).unwrap()[0]
    };
    for x in [[-0.6, 0.1, 0.0], [-0.01, 0.3, -0.2], [0.2, 0.0, 0.0], [0.9, -0.4, 0.5]] {
        let i = usize::from(x[0] > 0.0);
        assert!((field.compose_sdf(x).unwrap() - direct(x, i)).abs() < 1e-12);
        // the other code gives a different value, so the code matters
        assert!((direct(x, i) - direct(x, 1 - i)).abs() > 1e-9);
    }
    // the tie at the midpoint plane goes to the lower index
    assert!((field.compose_sdf([0.0, 0.2, 0.1]).unwrap() - direct([0.0, 0.2, 0.1], 0)).abs() < 1e-12);
}

#[test]
fn single_key_at_origin_is_a_plain_decoder_call() {
    let model = ModelConfig::for_architecture(Architecture::Sdf4);
    let store = decoder_store(&model);
    let m = model.decoder.latent_dim;
    let mut r = rng("compose-global", 0);
    let z = uniform(&mut r, 1, m, -0.1, 0.1);
    let field = ShapeField::from_codes(&store, &model, model.keypoints(&[]).unwrap(), z.clone()).unwrap();
    let pts: Vec<Point3> = (0..50).map(|i| [0.03 * i as f64 - 0.7, 0.5 - 0.02 * i as f64, 0.1]).collect();
    let x = Tensor::matrix(pts.len(), 3, pts.iter().flatten().copied().collect()).unwrap();
    let zs = Tensor::matrix(pts.len(), m, (0..pts.len()).flat_map(|_| z.row_slice(0).to_vec()).collect()).unwrap();
    let want = decoder_eval(&store, &model.decoder, x, zs).unwrap();
    let got = field.values(&pts).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = fixtures::icosphere(2).map_vertices(|v| [v[0] * 0.3 + 0.1, v[1] * 1e-3, v[2] * 7.0]);
    for (name, format) in [("m.obj", MeshFormat::Obj), ("a.ply", MeshFormat::PlyAscii), ("b.ply", MeshFormat::PlyBinary)] {
        let path = dir.path().join(name);
        export_mesh(&mesh, &path, format, &["shape test".into()], &[]).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back.faces(), mesh.faces(), "{name}");
        for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
            assert!((0..3).all(|i| (a[i] - b[i]).abs() <= 1e-6), "{name}");
        }
        if format == MeshFormat::PlyBinary {
            assert_eq!(back.vertices(), mesh.vertices());
        }
    }
    let errors: Vec<f64> = (0..mesh.num_vertices()).map(|i| i as f64 * 0.5).collect();
    let ply = dir.path().join("err.ply");
    export_mesh(&mesh, &ply, MeshFormat::PlyBinary, &[], &[("error", &errors)]).unwrap();
    assert_eq!(load_mesh(&ply).unwrap().vertices(), mesh.vertices());
    assert!(export_mesh(&mesh, &dir.path().join("x.obj"), MeshFormat::Obj, &[], &[("error", &errors)]).is_err());

    let empty = TriangleMesh::empty();
    for name in ["e.obj", "e.ply"] {
        let path = dir.path().join(name);
        export_mesh(&empty, &path, MeshFormat::from_path(&path).unwrap(), &[], &[]).unwrap();
        assert!(load_mesh(&path).unwrap().is_empty());
    }
}
