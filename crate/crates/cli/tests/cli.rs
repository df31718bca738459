use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sogs_core::image::Image;
use sogs_core::io::{read_image, write_image};
use sogs_core::scene::SceneSpec;

fn sogs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sogs"))
        .args(args)
        .env("SOGS_DETERMINISTIC", "1")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_spec() -> SceneSpec {
    SceneSpec {
        teacher_gaussians: 12,
        cameras: 4,
        test_cameras: 1,
        width: 16,
        height: 16,
        voxel_size: 0.5,
        ..Default::default()
    }
}

#[test]
fn gen_scene_train_render_eval_stats() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, tiny_spec().to_text()).unwrap();
    let scene = dir.path().join("scene");
    let out = sogs(&["gen-scene", "--spec", p(&spec), "--out", p(&scene)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scene.txt", "train_000.ppm", "train_002.ppm", "test_000.ppm", "points.xyz"] {
        assert!(scene.join(f).exists(), "missing {f}");
    }

    let run = dir.path().join("run");
    let out = sogs(&[
        "train", "--scene", p(&scene), "--out", p(&run), "--iters", "6", "--eval-every", "3", "--dim", "4", "--k", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("iteration,"));
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("6,"));

    let ckpt = run.join("checkpoint.sogs");
    let img = dir.path().join("view.ppm");
    let out = sogs(&["render", "--ckpt", p(&ckpt), "--view", "3", "--out", p(&img)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rendered = read_image(&img).unwrap();
    assert_eq!((rendered.width(), rendered.height()), (16, 16));

    let eval = dir.path().join("eval.csv");
    let out = sogs(&["eval", "--ckpt", p(&ckpt), "--scene", p(&scene), "--out", p(&eval)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(&eval).unwrap();
    assert!(table.starts_with("view,psnr,ssim\n"));
    assert!(table.lines().last().unwrap().starts_with("mean,"));

    let stats = dir.path().join("stats.csv");
    let out = sogs(&["stats", "--ckpt", p(&ckpt), "--out", p(&stats)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&stats).unwrap();
    assert!(text.starts_with("iteration,quantity,index,value\n"));
    // 4 means, 4 variances, 4 eigenvalues, 2 principal columns of 4.
    assert_eq!(text.lines().count(), 1 + 4 + 4 + 4 + 8);
    assert!(text.contains(",principal_1,3,"));
}

#[test]
fn render_view_out_of_range_fails() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, tiny_spec().to_text()).unwrap();
    let run = dir.path().join("run");
    let out = sogs(&["train", "--scene", p(&spec), "--out", p(&run), "--iters", "1", "--dim", "4", "--k", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = sogs(&[
        "render", "--ckpt", p(&run.join("checkpoint.sogs")), "--view", "4", "--out", p(&dir.path().join("x.ppm")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = sogs(&["train", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, tiny_spec().to_text()).unwrap();
    let out_dir = dir.path().join("o");
    let base = ["train", "--scene", p(&spec), "--out", p(&out_dir)];
    for extra in [&["--m", "0"][..], &["--sgl-variant", "squared"], &["--iters", "0"], &["--dim", "abc"]] {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        assert_eq!(sogs(&args).status.code(), Some(2), "{extra:?}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_sogs"))
        .args(["gradmap", "--image", "x.ppm", "--out-prefix", "y"])
        .env("SOGS_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sogs(&[
        "stats", "--ckpt", p(&dir.path().join("absent.sogs")), "--out", p(&dir.path().join("s.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.sogs"));
}

#[test]
fn gradmap_of_constant_image_is_black() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("flat.ppm");
    write_image(&img, &Image::filled(7, 5, [0.4, 0.7, 0.1])).unwrap();
    let prefix = dir.path().join("g");
    let out = sogs(&["gradmap", "--image", p(&img), "--out-prefix", p(&prefix)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for suffix in ["_gx.ppm", "_gy.ppm"] {
        let g = read_image(Path::new(&format!("{}{suffix}", p(&prefix)))).unwrap();
        assert_eq!((g.width(), g.height()), (7, 5));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn gradmap_of_vertical_edge_lights_only_gx() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("edge.ppm");
    write_image(&img, &Image::from_fn(8, 6, |_, c, _| if c < 4 { 0.0 } else { 1.0 })).unwrap();
    let prefix = dir.path().join("e");
    assert!(sogs(&["gradmap", "--image", p(&img), "--out-prefix", p(&prefix)]).status.success());
    let gx = read_image(Path::new(&format!("{}_gx.ppm", p(&prefix)))).unwrap();
    let gy = read_image(Path::new(&format!("{}_gy.ppm", p(&prefix)))).unwrap();
    assert!(gx.get(2, 3, 0) > 0.9 && gx.get(2, 0, 0) == 0.0);
    assert!(gy.data().iter().all(|&v| v == 0.0));
}
