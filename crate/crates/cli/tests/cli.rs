use std::path::Path;
use std::process::{Command, Output};

use panoctx::io;
use panoctx::layout_mesh::layout_iou;
use panoctx::scenegen::{generate_scene, SceneSpec};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panoctx"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn gen(dir: &Path, seed: &str) -> String {
    let o = run(&["gen", "--seed", seed, "--width", "64", "--quiet", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join(format!("scene_{:06}.json", seed.parse::<u64>().unwrap()))
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn icosphere_level_three_has_642_vertices() {
    let o = run(&["icosphere", "--level", "3"]);
    assert_eq!(code(&o), 0);
    let mesh = io::obj_to_mesh(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(mesh.vertices.len(), 642);
}

#[test]
fn identical_box_files_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let scene = gen(dir.path(), "3");
    let o = run(&["eval-boxes", "--iou", "0.15", &scene, &scene]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["map"], 1.0);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&["icosphere", "--level", "1", "--bogus"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["grad-check"])), 1);
    assert_eq!(code(&run(&["eval-layout", "/nonexistent/a.obj", "/nonexistent/b.obj"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let b = bad.to_str().unwrap();
    assert_eq!(code(&run(&["eval-boxes", b, b])), 2);
    assert_eq!(code(&run(&["train", "--steps", "3", "--lr", "1e12", "--quiet"])), 3);
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), "11");
    gen(b.path(), "11");
    for ext in ["json", "obj", "edep"] {
        let name = format!("scene_000011.{ext}");
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap(),
            "{name}"
        );
    }
    let t1 = run(&["train", "--steps", "2", "--quiet", "--seed", "4"]);
    let t2 = run(&["train", "--steps", "2", "--quiet", "--seed", "4"]);
    assert_eq!(code(&t1), 0);
    assert_eq!(t1.stdout, t2.stdout);
}

#[test]
fn outputs_match_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let scene = gen(dir.path(), "5");
    gen(dir.path(), "6");
    let (pa, pb) = (dir.path().join("scene_000005.obj"), dir.path().join("scene_000006.obj"));
    let o = run(&["eval-layout", "--res", "64", pa.to_str().unwrap(), pb.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let (i2, i3) = layout_iou(&io::read_obj(&pa).unwrap(), &io::read_obj(&pb).unwrap(), 64).unwrap();
    assert_eq!(v["iou2d"].as_f64().unwrap(), i2);
    assert_eq!(v["iou3d"].as_f64().unwrap(), i3);

    let lib = generate_scene(5, &SceneSpec::default()).unwrap();
    let depth = dir.path().join("d.edep");
    let o = run(&["render-depth", &scene, "--width", "64", "--out", depth.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let cli_depth = io::read_edep(&depth).unwrap();
    let lib_depth = panoctx::scenegen::render_depth(&lib, 64).unwrap();
    assert_eq!(cli_depth, io::decode_edep(&io::encode_edep(&lib_depth).unwrap()).unwrap());

    let o = run(&["fib-sample", depth.to_str().unwrap(), "--n", "500"]);
    let expected = panoctx::pointcloud::fibonacci_sample(&cli_depth, 500).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), io::points_to_text(&expected));
}

#[test]
fn zero_rate_training_log_is_flat() {
    let o = run(&["train", "--steps", "3", "--lr", "0", "--quiet", "--mask-fraction", "0"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,L_layout,L_object,L_physic,total"));
    let totals: Vec<&str> = lines.map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(totals.len(), 4);
    assert!(totals.iter().all(|t| *t == totals[0]));
}

#[test]
fn loss_report_matches_library() {
    use panoctx::context::EncoderParams;
    use panoctx::toytrain::{prepare_scene, scene_report, TrainConfig};
    let dir = tempfile::tempdir().unwrap();
    let scene = gen(dir.path(), "8");
    let o = run(&["loss", &scene, "--seed", "2"]);
    assert_eq!(code(&o), 0);
    let cli: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let cfg = TrainConfig::default();
    let s = generate_scene(8, &SceneSpec::default()).unwrap();
    let data = prepare_scene(&s, &cfg.model, cfg.depth_width, cfg.fib_samples).unwrap();
    let params = EncoderParams::init(&cfg.model, 2).unwrap();
    let lib = scene_report(&params, &cfg.model, &data, &cfg.weights, &cfg.exempt).unwrap();
    assert_eq!(cli, serde_json::to_value(&lib).unwrap());
}

#[test]
fn toy_grad_check_passes() {
    let o = run(&["grad-check", "--toy", "--quiet"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
}
