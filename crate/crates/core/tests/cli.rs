use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flowstep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowstep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const RECIPE: &str = "n_source = 64\nn_target = 60\nshape = blobs\nblobs = 3\nmotion = rigid\nmax_displacement = 0.3\ndropout = 0.1\nseed = 5\n";

const CONFIG: &str = "# tiny model for fast runs
k_train = 2
k_infer = 3
epochs = 1
batch_size = 2
optimizer = adam
n_local = 16
n_global = 4
d_local = 8
d_global = 8
d_corr = 8
d_motion = 4
d_hidden = 8
local_radius = 0.3
encoder_radius = 0.45
";

fn setup(dir: &Path, config: &str) -> (String, String, String) {
    let recipe = dir.join("recipe.txt");
    let cfg = dir.join("train.cfg");
    fs::write(&recipe, RECIPE).unwrap();
    fs::write(&cfg, config).unwrap();
    let data = dir.join("data");
    let o = flowstep(&["gen-data", "--recipe", s(&recipe), "--out", s(&data), "--count", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (s(&cfg).into(), s(&data).into(), s(&dir.join("model.ckpt")).into())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, ckpt) = setup(dir.path(), CONFIG);
    let index = fs::read_to_string(Path::new(&data).join("index.txt")).unwrap();
    assert_eq!(index.lines().count(), 3);

    let o = flowstep(&["train", "--config", &cfg, "--data", &data, "--out", &ckpt]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&fs::read(&ckpt).unwrap()[..8], b"FSTEP3D\0");
    let log = fs::read_to_string(format!("{ckpt}.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);

    let first = index.lines().next().unwrap();
    let scene = format!("{data}/{first}");
    let flow = dir.path().join("flow.txt");
    let o = flowstep(&["infer", "--ckpt", &ckpt, "--scene", &scene, "--iters", "4", "--out", s(&flow)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&flow).unwrap().lines().count(), 64);

    let o = flowstep(&["eval", "--ckpt", &ckpt, "--data", &data, "--iters", "3"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1);
    let fields: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(fields.len(), 4);
    for f in fields {
        assert_eq!(f.split('.').nth(1).unwrap().len(), 6);
        f.parse::<f64>().unwrap();
    }
}

#[test]
fn self_supervised_training_ignores_flow_files() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, ckpt) = setup(dir.path(), CONFIG);
    for entry in fs::read_dir(&data).unwrap() {
        let p = entry.unwrap().path();
        if p.to_str().unwrap().ends_with("_flow.txt") {
            fs::remove_file(p).unwrap();
        }
    }
    let o = flowstep(&["train", "--config", &cfg, "--data", &data, "--out", &ckpt]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let full = dir.path().join("full.cfg");
    fs::write(&full, format!("{CONFIG}loss_mode = full\n")).unwrap();
    let o = flowstep(&["train", "--config", s(&full), "--data", &data, "--out", &ckpt]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("scene_0005"));

    let o = flowstep(&["eval", "--ckpt", &ckpt, "--data", &data, "--iters", "2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, ckpt) = setup(dir.path(), CONFIG);
    let o = flowstep(&["train", "--config", &cfg, "--data", &data, "--out", &ckpt]);
    assert_eq!(code(&o), 0);

    let scene = format!("{data}/scene_0005");
    let flow = dir.path().join("flow.txt");
    let o = flowstep(&["infer", "--ckpt", &ckpt, "--scene", &scene, "--iters", "0", "--out", s(&flow)]);
    assert_eq!(code(&o), 1);
    assert!(!flow.exists());

    let o = flowstep(&["eval", "--ckpt", &ckpt, "--data", &data, "--bogus", "1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "k_train = 2\nwarp_speed = 9\n").unwrap();
    let o = flowstep(&["train", "--config", s(&bad), "--data", &data, "--out", &ckpt]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_speed"));

    fs::write(&bad, "learning_rate = -1\n").unwrap();
    let o = flowstep(&["train", "--config", s(&bad), "--data", &data, "--out", &ckpt]);
    assert_eq!(code(&o), 1);
}

#[test]
fn io_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, _) = setup(dir.path(), CONFIG);
    let missing = dir.path().join("missing.ckpt");
    let o = flowstep(&["eval", "--ckpt", s(&missing), "--data", &data, "--iters", "2"]);
    assert_eq!(code(&o), 2);

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = flowstep(&["eval", "--ckpt", s(&junk), "--data", &data, "--iters", "2"]);
    assert_eq!(code(&o), 2);

    let o = flowstep(&["gen-data", "--recipe", s(&dir.path().join("nope.txt")), "--out", &data, "--count", "1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn help_exits_zero() {
    let o = flowstep(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck"));
}

#[test]
fn gradcheck_passes() {
    let o = flowstep(&["gradcheck", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8(o.stdout).unwrap();
    for name in ["set_conv", "set_up_conv", "flow_embedding", "gru_cell", "chamfer", "laplacian", "l1", "model"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{name}:"))), "{name} missing in {out}");
    }
}
