use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridguide::data::{box_mask, evaluate_batch, predicted_box, BBox, Sample};
use gridguide::imageio::read_pgm;

const CONFIG: &str = "\
# small model for command tests
seed = 3
data.scenes = 6
data.side = 64
data.max_objects = 2
model.channels = 8,16,32,64
model.heads = 1,1,2,2
model.layers = 1,1,1,1
model.latent_channels = 2
train.epochs = 1
diffusion.steps = 6
diffusion.train_steps = 0
diffusion.hidden = 8
guidance.steps = 3
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridguide")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

/// Config, a generated dataset and an untrained checkpoint.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.cfg");
    std::fs::write(&config, CONFIG).unwrap();
    let data = root.join("data");
    let ckpt = root.join("model.ckpt");
    ok(&["--config", p(&config), "--out", p(&data), "gen-data"]);
    ok(&["--config", p(&config), "--out", p(&ckpt), "train", "--data", p(&data), "--epochs", "0"]);
    Fixture {
        _dir: dir,
        root,
        config,
        data,
        ckpt,
    }
}

fn count_ppm(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count()
}

#[test]
fn gen_data_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ten = dir.path().join("ten");
    assert_eq!(ok(&["--out", p(&ten), "gen-data", "--n", "10", "--side", "64"]).trim(), "10");
    assert_eq!(count_ppm(&ten), 10);
    let manifest = std::fs::read_to_string(ten.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    let none = dir.path().join("none");
    assert_eq!(ok(&["--out", p(&none), "gen-data", "--n", "0", "--side", "64"]).trim(), "0");
    assert_eq!(std::fs::read_to_string(none.join("manifest.tsv")).unwrap(), "");
}

#[test]
fn usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nmodel.colour = 3\n").unwrap();
    assert_eq!(bin(&["--config", p(&cfg), "gen-data", "--n", "1"]).status.code(), Some(1));
    assert_eq!(bin(&["gen-data", "--bogus"]).status.code(), Some(1));
    let missing = dir.path().join("missing");
    assert_eq!(bin(&["train", "--data", p(&missing)]).status.code(), Some(2));
    let f = fixture();
    let img = f.data.join("scene_00000.ppm");
    let out = bin(&["--config", p(&f.config), "dump-attn", "--checkpoint", p(&f.ckpt), "--image", p(&img), "--caption", "red circle", "--stage", "5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_prints_epoch_losses() {
    let f = fixture();
    let ckpt = f.root.join("trained.ckpt");
    let log = ok(&["--config", p(&f.config), "--out", p(&ckpt), "train", "--data", p(&f.data), "--epochs", "2"]);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let mut parts = l.split('\t');
        assert_eq!(parts.next().unwrap(), (i + 1).to_string());
        assert!(parts.next().unwrap().parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn eval_report_and_random_baseline() {
    let f = fixture();
    let out = f.root.join("eval");
    ok(&["--config", p(&f.config), "--out", p(&out), "eval", "--checkpoint", p(&f.ckpt), "--data", p(&f.data)]);
    let report = std::fs::read_to_string(out.join("report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 6 + 1);
    let mean: Vec<&str> = report.lines().last().unwrap().split('\t').collect();
    assert_eq!(mean[0], "mean");
    let iou: f64 = mean[1].parse().unwrap();
    assert!(iou < 0.2, "random weights IoU {iou}");
}

#[test]
fn oracle_guidance_recovers_grid_aligned_boxes() {
    // guidance painted from the ground truth on a 7×7 stage-4 grid
    let side = 7;
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    for i in 0..20 {
        let (c, r) = (i % 5, (i * 3) % 5);
        let (w, h) = (1 + i % 3, 1 + (i / 3) % 3);
        let s = side as f64;
        let gt = BBox::new(c as f64 / s, r as f64 / s, w as f64 / s, h as f64 / s).unwrap();
        let g = box_mask(&gt, side, side);
        preds.push(predicted_box(side, side, &g, 0.5).unwrap());
        samples.push(Sample {
            image: gridguide::backbone::ImageTensor::filled(32, 32, [0.0; 3]),
            caption: "red circle [above blue square]".into(),
            gt_box: gt,
            alt_box: None,
        });
    }
    let report = evaluate_batch(&samples, &preds).unwrap();
    assert!(report.mean.iou > 0.95, "{}", report.mean.iou);
}

#[test]
fn run_outputs_and_no_guidance() {
    let f = fixture();
    let img = f.data.join("scene_00000.ppm");
    let caption = "red circle [above blue square]";
    let guided = f.root.join("guided");
    ok(&["--config", p(&f.config), "--out", p(&guided), "run", "--checkpoint", p(&f.ckpt), "--image", p(&img), "--caption", caption]);
    let out = gridguide::imageio::read_ppm(&guided.join("output.ppm")).unwrap();
    assert_eq!((out.height, out.width), (64, 64));
    let (gh, gw, _) = read_pgm(&guided.join("guidance.pgm")).unwrap();
    assert_eq!((gh, gw), (2, 2));
    let flags = |dir: &Path| -> Vec<u8> {
        std::fs::read_to_string(dir.join("trace.tsv"))
            .unwrap()
            .lines()
            .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
            .collect()
    };
    assert_eq!(flags(&guided), [1, 1, 1, 0, 0, 0]);
    let plain = f.root.join("plain");
    ok(&["--config", p(&f.config), "--out", p(&plain), "--no-guidance", "run", "--checkpoint", p(&f.ckpt), "--image", p(&img), "--caption", caption]);
    assert_eq!(flags(&plain), [0; 6]);
}

#[test]
fn dump_attention_files() {
    let f = fixture();
    let big = f.root.join("big");
    ok(&["--out", p(&big), "gen-data", "--n", "1", "--side", "224"]);
    let img = big.join("scene_00000.ppm");
    let out = f.root.join("attn");
    let listed = ok(&[
        "--config", p(&f.config), "--out", p(&out), "dump-attn", "--checkpoint", p(&f.ckpt), "--image", p(&img), "--caption",
        "red circle [above blue square]", "--stage", "4",
    ]);
    assert_eq!(listed.lines().count(), 3);
    let heads: Vec<_> = (0..2).map(|k| read_pgm(&out.join(format!("stage4_head{}.pgm", k + 1))).unwrap()).collect();
    let (h, w, mean) = read_pgm(&out.join("stage4_mean.pgm")).unwrap();
    assert_eq!((h, w), (7, 7));
    for (i, &m) in mean.iter().enumerate() {
        let avg = heads.iter().map(|x| x.2[i]).sum::<f64>() / heads.len() as f64;
        assert!((m - avg).abs() <= 1.0 / 255.0 + 1e-12, "cell {i}: {m} vs {avg}");
    }
}
