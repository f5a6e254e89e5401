//! The `baret` binary end to end on a tiny toy configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use baret_core::backbone::toy::ShapeScene;
use baret_pipeline::error::exit;
use baret_pipeline::jobs::write_image;

const CONFIG: &str = r#"
prompt = "red circle standing"
seed = 3

[sampler]
steps = 4

[backbone.toy]
height = 8
width = 8
base_channels = 8
inner_channels = 8
embed_dim = 8
max_tokens = 3
time_dim = 16
norm_groups = 2

[backbone.train]
steps = 20
batch_size = 4
validation_size = 8
"#;

struct Sandbox {
    dir: PathBuf,
}

impl Sandbox {
    fn new(name: &str) -> Self {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("cli-{name}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("job.toml"), CONFIG).unwrap();
        let scene = ShapeScene {
            foreground: 0,
            background: 2,
            shape: 0,
            pose: 0,
            center: (4.0, 4.0),
            size: 3.0,
        };
        write_image(&dir.join("input.png"), &scene.render(8, 8)).unwrap();
        Sandbox { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_baret"))
            .current_dir(&self.dir)
            .args(["--cache-dir", "weights"])
            .args(args)
            .output()
            .unwrap()
    }

    fn invert(&self) -> Output {
        self.run(&["invert", "--config", "job.toml", "--image", "input.png", "--out", "inv.brtc"])
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn invert_edit_reconstruct_round_trip() {
    let sb = Sandbox::new("round-trip");
    let o = sb.invert();
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = &stdout_json(&o)[0];
    assert_eq!(rep["steps"], 4);
    assert!(rep["total_iterations"].as_u64().unwrap() <= 20);
    assert!(sb.path("inv.brtc").exists());

    let o = sb.run(&["reconstruct", "--cache", "inv.brtc", "--out", "rct.png"]);
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(sb.path("rct.png").exists());
    // Resampling the cache reproduces the fidelity measured at inversion time.
    let again = &stdout_json(&o)[0];
    assert_eq!(again["psnr_reconstruction"], rep["psnr_reconstruction"]);

    let o = sb.run(&["edit", "--cache", "inv.brtc", "--out", "edit", "--dump-attention"]);
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(sb.path("edit/edited.png").exists());
    assert!(sb.path("edit/metrics.json").exists());
    assert!(std::fs::read_dir(sb.path("edit/attention")).unwrap().count() > 0);

    let o = sb.run(&["edit", "--cache", "inv.brtc", "--out", "sweep", "--omega-sweep"]);
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o).len(), 5);
    let csv = std::fs::read_to_string(sb.path("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn missing_or_corrupt_cache_exits_with_bad_input() {
    let sb = Sandbox::new("bad-cache");
    let o = sb.run(&["reconstruct", "--cache", "absent.brtc"]);
    assert_eq!(code(&o), exit::BAD_INPUT);
    std::fs::write(sb.path("junk.brtc"), b"not a cache at all").unwrap();
    let o = sb.run(&["edit", "--cache", "junk.brtc", "--out", "e"]);
    assert_eq!(code(&o), exit::BAD_INPUT);
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn missing_image_exits_with_bad_input() {
    let sb = Sandbox::new("no-image");
    let o = sb.run(&["invert", "--config", "job.toml", "--image", "nope.png", "--out", "x.brtc"]);
    assert_eq!(code(&o), exit::BAD_INPUT);
}

#[test]
fn invalid_settings_exit_with_config_error() {
    let sb = Sandbox::new("bad-config");
    let o = sb.run(&[
        "invert", "--config", "job.toml", "--image", "input.png", "--prompt", " ", "--out", "x.brtc",
    ]);
    assert_eq!(code(&o), exit::CONFIG);
    let o = sb.run(&[
        "invert", "--config", "job.toml", "--image", "input.png", "--lr=-1", "--out", "x.brtc",
    ]);
    assert_eq!(code(&o), exit::CONFIG);
    let o = sb.run(&["bench", "--suite", "imagenet", "--out", "b.csv"]);
    assert_eq!(code(&o), exit::CONFIG);
    std::fs::write(sb.path("typo.toml"), "promt = \"x\"\n").unwrap();
    let o = sb.run(&["train-toy", "--config", "typo.toml"]);
    assert_eq!(code(&o), exit::CONFIG);
}

#[test]
fn edit_rejects_a_reversed_ramp() {
    let sb = Sandbox::new("ramp");
    assert_eq!(code(&sb.invert()), exit::OK);
    let o = sb.run(&[
        "edit", "--cache", "inv.brtc", "--out", "e", "--omega-start", "0.1", "--omega-end", "0.8",
    ]);
    assert_eq!(code(&o), exit::CONFIG);
}
