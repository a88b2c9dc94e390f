use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[model]
image_size = 16
d_model = 32
n_heads = 2
n_blocks = 1

[train]
steps = 10
batch_size = 2
checkpoint_every = 5

[sample]
steps = 3

[data]
n = 8
holdout = 2
";

fn framegen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_framegen"))
        .args(args)
        .env("FRAMEGEN_THREADS", "1")
        .output()
        .expect("failed to launch framegen")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstdout:\n{}\nstderr:\n{}", out.status, text(&out.stdout), text(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

#[test]
fn make_data_writes_triples_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&framegen(&["make-data", "--task", "canny", "--n", "8", "--seed", "1", "--out", p(&out)]));
    for i in 0..8 {
        for ext in ["cond.ppm", "target.ppm", "txt"] {
            assert!(out.join(format!("sample_{i:06}.{ext}")).exists());
        }
    }
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("n=8"));
    assert!(manifest.contains("version=framegen "));

    let again = dir.path().join("e");
    ok(&framegen(&["make-data", "--task", "canny", "--n", "8", "--seed", "1", "--out", p(&again)]));
    assert_eq!(manifest, fs::read_to_string(again.join("manifest.txt")).unwrap());
}

#[test]
fn make_data_with_zero_samples_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&framegen(&["make-data", "--task", "depth", "--n", "0", "--out", p(&out)]));
    let names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["manifest.txt"]);
}

#[test]
fn bad_task_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = framegen(&["make-data", "--task", "sketch", "--n", "2", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("sketch"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(framegen(&["make-data", "--n", "2"]).status.code(), Some(1));
    assert_eq!(framegen(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(framegen(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nwarmup = 10\n");
    let out = framegen(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("warmup"));
}

#[test]
fn train_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    ok(&framegen(&["train", "--config", p(&cfg), "--out", p(&run)]));
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 11);
    assert!(run.join("config.resolved.txt").exists());
    assert!(fs::read_to_string(run.join("VERSION")).unwrap().starts_with("framegen "));

    let data = dir.path().join("data");
    ok(&framegen(&["make-data", "--task", "canny", "--n", "1", "--seed", "9", "--image-size", "16", "--out", p(&data)]));
    let cond = data.join("sample_000000.cond.ppm");
    let ckpt = run.join("last.ckpt");
    let sample = |omega: &str, out: &Path| {
        framegen(&[
            "sample", "--checkpoint", p(&ckpt), "--cond", p(&cond), "--prompt", "red circle left top",
            "--omega", omega, "--steps", "4", "--seed", "3", "--out", p(out),
        ])
    };
    let (a, b, c) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"), dir.path().join("c.ppm"));
    ok(&sample("2", &a));
    ok(&sample("2", &b));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let meta = fs::read_to_string(dir.path().join("a.ppm.meta.txt")).unwrap();
    for key in ["omega=2.0", "steps=4", "seed=3", "config_hash=", "version=framegen "] {
        assert!(meta.contains(key), "{key} missing from\n{meta}");
    }
    ok(&sample("1", &c));
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let bad = framegen(&[
        "sample", "--checkpoint", p(&ckpt), "--cond", p(&cond), "--prompt", "purple circle", "--out", p(&a),
    ]);
    assert_ne!(bad.status.code(), Some(0));
    let err = text(&bad.stderr);
    assert!(err.contains("purple") && err.contains("circle") && err.contains("bg_white"), "{err}");

    // Resume from the midpoint reproduces the final checkpoint.
    let resumed = dir.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    ok(&framegen(&[
        "train", "--config", p(&cfg), "--out", p(&resumed), "--resume", p(&run.join("checkpoint_000005.ckpt")),
    ]));
    assert_eq!(fs::read(run.join("last.ckpt")).unwrap(), fs::read(resumed.join("last.ckpt")).unwrap());
}

/// Conditional-only DDIM written out by hand: ε̂ comes from the real
/// prompt alone, no unconditional pass.
fn conditional_only_sample(run: &Path, cond_path: &Path, prompt: &str, steps: usize, seed: u64) -> Vec<u8> {
    use framegen_core::config::RunConfig;
    use framegen_core::data::pnm;
    use framegen_core::diffusion::ddim_timesteps;
    use framegen_core::model::{codec, Model, Vocabulary};
    use framegen_core::tensor::checkpoint;
    use framegen_core::train::model_params;
    use framegen_core::{Rng, Tensor};

    let cfg = RunConfig::load(run.join("config.resolved.txt")).unwrap();
    let model = Model::new(cfg.model_config(), cfg.train.mask).unwrap();
    let store = model_params(&checkpoint::load(run.join("last.ckpt")).unwrap());
    let sched = cfg.schedule().unwrap();
    let s = cfg.model.latent_factor;
    let ids = Vocabulary::shipped().encode(prompt, cfg.model.text_len).unwrap();
    let cond = codec::image_to_latent(&pnm::read_pnm(cond_path).unwrap(), s).unwrap();
    let ts = ddim_timesteps(sched.t_max(), steps).unwrap();
    let mut z = Tensor::randn(cond.shape().to_vec(), 1.0, &mut Rng::new(seed).derive_str("sample.noise"));
    for (i, &t) in ts.iter().enumerate() {
        let e = model.predict(&store, &cond, &z, &ids, t, cfg.data.task).unwrap();
        let ab = sched.alpha_bar(t).unwrap();
        let prev = ts.get(i + 1).map_or(1.0, |&tp| sched.alpha_bar(tp).unwrap());
        z = Tensor::from_fn(z.shape().to_vec(), |j| {
            let x0 = ((z.data()[j] - (1.0 - ab).sqrt() * e.data()[j]) / ab.sqrt()).clamp(-1.0, 1.0);
            prev.sqrt() * x0 + (1.0 - prev).sqrt() * e.data()[j]
        });
    }
    pnm::encode_ppm(&codec::latent_to_image(&z, s).unwrap()).unwrap()
}

#[test]
fn guidance_weight_one_matches_a_conditional_only_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nsteps = 3\n");
    let run = dir.path().join("run");
    ok(&framegen(&["train", "--config", p(&cfg), "--out", p(&run)]));
    let data = dir.path().join("data");
    ok(&framegen(&["make-data", "--task", "canny", "--n", "1", "--image-size", "16", "--out", p(&data)]));
    let cond = data.join("sample_000000.cond.ppm");
    let o = dir.path().join("w1.ppm");
    ok(&framegen(&[
        "sample", "--checkpoint", p(&run.join("last.ckpt")), "--cond", p(&cond), "--prompt", "blue square",
        "--omega", "1", "--steps", "3", "--seed", "5", "--out", p(&o),
    ]));
    assert_eq!(fs::read(o).unwrap(), conditional_only_sample(&run, &cond, "blue square", 3, 5));
}

#[test]
fn divergent_training_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let out = framegen(&["train", "--config", p(&cfg), "--out", p(&run), "--set", "optim.lr=1e200"]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("last good checkpoint"));
    assert!(run.join("last.ckpt").exists());
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_backward() {
    let out = framegen(&["gradcheck", "--coords", "2"]);
    ok(&out);
    assert!(text(&out.stdout).contains("worst relative error"));

    let bad = framegen(&["gradcheck", "--coords", "2", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(3));
    let err = text(&bad.stderr);
    assert!(err.contains("gradient check failed for:") && err.contains("adaln"), "{err}");
}

#[test]
fn ablate_rows_follow_strategy_then_seed_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nsteps = 2\n[data]\nn = 4\nholdout = 1\n");
    let out = dir.path().join("abl");
    ok(&framegen(&[
        "ablate", "--config", p(&cfg), "--strategies", "none,c,a,b", "--seeds", "2,1", "--out", p(&out),
    ]));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let keys: Vec<String> = csv
        .lines()
        .skip(1)
        .take(8)
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(keys, ["a,1", "a,2", "b,1", "b,2", "c,1", "c,2", "none,1", "none,2"]);
    assert!(out.join("config.resolved.txt").exists() && out.join("VERSION").exists());
}
