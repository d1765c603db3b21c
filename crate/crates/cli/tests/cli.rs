//! Drives the `specdn` binary end to end on tiny inputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn specdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specdn"))
        .args(args)
        .env("SPECDN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = specdn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

const SMOKE_TRAIN: &str = "\
# tiny run
map_size = 32
maps = 3
validation_maps = 2
depth = 2
width = 4
epochs = 2
lr_decay_every = 1
pairs_per_map = 2
";

#[test]
fn synth_corrupt_denoise_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let clean = d.join("clean.spx");
    ok(&[
        "synth",
        "--height",
        "40",
        "--width",
        "36",
        "--seed",
        "4",
        "--out",
        p(&clean),
        "--quiet",
    ]);

    let noisy = d.join("noisy.spx");
    ok(&[
        "corrupt",
        "--in",
        p(&clean),
        "--count",
        "20000",
        "--psf",
        "off",
        "--seed",
        "1",
        "--out",
        p(&noisy),
    ]);
    let again = d.join("again.spx");
    ok(&[
        "corrupt",
        "--in",
        p(&clean),
        "--count",
        "20000",
        "--psf",
        "off",
        "--seed",
        "1",
        "--out",
        p(&again),
    ]);
    assert_eq!(std::fs::read(&noisy).unwrap(), std::fs::read(&again).unwrap());

    let zero = d.join("zero.spx");
    ok(&["corrupt", "--in", p(&clean), "--count", "0", "--out", p(&zero)]);
    let z = specdn::io::load_spectrum(&zero).unwrap();
    assert!(z.values().iter().all(|&v| v == 0.0));

    let ranged = d.join("ranged.spx");
    ok(&[
        "corrupt",
        "--in",
        p(&clean),
        "--count",
        "1000:5000",
        "--out",
        p(&ranged),
    ]);

    let cfg = write_config(d, "train.cfg", SMOKE_TRAIN);
    let model = d.join("model.dnw");
    ok(&["train", "--config", p(&cfg), "--out", p(&model), "--quiet"]);
    let history = std::fs::read_to_string(d.join("model.history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss");
    assert_eq!(lines.len(), 3);

    let den = d.join("den.spx");
    ok(&[
        "denoise",
        "--checkpoint",
        p(&model),
        "--in",
        p(&noisy),
        "--out",
        p(&den),
        "--quiet",
    ]);
    let den = specdn::io::load_spectrum(&den).unwrap();
    assert_eq!(den.dim(), (40, 36));
    assert!(den.values().iter().all(|&v| v >= 0.0));

    let sm = d.join("sm.spx");
    ok(&["smooth", "--in", p(&noisy), "--sigma", "1.0,2.0", "--out", p(&sm)]);
    let d2 = d.join("d2.spx");
    ok(&[
        "d2",
        "--in",
        p(&clean),
        "--axis",
        "energy",
        "--presmooth",
        "1",
        "--out",
        p(&d2),
    ]);
    assert!(specdn::io::load_signed(&d2).is_ok());

    let fit = ok(&["mdcfit", "--in", p(&clean), "--energy", "-0.3"]);
    let text = String::from_utf8(fit.stdout).unwrap();
    assert!(text.starts_with("energy,peak_position,width"));
    assert_eq!(text.lines().count(), 2);

    let trace = d.join("trace.csv");
    ok(&[
        "trace",
        "--in",
        p(&clean),
        "--from",
        "-0.4",
        "--to",
        "-0.2",
        "--out",
        p(&trace),
    ]);
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() > 2);
}

#[test]
fn zero_checkpoint_is_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let net = specdn::nn::Network::<f32>::zeros(3, 4).unwrap();
    let model = d.join("zero.dnw");
    specdn::nn::save_checkpoint(&net, &model).unwrap();
    let clean = d.join("clean.spx");
    ok(&[
        "synth",
        "--height",
        "24",
        "--width",
        "24",
        "--counts",
        "5000",
        "--out",
        p(&clean),
    ]);
    let out = d.join("out.spx");
    ok(&[
        "denoise",
        "--checkpoint",
        p(&model),
        "--in",
        p(&clean),
        "--out",
        p(&out),
    ]);
    let a = specdn::io::load_spectrum(&clean).unwrap();
    let b = specdn::io::load_spectrum(&out).unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-6), "{x} vs {y}");
    }
}

#[test]
fn ablate_emits_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", &SMOKE_TRAIN.replace("depth = 2\n", ""));
    let out = ok(&[
        "ablate",
        "--depths",
        "2,1",
        "--seeds",
        "2",
        "--config",
        p(&cfg),
        "--quiet",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "depth,seed_index,val_loss");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("1,0,"));
}

#[test]
fn experiment_figs_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("figs");
    ok(&["experiment", "figs", "--scale", "smoke", "--out", p(&out), "--quiet"]);
    for f in [
        "model.dnw",
        "fig2_lc.spx",
        "fig2_lc_sm.spx",
        "fig2_lc_nn.spx",
        "fig2_hc.spx",
        "fig2_lc_d2.spx",
        "fig2_hc_d2.spx",
        "fig3_mdc_fits.csv",
        "fig3_trace_rms.csv",
        "fig4b_depth.csv",
        "fig6b_blur.csv",
        "fig7_loss.csv",
        "fig8_history.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let header = |f: &str| {
        std::fs::read_to_string(out.join(f))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header("fig4b_depth.csv"), "depth,seed_index,val_loss");
    assert_eq!(header("fig6b_blur.csv"), "seed,trained_with_blur,trained_without_blur");
    assert_eq!(header("fig7_loss.csv"), "seed,combined_ms_ssim,mse_ms_ssim");
    assert_eq!(header("fig8_history.csv"), "epoch,train_loss,val_loss");
    assert!(header("fig3_mdc_fits.csv").starts_with("panel,energy,peak_position"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let usage = specdn(&["synth", "--height", "10", "--width", "10"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("error kind=usage"));

    let bad_cfg = write_config(d, "bad.cfg", "no_such_key = 1\n");
    let cfg = specdn(&["train", "--config", p(&bad_cfg), "--out", p(&d.join("m.dnw"))]);
    assert_eq!(cfg.status.code(), Some(2));

    let garbage = d.join("garbage.spx");
    std::fs::write(&garbage, b"not a spectrum").unwrap();
    let data = specdn(&[
        "smooth",
        "--in",
        p(&garbage),
        "--sigma",
        "1",
        "--out",
        p(&d.join("x.spx")),
    ]);
    assert_eq!(data.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&data.stderr).contains("error kind=format"));

    let missing = specdn(&["d2", "--in", p(&d.join("absent.spx")), "--out", p(&d.join("y.spx"))]);
    assert_eq!(missing.status.code(), Some(3));

    let diverge = write_config(d, "div.cfg", &format!("{SMOKE_TRAIN}lr_initial = 1e30\n"));
    let div = specdn(&[
        "train",
        "--config",
        p(&diverge),
        "--out",
        p(&d.join("z.dnw")),
        "--quiet",
    ]);
    assert_eq!(div.status.code(), Some(4), "{}", String::from_utf8_lossy(&div.stderr));
}
