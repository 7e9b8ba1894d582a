use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use clap::Parser;
use qsep::dsp::{read_wav, write_wav, WavFormat, Waveform};
use qsep::model::Preset;
use qsep_cli::{alpha_grid, resolve_train_setup, Cli, Command as Sub};

fn qsep<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsep")).args(args).output().unwrap()
}

fn ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = qsep(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = qsep(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A mini-preset checkpoint trained for a few steps, shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let run = root.join("run");
        ok(&["train", "--preset", "mini", "--iterations", "4", "--checkpoint-every", "2", "--out", s(&run), "--log-every", "0"]);
        ok(&["gen-data", "--preset", "mini", "--out", s(&root.join("stems")), "--tracks", "2"]);
        let stems = root.join("stems");
        let mix = {
            let a = read_wav(&stems.join("vocals/track000.wav"), 4000).unwrap();
            let b = read_wav(&stems.join("bass/track000.wav"), 4000).unwrap();
            a.add(&b)
        };
        write_wav(&root.join("mix.wav"), &mix, WavFormat::Float32).unwrap();
        Fixture {
            _dir: dir,
            ckpt: run.join("final.qsep"),
            root,
        }
    })
}

#[test]
fn gen_data_writes_class_dirs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen-data", "--preset", "mini", "--out", s(&a)]);
    ok(&["gen-data", "--preset", "mini", "--out", s(&b)]);
    let dirs = |p: &Path| {
        let mut v: Vec<String> = std::fs::read_dir(p)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    assert_eq!(dirs(&a), vec!["bass", "drums", "other", "vocals"]);
    assert_eq!(
        std::fs::read(a.join("manifest.txt")).unwrap(),
        std::fs::read(b.join("manifest.txt")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("drums/track003.wav")).unwrap(),
        std::fs::read(b.join("drums/track003.wav")).unwrap()
    );
    let six = dir.path().join("six");
    ok(&["gen-data", "--preset", "mini", "--classes", "6", "--out", s(&six)]);
    assert_eq!(dirs(&six).len(), 6);
}

#[test]
fn train_writes_log_and_checkpoints() {
    let f = fixture();
    let run = f.root.join("run");
    let log = std::fs::read_to_string(run.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.split('\t').count() == 6));
    assert!(run.join("ckpt_00000002.qsep").exists());
    assert!(f.ckpt.exists());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = f.root.join("run");
    std::fs::copy(run.join("loss.tsv"), dir.path().join("loss.tsv")).unwrap();
    ok(&[
        "train",
        "--checkpoint",
        s(&run.join("ckpt_00000002.qsep")),
        "--iterations",
        "4",
        "--out",
        s(dir.path()),
        "--log-every",
        "0",
    ]);
    assert_eq!(
        std::fs::read(dir.path().join("final.qsep")).unwrap(),
        std::fs::read(&f.ckpt).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("loss.tsv")).unwrap(),
        std::fs::read(run.join("loss.tsv")).unwrap()
    );
    let err = fails(&["train", "--checkpoint", s(&f.ckpt), "--seed", "3", "--out", s(dir.path())]);
    assert!(err.starts_with("error:"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# mini run\npreset=mini\nlatent_dim=4\nlambda_kl=0.5\nseed=11\niterations=9\n").unwrap();
    let parse = |extra: &[&str]| {
        let mut args = vec!["qsep", "train", "--config", s(&cfg), "--out", "x"];
        args.extend_from_slice(extra);
        match Cli::try_parse_from(args).unwrap().command {
            Sub::Train(a) => resolve_train_setup(&a).unwrap(),
            _ => unreachable!(),
        }
    };
    let base = parse(&[]);
    assert_eq!(base.config.preset, Preset::Mini);
    assert_eq!(base.config.latent_dim, 4);
    assert_eq!(base.hyper.lambda_kl, 0.5);
    assert_eq!((base.seed, base.iterations), (11, 9));
    let over = parse(&["--seed", "5", "--iterations", "2", "--preset", "desk"]);
    assert_eq!((over.seed, over.iterations), (5, 2));
    assert_eq!(over.config.preset, Preset::Desk);
    assert_eq!(over.config.latent_dim, 4);

    std::fs::write(&cfg, "bogus_key=1\n").unwrap();
    let err = fails(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(err.contains("bogus_key"));
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    let help = ok(&["train", "--help"]);
    for flag in ["--preset", "--seed", "--iterations", "--checkpoint", "--data-dir", "--config", "--out"] {
        assert!(help.contains(flag), "{flag}");
    }
    assert!(help.contains("default: 5000"));
    let sep = ok(&["separate", "--help"]);
    for flag in ["--mixture", "--query", "--class", "--rounds", "--retrieve"] {
        assert!(sep.contains(flag), "{flag}");
    }
    assert!(ok(&["interpolate", "--help"]).contains("[default: 5]"));
    let out = qsep(&["train", "--out", "x", "--bogus"]);
    assert!(!out.status.success());
}

#[test]
fn encode_gives_one_row() {
    let f = fixture();
    let csv = ok(&["encode", "--checkpoint", s(&f.ckpt), "--audio", s(&f.root.join("stems/vocals/track001.wav"))]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "label,z_0,z_1,z_2");
    assert!(lines[1].starts_with("track001,"));
    assert_eq!(lines[1].split(',').count(), 4);
    assert_eq!(csv, ok(&["encode", "--checkpoint", s(&f.ckpt), "--audio", s(&f.root.join("stems/vocals/track001.wav"))]));
}

#[test]
fn interpolate_writes_alpha_grid() {
    let f = fixture();
    let out = f.root.join("interp");
    let stdout = ok(&[
        "interpolate",
        "--checkpoint",
        s(&f.ckpt),
        "--mixture",
        s(&f.root.join("mix.wav")),
        "--query-a",
        s(&f.root.join("stems/vocals/track000.wav")),
        "--query-b",
        s(&f.root.join("stems/bass/track000.wav")),
        "--steps",
        "5",
        "--out",
        s(&out),
    ]);
    let alphas: Vec<f64> = stdout.lines().map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(alphas, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    for i in 0..5 {
        let w = read_wav(&out.join(format!("interp_{i:02}.wav")), 4000).unwrap();
        assert_eq!(w.len(), 256);
    }
    assert_eq!(alpha_grid(2).unwrap(), vec![0.0, 1.0]);
    assert!(alpha_grid(0).is_err());
}

#[test]
fn separate_modes() {
    let f = fixture();
    let mix = f.root.join("mix.wav");
    let query = f.root.join("stems/vocals/track001.wav");
    let out = |name: &str| f.root.join(format!("{name}.wav"));
    let base = ["separate", "--checkpoint", s(&f.ckpt), "--mixture", s(&mix)];
    let with = |extra: &[&str]| -> Vec<String> {
        base.iter().chain(extra).map(|a| a.to_string()).collect()
    };
    ok(&with(&["--query", s(&query), "--out", s(&out("q"))]));
    ok(&with(&["--class", "vocals", "--out", s(&out("c"))]));
    ok(&with(&["--query", s(&query), "--retrieve", "--out", s(&out("r"))]));
    ok(&with(&["--class", "bass", "--rounds", "2", "--out", s(&out("i"))]));
    for n in ["q", "c", "r", "i"] {
        let w = read_wav(&out(n), 4000).unwrap();
        assert_eq!(w.len(), 256);
        assert!(w.samples.iter().all(|v| v.is_finite()));
    }
    ok(&with(&["--query", s(&query), "--out", s(&out("q2"))]));
    assert_eq!(std::fs::read(out("q")).unwrap(), std::fs::read(out("q2")).unwrap());

    let err = fails(&with(&["--class", "kazoo", "--out", s(&out("x"))]));
    assert!(err.contains("kazoo"));
    assert_eq!(err.trim_end().lines().count(), 1);
    fails(&with(&["--out", s(&out("x"))]));
    fails(&with(&["--query", s(&query), "--class", "bass", "--out", s(&out("x"))]));
}

#[test]
fn errors_are_one_line_diagnostics() {
    let f = fixture();
    let missing = fails(&[
        "encode",
        "--checkpoint",
        s(&f.root.join("nope.qsep")),
        "--audio",
        s(&f.root.join("mix.wav")),
    ]);
    assert!(missing.starts_with("error:") && missing.contains("nope.qsep"));
    assert_eq!(missing.trim_end().lines().count(), 1);

    let junk = f.root.join("junk.wav");
    std::fs::write(&junk, b"not a wav file").unwrap();
    let bad = fails(&["encode", "--checkpoint", s(&f.ckpt), "--audio", s(&junk)]);
    assert!(bad.starts_with("error:"));

    let rate = f.root.join("rate.wav");
    write_wav(&rate, &Waveform::new(vec![0.1; 64], 8000), WavFormat::Pcm16).unwrap();
    assert!(fails(&["encode", "--checkpoint", s(&f.ckpt), "--audio", s(&rate)]).contains("8000"));

    let out = Command::new(env!("CARGO_BIN_EXE_qsep"))
        .args(["encode", "--checkpoint", s(&f.ckpt), "--audio", s(&f.root.join("mix.wav"))])
        .env("QSEP_THREADS", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn eval_and_export() {
    let f = fixture();
    let tsv = f.root.join("report.tsv");
    let table = ok(&[
        "eval",
        "--checkpoint",
        s(&f.ckpt),
        "--mode",
        "mean,gt,retrieved,iterative2",
        "--mixtures",
        "6",
        "--out",
        s(&tsv),
    ]);
    assert!(table.contains("Ours (mean)") && table.contains("Ours (iterative2)"));
    let mean = std::fs::read_to_string(f.root.join("report_mean.tsv")).unwrap();
    assert_eq!(mean.lines().count(), 2 + 6 * 4);

    let csv = f.root.join("latents.csv");
    ok(&["export-latents", "--checkpoint", s(&f.ckpt), "--stems", s(&f.root.join("stems")), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 2 * 4);
    ok(&["export-latents", "--checkpoint", s(&f.ckpt), "--track-means", "--out", s(&csv)]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 4 * 8);
}
