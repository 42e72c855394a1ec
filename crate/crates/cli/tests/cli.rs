use std::path::Path;
use std::process::{Command, Output};

fn neo(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neo"))
        .args(["--preset", "tiny", "--threads", "1", "--out"])
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_upstream_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = neo(dir.path(), &["fit-field"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("stage fit-field failed") && e.contains("missing artifact"), "{e}");
}

#[test]
fn stages_skip_when_current_and_refuse_stale_inputs() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["scene-gen", "render-train"] {
        let o = neo(dir.path(), &[stage]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = neo(dir.path(), &["render-train"]);
    assert!(stderr(&o).contains("up to date"), "{}", stderr(&o));

    // a different seed changes the expected hash of the renders
    let o = neo(dir.path(), &["--seed", "99", "fit-field"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("stale artifact") && e.contains("--force"), "{e}");
    let o = neo(dir.path(), &["--seed", "99", "--force", "fit-field"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("field/provenance.json").exists());
}

#[test]
fn config_file_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    let o = neo(dir.path(), &["init-config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = neo(dir.path(), &["--config", cfg.to_str().unwrap(), "scene-gen"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let text = std::fs::read_to_string(&cfg).unwrap().replacen("\"width\": 40", "\"width\": 38", 1);
    std::fs::write(&cfg, text).unwrap();
    let o = neo(dir.path(), &["--config", cfg.to_str().unwrap(), "scene-gen"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config"), "{}", stderr(&o));
}
