use std::process::Command;

fn pszeros() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pszeros"))
}

fn write_scenario(dir: &std::path::Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("s.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = pszeros().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stdout) + String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_scenario(
        tmp.path(),
        "name = \"x\"\npipelines = [\"exact\"]\nsides = [3]\nbogus = 1\n[model]\nkind = \"ising\"\nd = 2\nJ = 1.0\n",
    );
    let out = pszeros()
        .arg("--scenario")
        .arg(&p)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn side_below_box_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_scenario(
        tmp.path(),
        "name = \"x\"\npipelines = [\"exact\"]\nsides = [2]\n[model]\nkind = \"ising\"\nd = 2\nJ = 1.0\n",
    );
    let out = pszeros()
        .arg("--scenario")
        .arg(&p)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("below 2R+1"));
}

#[test]
fn oversized_bijection_exceeds_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_scenario(
        tmp.path(),
        "name = \"x\"\npipelines = [\"bijection\"]\nsides = [5]\n[model]\nkind = \"ising\"\nd = 2\nJ = 1.0\n",
    );
    let out = pszeros()
        .arg("--scenario")
        .arg(&p)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn preset_writes_manifest_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    let out = pszeros()
        .args(["--preset", "bijection-check", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert!(files.iter().any(|f| f["path"] == "summary.json"));
    assert!(files.iter().any(|f| f["path"] == "bijection_L3.json"));
}

#[test]
fn unknown_preset_is_a_config_error() {
    let out = pszeros().args(["--preset", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
