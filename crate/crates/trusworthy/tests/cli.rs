use std::process::{Command, Output};

fn trusworthy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trusworthy"))
        .args(args)
        .env_remove("TRUSWORTHY_DEVICE")
        .output()
        .unwrap()
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let out = trusworthy(&["--set", "mil.depth=3", "show-config"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mil.depth"));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    assert_eq!(trusworthy(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(trusworthy(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = trusworthy(&["--outdir", dir.path().to_str().unwrap(), "preprocess"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn paper_preset_echoes_published_hyperparameters() {
    let out = trusworthy(&["--preset", "paper", "show-config"]);
    assert!(out.status.success());
    let doc: toml::Value = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let get = |path: &str| {
        path.split('.')
            .fold(&doc, |v, k| v.get(k).unwrap_or_else(|| panic!("missing {path}")))
            .clone()
    };
    assert_eq!(get("roi.bag_size").as_integer(), Some(55));
    assert_eq!(get("roi.roi_size_mm").as_float(), Some(5.0));
    assert_eq!(get("ssl.epochs").as_integer(), Some(200));
    assert_eq!(get("ssl.batch_size").as_integer(), Some(64));
    assert_eq!(get("ssl.lr").as_float(), Some(1e-5));
    assert_eq!(get("ssl.optimizer").as_str(), Some("novograd"));
    assert_eq!(get("finetune.epochs").as_integer(), Some(15));
    assert_eq!(get("mil.layers").as_integer(), Some(12));
    assert_eq!(get("mil.heads").as_integer(), Some(8));
    assert_eq!(get("mil.model_dim").as_integer(), Some(512));
    assert_eq!(get("mil.mlp_dim").as_integer(), Some(512));
    assert_eq!(get("mil.epochs").as_integer(), Some(75));
    assert_eq!(get("mil.batch_size").as_integer(), Some(8));
    assert_eq!(get("mil.lr").as_float(), Some(1e-4));
    assert_eq!(get("ensemble.members").as_integer(), Some(10));
    assert_eq!(get("ensemble.ratio").as_float(), Some(2.0));
    assert_eq!(get("heatmap.window_mm").as_float(), Some(8.0));
    assert_eq!(get("heatmap.patches_per_window").as_integer(), Some(16));
}

#[test]
fn config_file_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 5\n[ensemble]\nmembers = 4\n").unwrap();
    let out = trusworthy(&["--config", path.to_str().unwrap(), "--seed", "9", "show-config"]);
    let doc: toml::Value = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(doc["seed"].as_integer(), Some(9));
    assert_eq!(doc["ensemble"]["members"].as_integer(), Some(4));
}

#[test]
fn training_commands_read_the_named_split_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let base = [
        "--outdir",
        out_dir.to_str().unwrap(),
        "--set",
        "phantom.n_patients=10",
        "--set",
        "phantom.cores_per_patient=2",
        "--set",
        "ssl.epochs=1",
        "--set",
        "ssl.max_patches=32",
    ];
    let run = |extra: &[&str]| trusworthy(&[&base[..], extra].concat());
    for stage in ["generate", "preprocess", "split"] {
        assert!(run(&[stage]).status.success(), "{stage}");
    }
    let moved = dir.path().join("plan.json");
    std::fs::rename(out_dir.join("split/splits.json"), &moved).unwrap();

    let out = run(&["pretrain", "--fold", "fold0"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("splits.json"));

    let out = run(&["pretrain", "--fold", "fold0", "--split-file", moved.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("pretrain/fold0").is_dir());
}
