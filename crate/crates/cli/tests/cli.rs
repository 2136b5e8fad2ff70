use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rulecraft_cli::{EXIT_CONFIG, EXIT_DATA, EXIT_INCOMPATIBLE, EXIT_OK};

fn rulecraft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rulecraft"))
        .args(args)
        .env("RULECRAFT_THREADS", "1")
        .output()
        .expect("spawning rulecraft")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Ten triangles where `grand` is `parent` followed by `parent`.
fn write_family(dir: &Path, extra: &str) {
    fs::create_dir_all(dir).unwrap();
    let mut train = String::new();
    for i in 0..10 {
        let (a, b, c) = (format!("a{i}"), format!("b{i}"), format!("c{i}"));
        train += &format!("{a}\tparent\t{b}\n{b}\tparent\t{c}\n{a}\tsibling\t{a}x\n");
        if i < 8 {
            train += &format!("{a}\tgrand\t{c}\n");
        }
    }
    train += extra;
    fs::write(dir.join("train.txt"), train).unwrap();
    fs::write(dir.join("test.txt"), "a8\tgrand\tc8\na9\tgrand\tc9\n").unwrap();
}

fn write_config(path: &Path, data: &Path, out: &Path, iterations: usize) {
    let text = format!(
        "[data]\ndir = {}\n\n[generator]\nmax_rule_len = 2\nembedding_dim = 8\ninput_size = 8\nhidden_size = 8\n\n\
         [pretrain]\nwalks_per_triplet = 4\nsteps = 60\n\n\
         [em]\nrules_per_relation = 40\nselected_per_instance = 5\niterations = {iterations}\ngenerator_steps = 5\n\n\
         [eval]\nrules_per_query = 10\n\n[run]\nthreads = 1\noutput_dir = {}\n",
        data.display(),
        out.display()
    );
    fs::write(path, text).unwrap();
}

#[test]
fn train_export_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out, cfg) = (tmp.path().join("data"), tmp.path().join("out"), tmp.path().join("run.cfg"));
    write_family(&data, "");
    write_config(&cfg, &data, &out, 1);
    let cfg = cfg.to_str().unwrap();

    let train = rulecraft(&["train", "-c", cfg]);
    assert_eq!(code(&train), EXIT_OK, "{}", String::from_utf8_lossy(&train.stderr));
    for name in ["checkpoint-000.ckpt", "checkpoint-001.ckpt", "model.ckpt", "reports.txt", "rules.txt", "config.cfg"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let reports = fs::read_to_string(out.join("reports.txt")).unwrap();
    assert!(reports.lines().next().unwrap().starts_with("phase=pretrain"));
    assert_eq!(reports.lines().filter(|l| l.starts_with("phase=iterate")).count(), 1);

    let ckpt = out.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let export = rulecraft(&["export-rules", "-c", cfg, "--checkpoint", ckpt, "--top", "3"]);
    assert_eq!(code(&export), EXIT_OK);
    let text = String::from_utf8(export.stdout).unwrap();
    for line in text.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "{line}");
        assert!(fields[2].parse::<f64>().unwrap() <= 0.0);
        fields[3].parse::<f64>().unwrap();
    }
    let top_grand = text.lines().find(|l| l.starts_with("grand\t")).unwrap();
    assert!(top_grand.starts_with("grand\tparent parent\t"), "{text}");

    let per_query = tmp.path().join("ranks.tsv");
    let eval = rulecraft(&["evaluate", "-c", cfg, "--checkpoint", ckpt, "--per-query", per_query.to_str().unwrap()]);
    assert_eq!(code(&eval), EXIT_OK, "{}", String::from_utf8_lossy(&eval.stderr));
    let dump = fs::read_to_string(&per_query).unwrap();
    assert!(dump.lines().all(|l| l.split('\t').count() == 5), "{dump}");
    let forward: Vec<&str> = dump.lines().filter(|l| l.split('\t').nth(1) == Some("grand")).collect();
    assert_eq!(forward.len(), 2);
    for line in forward {
        assert_eq!(line.split('\t').nth(3), Some("1"), "{dump}");
    }

    let ground = rulecraft(&["ground", "-c", cfg, "--checkpoint", ckpt, "--head", "a8", "--relation", "grand", "--top", "1"]);
    assert_eq!(code(&ground), EXIT_OK);
    assert!(String::from_utf8(ground.stdout).unwrap().contains("c8"));
}

#[test]
fn zero_iterations_leave_only_the_pretrained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out, cfg) = (tmp.path().join("data"), tmp.path().join("out"), tmp.path().join("run.cfg"));
    write_family(&data, "");
    write_config(&cfg, &data, &out, 0);
    assert_eq!(code(&rulecraft(&["train", "-c", cfg.to_str().unwrap()])), EXIT_OK);
    let mut ckpts: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("checkpoint-"))
        .collect();
    ckpts.sort();
    assert_eq!(ckpts, ["checkpoint-000.ckpt"]);
}

#[test]
fn checkpoint_from_another_vocabulary_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out, cfg) = (tmp.path().join("data"), tmp.path().join("out"), tmp.path().join("run.cfg"));
    write_family(&data, "");
    write_config(&cfg, &data, &out, 0);
    assert_eq!(code(&rulecraft(&["train", "-c", cfg.to_str().unwrap()])), EXIT_OK);

    let other = tmp.path().join("other");
    write_family(&other, "z0\tcousin\tz1\n");
    let other_cfg = tmp.path().join("other.cfg");
    write_config(&other_cfg, &other, &out, 0);
    let ckpt = out.join("model.ckpt");
    let eval = rulecraft(&["evaluate", "-c", other_cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&eval), EXIT_INCOMPATIBLE, "{}", String::from_utf8_lossy(&eval.stderr));
}

#[test]
fn config_errors_are_all_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "[em]\nrules_per_relation = many\nselection = best\n[nope]\nkey = 1\n").unwrap();
    let out = rulecraft(&["train", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_CONFIG);
    let stderr = String::from_utf8_lossy(&out.stderr);
    for needle in ["rules_per_relation", "selection", "nope"] {
        assert!(stderr.contains(needle), "missing {needle}: {stderr}");
    }
}

#[test]
fn command_line_overrides_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out, cfg) = (tmp.path().join("data"), tmp.path().join("out"), tmp.path().join("run.cfg"));
    write_family(&data, "");
    write_config(&cfg, &data, &out, 0);
    let run = rulecraft(&["train", "-c", cfg.to_str().unwrap(), "--em.selected_per_instance", "0"]);
    assert_eq!(code(&run), EXIT_CONFIG);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    write_config(&cfg, &tmp.path().join("absent"), &tmp.path().join("out"), 0);
    assert_eq!(code(&rulecraft(&["train", "-c", cfg.to_str().unwrap()])), EXIT_DATA);
}

#[test]
fn verify_passes() {
    let out = rulecraft(&["verify", "--seed", "3"]);
    assert_eq!(code(&out), EXIT_OK);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 7);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}
