use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[basis]
age = 7
time = 4
lon = 4
lat = 4
age_reduced = 5
time_reduced = 4
shock_years = []
infant = false

[penalty]
lambda_a = 10.0
lambda_t = 10.0
lambda_lon = 1.0
lambda_lat = 1.0
lambda_a_reduced = 10.0
kappa = 1.0

[bootstrap]
draws = 80
seed = 4

[scenario]
age_min = 50
age_max = 79
year_min = 2010
year_max = 2014
n_areas = 9
mean_exposure = 800.0
seed = 12
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mortsurf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("config.toml"), config).unwrap();
        Workspace { _dir: dir, root }
    }

    fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    fn artifact(&self) -> PathBuf {
        self.root.join("out/model.msrf")
    }

    fn simulate(&self) {
        let o = run(&["simulate", s(&self.config())]);
        assert!(o.status.success(), "{}", stderr(&o));
    }

    fn fitted(config: &str) -> Self {
        let w = Workspace::new(config);
        w.simulate();
        let o = run(&["fit", s(&w.config())]);
        assert!(o.status.success(), "{}", stderr(&o));
        w
    }
}

/// Data rows of a CSV output, keyed by header name; comment lines skipped.
fn table(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            header
                .iter()
                .cloned()
                .zip(rec.iter().map(str::to_string))
                .collect()
        })
        .collect()
}

fn num(row: &HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

#[test]
fn help_version_and_usage_errors() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        run(&["derive", "x.msrf", "nonsense"]).status.code(),
        Some(1)
    );
}

#[test]
fn missing_config_is_a_data_error() {
    let o = run(&["fit", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let w = Workspace::new("[basis]\nages = 3\n");
    let o = run(&["fit", s(&w.config())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ages"), "{}", stderr(&o));
}

#[test]
fn missing_centroid_names_the_area() {
    let w = Workspace::new(CONFIG);
    w.simulate();
    let path = w.root.join("centroids.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("A4,")).collect();
    assert_eq!(kept.len() + 1, text.lines().count());
    std::fs::write(&path, kept.join("\n")).unwrap();
    let o = run(&["fit", s(&w.config())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown area: A4"), "{}", stderr(&o));
    assert!(!w.artifact().exists());
}

#[test]
fn end_to_end_outputs_are_consistent() {
    let w = Workspace::fitted(CONFIG);
    let artifact = w.artifact();
    let out = w.root.join("out");
    for args in [
        vec!["derive", s(&artifact), "e0"],
        vec![
            "derive",
            s(&artifact),
            "change",
            "--from",
            "2010",
            "--to",
            "2014",
        ],
        vec![
            "derive",
            s(&artifact),
            "significance",
            "--years",
            "2012,2014",
        ],
        vec!["derive", s(&artifact), "id"],
    ] {
        let o = run(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }

    let e0 = table(&out.join("e0.csv"));
    assert_eq!(e0.len(), 9 * 5);
    let by_key: HashMap<(String, String), f64> = e0
        .iter()
        .map(|r| ((r["area_id"].clone(), r["year"].clone()), num(r, "e0")))
        .collect();
    for r in &e0 {
        assert!(num(r, "lo") <= num(r, "e0") + 0.5 && num(r, "e0") <= num(r, "hi") + 0.5);
        assert!(num(r, "lo") <= num(r, "hi"));
    }

    for r in table(&out.join("change.csv")) {
        let a = by_key[&(r["area_id"].clone(), "2010".to_string())];
        let b = by_key[&(r["area_id"].clone(), "2014".to_string())];
        assert_eq!(num(&r, "e0_from"), a);
        assert_eq!(num(&r, "e0_to"), b);
        assert!((num(&r, "change") - (b - a)).abs() < 1e-9);
        assert!(["below", "overlap", "above"].contains(&r["label"].as_str()));
    }

    let sig = table(&out.join("significance.csv"));
    assert_eq!(sig.len(), 9 * 2);
    for r in &sig {
        let (lo, hi, rlo, rhi) = (
            num(r, "lo"),
            num(r, "hi"),
            num(r, "ref_lo"),
            num(r, "ref_hi"),
        );
        let expected = if hi < rlo {
            "below"
        } else if lo > rhi {
            "above"
        } else {
            "overlap"
        };
        assert_eq!(r["label"], expected);
    }

    let ids = table(&out.join("id.csv"));
    assert_eq!(ids.len(), 30 * 5);
    assert!(ids.iter().all(|r| (0.0..=1.0).contains(&num(r, "id"))));

    let text = std::fs::read_to_string(out.join("e0.csv")).unwrap();
    assert!(text.starts_with("# mortsurf "), "{text}");
}

#[test]
fn derive_rejects_years_outside_the_fit() {
    let w = Workspace::fitted(CONFIG);
    let o = run(&["derive", s(&w.artifact()), "e0", "--years", "2030"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("outside fitted range"),
        "{}",
        stderr(&o)
    );
    let o = run(&["derive", s(&w.artifact()), "change", "--from", "2010"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn damaged_artifact_is_rejected() {
    let w = Workspace::fitted(CONFIG);
    let mut bytes = std::fs::read(w.artifact()).unwrap();
    bytes[4] = 9;
    let bad = w.root.join("bad.msrf");
    std::fs::write(&bad, &bytes).unwrap();
    let o = run(&["derive", s(&bad), "e0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version 9"), "{}", stderr(&o));
}

#[test]
fn validation_by_groups() {
    let w = Workspace::fitted(CONFIG);
    let grouping = w.root.join("groups.csv");
    let mut text = String::from("area_id,group_id\n");
    for j in 0..9 {
        text.push_str(&format!("A{j},G{}\n", j % 3));
    }
    std::fs::write(&grouping, &text).unwrap();
    let o = run(&["validate", s(&w.artifact()), s(&grouping)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = table(&w.root.join("out/validation.csv"));
    assert_eq!(rows.len(), 3 * 5);

    let partial = w.root.join("partial.csv");
    std::fs::write(&partial, "area_id,group_id\nA0,G0\n").unwrap();
    let o = run(&["validate", s(&w.artifact()), s(&partial)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("A1"), "{}", stderr(&o));
}

#[test]
fn one_point_grid_selects_that_point() {
    let config = CONFIG.replace(
        "[penalty]\nlambda_a = 10.0\nlambda_t = 10.0\nlambda_lon = 1.0\nlambda_lat = 1.0\nlambda_a_reduced = 10.0\nkappa = 1.0\n",
        "[grid]\nlambda_a = [3.0]\nlambda_t = [4.0]\nlambda_lon = [5.0]\nlambda_lat = [6.0]\nlambda_a_reduced = [7.0]\nkappa = [8.0]\n",
    );
    assert_ne!(config, CONFIG);
    let w = Workspace::new(&config);
    w.simulate();
    let o = run(&["grid", s(&w.config())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = w.root.join("out");
    assert_eq!(table(&out.join("stage1.csv")).len(), 1);
    assert_eq!(table(&out.join("stage2.csv")).len(), 1);
    let best: toml::Value =
        toml::from_str(&std::fs::read_to_string(out.join("best.toml")).unwrap()).unwrap();
    let get = |k: &str| {
        best.get(k)
            .or_else(|| best.get("penalty").and_then(|p| p.get(k)))
            .unwrap()
            .as_float()
            .unwrap()
    };
    assert_eq!(
        [
            get("lambda_a"),
            get("lambda_t"),
            get("lambda_lon"),
            get("lambda_lat"),
            get("lambda_a_reduced"),
            get("kappa")
        ],
        [3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
    );

    let o = run(&["fit", s(&w.config())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("kappa=8"), "{text}");
}

#[test]
fn workers_flag_does_not_change_results() {
    let a = Workspace::fitted(CONFIG);
    let b = Workspace::new(CONFIG);
    b.simulate();
    let o = run(&["--workers", "3", "fit", s(&b.config())]);
    assert!(o.status.success(), "{}", stderr(&o));
    for w in [&a, &b] {
        let o = run(&["--workers", "2", "derive", s(&w.artifact()), "e0"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    // The worker override enters the config hash, so compare past the comment.
    let body = |w: &Workspace| {
        let text = std::fs::read_to_string(w.root.join("out/e0.csv")).unwrap();
        text.lines().skip(1).collect::<Vec<_>>().join("\n")
    };
    assert!(body(&a) == body(&b));
}
