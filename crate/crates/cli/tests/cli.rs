use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lska(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lska")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const HEADER: &str = "variant,k,d,channels_or_capacity,params,macs,gflops,wall_ms_mean,wall_ms_stddev,reps,seed";

/// Data rows as field vectors.
fn rows(csv: &str) -> Vec<Vec<String>> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(HEADER));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn cost_module_row() {
    let o = lska(&["cost", "--variant", "lska", "--k", "23", "--channels", "32", "--hw", "7"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), format!("{HEADER}\nlska,23,3,32,1792,87808,8.7808e-5,,,,0\n"));
}

#[test]
fn cost_backbone_gflops() {
    for (variant, expect) in [("lska", 0.84), ("lka-trivial", 1.16)] {
        let o = lska(&["cost", "--variant", variant, "--capacity", "tiny", "--k", "23", "--hw", "224"]);
        assert!(o.status.success());
        let r = &rows(&stdout(&o))[0];
        let g: f64 = r[6].parse().unwrap();
        assert!((g - expect).abs() / expect <= 0.05, "{variant}: {g}");
        assert_eq!(r[3], "tiny");
    }
}

#[test]
fn cost_needs_dilation_for_unknown_k() {
    let o = lska(&["cost", "--variant", "lska", "--k", "13", "--channels", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("13"));
    let o = lska(&["cost", "--variant", "lska", "--k", "15", "--d", "3", "--channels", "8"]);
    assert!(o.status.success());
}

#[test]
fn sweep_grid_ordering_and_determinism() {
    let o = lska(&["sweep", "--capacity", "tiny"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let r = rows(&text);
    assert_eq!(r.len(), 24);
    let keys: Vec<(String, usize)> = r.iter().map(|f| (f[0].clone(), f[1].parse().unwrap())).collect();
    let mut sorted = keys.clone();
    sorted.sort_by_key(|(v, k)| (["lka-trivial", "lska-trivial", "lka", "lska"].iter().position(|x| x == v), *k));
    assert_eq!(keys, sorted);
    assert!(r.iter().all(|f| f[7].is_empty() && f[9].is_empty()));

    let params = |v: &str| -> u64 { r.iter().find(|f| f[0] == v && f[1] == "65").unwrap()[4].parse().unwrap() };
    let (s, st, l, lt) = (params("lska"), params("lska-trivial"), params("lka"), params("lka-trivial"));
    assert!(s < st.min(l) && st.max(l) < lt, "{s} {st} {l} {lt}");

    assert_eq!(stdout(&lska(&["sweep", "--capacity", "tiny"])), text);
}

#[test]
fn sweep_single_point_and_bench() {
    let o = lska(&["sweep", "--variants", "lska", "--ks", "11", "--channels", "8", "--hw", "14"]);
    assert_eq!(rows(&stdout(&o)).len(), 1);

    let o = lska(&[
        "sweep", "--variants", "lka-trivial", "--ks", "7,13:2", "--channels", "4", "--hw", "16", "--bench", "--reps", "3",
        "--seed", "10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = rows(&stdout(&o));
    assert_eq!(r.len(), 2);
    for (i, f) in r.iter().enumerate() {
        assert!(f[7].parse::<f64>().unwrap() > 0.0);
        assert!(f[8].parse::<f64>().unwrap() >= 0.0);
        assert_eq!(f[9], "3");
        assert_eq!(f[10], (10 + i).to_string());
    }
}

#[test]
fn verify_passes_filters_and_catches_fault() {
    let o = lska(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 5);

    let o = lska(&["verify", "--filter", "rank1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("PASS rank1"));

    let o = lska(&["verify", "--inject-fault", "corrupt-vjp"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gradient-check"));
    assert!(stdout(&o).contains("FAIL gradient-check"));
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[..2], b"P5");
    let header: Vec<&str> = std::str::from_utf8(&bytes[..15]).unwrap_or("").split_whitespace().collect();
    let (w, h) = (header[1].parse().unwrap(), header[2].parse().unwrap());
    (w, h, bytes[bytes.len() - w * h..].to_vec())
}

#[test]
fn erf_writes_pgm_and_radius() {
    let dir = TempDir::new().unwrap();
    for n in ["1", "2"] {
        let prefix = dir.path().join(format!("erf_n{n}"));
        let o = lska(&["erf", "--k", "7", "--hw", "64", "--n-inputs", n, "--out", prefix.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));

        let (w, h, pixels) = read_pgm(&prefix.with_extension("pgm"));
        assert_eq!((w, h), (64, 64));
        assert_eq!(pixels.iter().copied().max(), Some(255));

        let csv = fs::read_to_string(dir.path().join(format!("erf_n{n}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("variant,k,d,capacity,n_inputs,seed,hw,mass,erf_radius"));
        let f: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&f[..8], &["lska", "7", "2", "tiny", n, "0", "64", "0.95"]);
        let r: f64 = f[8].parse().unwrap();
        assert!((0.0..=64.0).contains(&r));

        let map = fs::read_to_string(dir.path().join(format!("erf_n{n}_map.csv"))).unwrap();
        let total: f64 = map.lines().flat_map(|l| l.split(',')).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn erf_rejects_bad_size_without_writing() {
    let dir = TempDir::new().unwrap();
    let prefix = dir.path().join("bad");
    let o = lska(&["erf", "--k", "7", "--hw", "50", "--out", prefix.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

struct Lcg(u64);

impl Lcg {
    /// Uniform on (-1, 1); independent of the crate's own RNG.
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

fn write_matrix(path: &Path, m: &[Vec<f64>]) {
    let text: String = m
        .iter()
        .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(path, text).unwrap();
}

fn noise(rng: &mut Lcg, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.next()).collect()).collect()
}

fn probe_rows(out: &str) -> Vec<(String, f64)> {
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("factor,score,dimensionality,percent_of_n"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn probe_identical_shape_pairs_take_the_cap() {
    let dir = TempDir::new().unwrap();
    let mut rng = Lcg(1);
    let shape = noise(&mut rng, 40, 256);
    write_matrix(&dir.path().join("shape_a.csv"), &shape);
    write_matrix(&dir.path().join("shape_b.csv"), &shape);
    write_matrix(&dir.path().join("texture_a.csv"), &noise(&mut rng, 40, 256));
    write_matrix(&dir.path().join("texture_b.csv"), &noise(&mut rng, 40, 256));
    let out = dir.path().join("report.csv");
    let o = lska(&["probe", "--input-dir", dir.path().to_str().unwrap(), "--n", "256", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = probe_rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["shape", "texture", "residual"]);
    assert!(r[0].1 > 0.99 * 256.0);
    assert!((r[1].1 - r[2].1).abs() < 1.0, "{r:?}");
}

#[test]
fn probe_independent_noise_splits_evenly() {
    let dir = TempDir::new().unwrap();
    let mut rng = Lcg(7);
    for f in ["shape_a", "shape_b", "texture_a", "texture_b"] {
        write_matrix(&dir.path().join(format!("{f}.csv")), &noise(&mut rng, 20_000, 8));
    }
    let o = lska(&["probe", "--input-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (_, d) in probe_rows(&stdout(&o)) {
        assert!((d - 8.0 / 3.0).abs() <= 0.05 * 8.0 / 3.0, "{d}");
    }
}

#[test]
fn probe_errors_name_the_file_and_write_nothing() {
    let dir = TempDir::new().unwrap();
    let mut rng = Lcg(3);
    for f in ["shape_a", "shape_b", "texture_a"] {
        write_matrix(&dir.path().join(format!("{f}.csv")), &noise(&mut rng, 10, 4));
    }
    let out = dir.path().join("report.csv");
    let args = ["probe", "--input-dir", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()];

    let o = lska(&args);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("texture_b.csv"));

    write_matrix(&dir.path().join("texture_b.csv"), &noise(&mut rng, 10, 5));
    let o = lska(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("texture_b.csv"));
    assert!(!out.exists());
}

#[test]
fn config_overrides_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.json");
    fs::write(
        &cfg,
        r#"{"capacity":"tiny","stages":[
            {"stride":4,"down_kernel":7,"channels":32,"expansion":8,"depth":3},
            {"stride":2,"down_kernel":3,"channels":64,"expansion":8,"depth":3},
            {"stride":2,"down_kernel":3,"channels":160,"expansion":4,"depth":5},
            {"stride":2,"down_kernel":3,"channels":256,"expansion":4,"depth":2}],
          "attention":{"variant":"lka","k":23,"d":3},"seed":4}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let o = lska(&["cost", "--variant", "lska", "--k", "7", "--channels", "8", "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = &rows(&stdout(&o))[0];
    assert_eq!(&r[..4], &["lka", "23", "3", "tiny"]);
    assert_eq!(r[10], "4");

    fs::write(&cfg, r#"{"capacity":"tiny","stages":[],"attention":{"variant":"lka","k":23,"d":3}}"#).unwrap();
    let o = lska(&["cost", "--config", c]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.json"));
}

#[test]
fn unwritable_destination_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("missing").join("row.csv");
    let o = lska(&["cost", "--variant", "lka", "--k", "7", "--channels", "8", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(lska(&["cost", "--k", "7"]).status.code(), Some(2));
    assert_eq!(lska(&["sweep", "--variants", "nope"]).status.code(), Some(2));
    assert_eq!(lska(&["bogus"]).status.code(), Some(2));
}
