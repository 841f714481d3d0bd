use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const M0: f64 = 3e-6;

struct Run {
    dir: TempDir,
    output: Output,
}

impl Run {
    fn code(&self) -> i32 {
        self.output.status.code().expect("terminated by signal")
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.output.stderr).into_owned()
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn json(&self, name: &str) -> Value {
        let text = fs::read_to_string(self.out().join(name)).unwrap_or_else(|e| panic!("{name}: {e}\n{}", self.stderr()));
        serde_json::from_str(&text).unwrap()
    }

    fn csv(&self, name: &str) -> Vec<Vec<String>> {
        let mut rdr = csv::Reader::from_path(self.out().join(name)).unwrap();
        rdr.records()
            .map(|r| r.unwrap().iter().map(str::to_string).collect())
            .collect()
    }

    fn bytes(&self, name: &str) -> Vec<u8> {
        fs::read(self.out().join(name)).unwrap()
    }
}

fn invoke(command: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plaquenet"))
        .arg(command)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn run_with(command: &str, config: &str, file_name: &str, extra: &[&str]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(file_name);
    fs::write(&path, config).unwrap();
    let output = invoke(command, &path, &dir.path().join("out"), extra);
    Run { dir, output }
}

fn run(command: &str, config: &str) -> Run {
    run_with(command, config, "run.toml", &[])
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

#[test]
fn in_vitro_run_saturates() {
    let r = run(
        "simulate",
        "[model]\nvariant = \"in_vitro\"\nn_max = 200\n[solver]\nt_end_h = 10\nsamples = 20\n[output]\nsizes = [2, 50]\n",
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let s = r.json("summary.json");
    assert!(f(&s["final_M"]) / M0 > 0.999, "{}", s["final_M"]);
    assert!(f(&s["halftime_h"]) < 10.0);
    let rows = r.csv("trajectory.csv");
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[0].len(), 6);
    for row in &rows {
        let m: f64 = row[1].parse().unwrap();
        let mass: f64 = row[3].parse().unwrap();
        assert!(((m + mass) / M0 - 1.0).abs() < 1e-8);
    }
}

#[test]
fn supercritical_clearance_clears_the_seed() {
    let r = run(
        "simulate",
        "[model]\nseed_p2_M = 3e-10\n[clearance]\nlaw = \"constant\"\nlambda_per_h = 13000\n[solver]\nt_end_h = 10\nsamples = 10\n",
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let s = r.json("summary.json");
    assert!(f(&s["final_M"]).abs() < 1e-6 * M0, "{}", s["final_M"]);
}

#[test]
fn dosing_regime_drives_the_moment_system() {
    let r = run(
        "simulate",
        "[model]\nsystem = \"moments\"\n[therapy.regime]\nlambda_drug_per_h = 40\nperiod_days = 2\nlambda_a_per_h = 10\n[solver]\nt_end_days = 4\nsamples = 96\n",
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let s = r.json("summary.json");
    assert_eq!(f(&s["t_end_h"]), 96.0);
    let expected = 40.0 * 14.0 * (1.0 - (-2.0f64).exp());
    assert!((f(&s["c_max"]) - expected).abs() < 1e-9 * expected);
    assert_eq!(r.csv("trajectory.csv").len(), 97);
}

#[test]
fn malformed_configs_exit_with_code_2() {
    let r = run("simulate", "[model]\nn_max = 50\nbogus = true\n");
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("line 3"), "{}", r.stderr());

    let r = run_with("simulate", "{\"model\": {\"n_max\": }}", "run.json", &[]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("line 1"), "{}", r.stderr());

    let r = run("simulate", "[clearance]\nlaw = \"constant\"\nlambda = 5.0\n");
    assert_eq!(r.code(), 2, "{}", r.stderr());

    let r = run("simulate", "[model]\nvariant = \"in_vivo\"\n");
    assert_eq!(r.code(), 2, "{}", r.stderr());

    let r = run("network", "");
    assert_eq!(r.code(), 2, "{}", r.stderr());
}

#[test]
fn analysis_reports_thresholds() {
    let r = run("analyze", "[analysis]\nlambdas_per_h = [1000, 20000]\n");
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let a = r.json("analysis.json");
    let cc = &a["critical_clearance"]["constant"];
    let formula = f(&cc["moment_based"]);
    assert!((formula / 12705.0 - 1.0).abs() < 0.01, "{formula}");
    assert!((f(&cc["numeric"]) / formula - 1.0).abs() < 0.02);

    let ratios: Vec<f64> = a["inhibition"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| f(&e["constant_ratio"]))
        .collect();
    assert_eq!(ratios.len(), 4);
    assert!(ratios.windows(2).all(|w| w[0] < w[1]), "{ratios:?}");
    assert_eq!(*ratios.last().unwrap(), 1.0);

    let fixed = a["fixed_points"].as_array().unwrap();
    assert_eq!(fixed[0]["exists"], Value::Bool(true));
    assert_eq!(fixed[1]["exists"], Value::Bool(false));
    let rows = r.csv("steady_state.csv");
    assert_eq!(rows.len(), 199);
    assert!(rows.iter().all(|row| row[0] == "1000.0"));
}

#[test]
fn analysis_without_secondary_nucleation() {
    let r = run("analyze", "[model.params]\nk_2 = 0.0\n");
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let a = r.json("analysis.json");
    assert_eq!(f(&a["critical_clearance"]["constant"]["moment_based"]), 0.0);
    assert_eq!(f(&a["critical_clearance"]["constant"]["numeric"]), 0.0);
    assert_eq!(f(&a["critical_clearance"]["linear_in_size"]["numeric"]), 0.0);
}

const PATH_NETWORK: &str = r#"
[model]
n_max = 60
seed_p2_M = 3e-6
[clearance]
law = "constant"
lambda_per_h = 1000
[network]
theta = 0.01
[network.connectome]
kind = "path"
n_nodes = 6
[network.diffusion]
law = "constant"
rho_per_h = 0.01
[solver]
t_end_h = 0.01
samples = 10
"#;

fn invasion_ranking(r: &Run) -> (Vec<usize>, Vec<f64>) {
    let rows = r.csv("invasion.csv");
    let nodes = rows.iter().map(|row| row[1].parse().unwrap()).collect();
    let times = rows.iter().map(|row| row[3].parse().unwrap()).collect();
    (nodes, times)
}

#[test]
fn path_invasion_follows_the_path() {
    let r = run("network", PATH_NETWORK);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let (nodes, times) = invasion_ranking(&r);
    assert_eq!(nodes, vec![0, 1, 2, 3, 4, 5]);
    assert!(times.windows(2).all(|w| w[0] < w[1]), "{times:?}");
    assert_eq!(r.csv("network.csv").len(), 11 * 6);

    let cube = PATH_NETWORK.replace("law = \"constant\"\nrho_per_h", "law = \"cube_inverse\"\nrho_0_per_h");
    let q = run("network", &cube);
    assert_eq!(q.code(), 0, "{}", q.stderr());
    let (cube_nodes, cube_times) = invasion_ranking(&q);
    assert_eq!(cube_nodes, nodes);
    assert!(cube_times[1..].iter().zip(&times[1..]).all(|(c, t)| c > t));
}

#[test]
fn long_format_dump_and_unknown_seed_label() {
    let config = PATH_NETWORK.replace("samples = 10", "samples = 4\n[output]\nlong_format = true\nsizes = [2, 3, 10]");
    let r = run("network", &config);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    assert_eq!(r.csv("network_sizes.csv").len(), 5 * 6 * 3);

    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("edges.csv"), "source,target,weight\n0,1,1.0\n1,2,1.0\n").unwrap();
    fs::write(dir.path().join("nodes.csv"), "index,label\n0,entorhinal cortex\n1,a\n2,b\n").unwrap();
    let base = PATH_NETWORK
        .replace("kind = \"path\"\nn_nodes = 6", "kind = \"file\"\nedges = \"edges.csv\"\nlabels = \"nodes.csv\"");
    let good = base.replace("[network]\n", "[network]\nseed_node = \"entorhinal cortex\"\n");
    let bad = base.replace("[network]\n", "[network]\nseed_node = \"hippocampus\"\n");
    for (text, code) in [(good, 0), (bad, 2)] {
        let path = dir.path().join("run.toml");
        fs::write(&path, text).unwrap();
        let out = invoke("network", &path, &dir.path().join("out"), &[]);
        assert_eq!(out.status.code(), Some(code), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let rows = csv::Reader::from_path(dir.path().join("out/invasion.csv"))
        .unwrap()
        .records()
        .next()
        .unwrap()
        .unwrap();
    assert_eq!(&rows[2], "entorhinal cortex");
}

const SMALL_WORLD: &str = r#"
seed = 7
[model]
n_max = 100
seed_p2_M = 1e-10
[clearance]
law = "constant"
lambda_per_h = 10500
[network]
theta = 5e-4
[network.connectome]
kind = "small_world"
n_nodes = 20
k = 4
rewire = 0.1
[network.diffusion]
law = "constant"
rho_per_h = 0.01
[solver]
t_end_h = 0.05
samples = 5
"#;

#[test]
fn kinetic_inhibition_prevents_network_invasion() {
    let untreated = run("network", SMALL_WORLD);
    assert_eq!(untreated.code(), 0, "{}", untreated.stderr());
    let treated = run("network", &SMALL_WORLD.replace("[network]\n", "[therapy.drug]\ndelta_k = 0.5\n[network]\n"));
    assert_eq!(treated.code(), 0, "{}", treated.stderr());
    assert_eq!(untreated.json("summary.json")["invaded"], 20);
    assert_eq!(treated.json("summary.json")["invaded"], 0);
}

const OPTIMIZE: &str = r#"
[optimize]
lambda_a_per_h = 10
periods_days = [0.2, 0.5, 1, 2, 7]
lambdas_per_h = [5, 25, 50]
c_max_target = 100
"#;

#[test]
fn optimize_picks_the_shortest_period() {
    let r = run("optimize", OPTIMIZE);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let o = r.json("optimum.json");
    assert_eq!(f(&o["period_days"]), 0.2);
    assert!((f(&o["c_max"]) - 100.0).abs() < 1e-6 * 100.0);
    assert!((f(&o["m_bar"]) / 3.79 - 1.0).abs() < 0.1, "{}", o["m_bar"]);
    assert_eq!(r.csv("contour.csv").len(), 5 * 3);

    let again = run("optimize", OPTIMIZE);
    assert_eq!(r.bytes("contour.csv"), again.bytes("contour.csv"));
    assert_eq!(r.bytes("optimum.json"), again.bytes("optimum.json"));
    let serial = run_with("optimize", OPTIMIZE, "run.toml", &["--threads", "1"]);
    assert_eq!(r.bytes("contour.csv"), serial.bytes("contour.csv"));
}

#[test]
fn infeasible_target_exits_with_code_4() {
    let r = run("optimize", "[optimize]\nlambda_a_per_h = 10\nperiods_days = [1, 7]\nc_max_target = 1e5\n");
    assert_eq!(r.code(), 4);
    assert!(r.stderr().contains("achievable range"), "{}", r.stderr());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let r = run("network", PATH_NETWORK);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let echoed = r.json("summary.json")["config"].to_string();
    let again = run_with("network", &echoed, "echo.json", &[]);
    assert_eq!(again.code(), 0, "{}", again.stderr());
    assert_eq!(r.bytes("network.csv"), again.bytes("network.csv"));
    assert_eq!(r.bytes("invasion.csv"), again.bytes("invasion.csv"));
    assert_eq!(r.bytes("summary.json"), again.bytes("summary.json"));
}
