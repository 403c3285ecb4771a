use std::fs;

use pvtv2::io::{save_weights, WeightStore};
use pvtv2::{ModelConfig, PvtModel};
use pvtv2_cli::run;

fn invoke(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("pvtv2").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn describe_lists_stage_settings() {
    let (code, out, _) = invoke(&["describe", "--variant", "B0"]);
    assert_eq!(code, 0);
    assert!(out.contains("C_1 = 32"), "{out}");
    assert!(out.contains("R_1 = 8"));
    assert!(out.contains("total params = 3666760"));
    let (_, li, _) = invoke(&["describe", "--variant", "b2-li"]);
    assert!(li.contains("P_3 = 7"));
}

#[test]
fn describe_reads_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cfg");
    fs::write(&path, "variant = B2\nstage1.attn = linear:7\nnum_classes = 10\n").unwrap();
    let (code, out, err) = invoke(&["describe", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("P_1 = 7") && out.contains("R_2 = 4"));
    assert!(out.contains("num classes = 10"));
}

#[test]
fn cost_total_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("b2.csv");
    let (code, out, _) = invoke(&[
        "cost",
        "--variant",
        "B2",
        "--size",
        "224",
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("TOTAL"));
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("layer,params,macs\n"));
    let total = csv.lines().last().unwrap();
    let fields: Vec<&str> = total.split(',').collect();
    assert_eq!(fields[0], "TOTAL");
    let gmacs = fields[2].parse::<u64>().unwrap() as f64 / 1e9;
    assert!((gmacs - 4.0).abs() / 4.0 <= 0.10, "{gmacs}");
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 3);
        f[1].parse::<u64>().unwrap();
        f[2].parse::<u64>().unwrap();
    }
}

#[test]
fn cost_accepts_rectangular_sizes() {
    let (code, out, _) = invoke(&["cost", "--variant", "B1", "--size", "224x320", "--csv", "-"]);
    assert_eq!(code, 0);
    assert!(out.contains("input 224x320"));
    assert!(out.contains("layer,params,macs"));
}

#[test]
fn sweep_reports_linear_core_growth() {
    let (code, out, _) = invoke(&["sweep", "--variant", "B2-Li", "--sizes", "224,448"]);
    assert_eq!(code, 0);
    let summary = out.lines().find(|l| l.contains("attention-core growth")).unwrap();
    let factor: f64 = summary
        .rsplit("attention-core growth ")
        .next()
        .unwrap()
        .trim_end_matches('x')
        .parse()
        .unwrap();
    assert!(factor <= 4.05, "{summary}");
}

#[test]
fn sweep_csv_parses() {
    let (code, out, _) = invoke(&["sweep", "--variant", "B2,B2-Li", "--sizes", "224,448,896", "--csv", "-"]);
    assert_eq!(code, 0);
    let csv: Vec<&str> = out.lines().skip_while(|l| !l.starts_with("variant,size")).collect();
    assert_eq!(csv.len(), 1 + 6);
    for row in &csv[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), 4);
        assert!(f[2].parse::<u64>().unwrap() > f[3].parse::<u64>().unwrap());
    }
}

#[test]
fn gradcheck_micro_passes() {
    let (code, out, _) = invoke(&["gradcheck", "--micro", "--seed", "7", "--tol", "1e-4"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("seed = 7"));
    assert!(out.trim_end().ends_with("PASS"));
}

#[test]
fn gradcheck_violation_exits_one() {
    let (code, out, _) = invoke(&["gradcheck", "--micro", "--tol", "1e-30"]);
    assert_eq!(code, 1);
    assert!(out.trim_end().ends_with("FAIL"));
}

#[test]
fn oracle_passes() {
    let (code, out, _) = invoke(&["oracle", "--cases", "20"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("seed = 0"));
    assert!(out.contains("conv2d") && out.contains("linear_sra"));
}

#[test]
fn infer_is_deterministic_and_reads_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("micro.cfg");
    fs::write(&cfg_path, pvtv2::io::render_config(&ModelConfig::micro())).unwrap();
    let w_path = dir.path().join("micro.pvt2");
    let model: PvtModel<f64> = PvtModel::new(&ModelConfig::micro(), 4).unwrap();
    save_weights(&WeightStore::from_module(&model).unwrap(), &w_path).unwrap();
    let args = [
        "infer",
        "--config",
        cfg_path.to_str().unwrap(),
        "--weights",
        w_path.to_str().unwrap(),
        "--input-size",
        "32",
        "--seed",
        "3",
    ];
    let (code, first, err) = invoke(&args);
    assert_eq!(code, 0, "{err}");
    let (_, second, _) = invoke(&args);
    assert_eq!(first, second);
    assert!(first.contains("model micro (f64)"));
    assert!(first.contains("stage 2 features [1, 16, 4, 4]"));
    assert!(first.contains("logit sum = "));
    assert!(first.contains("logit l2 = "));
}

#[test]
fn infer_without_weights_uses_seed() {
    let (code, a, _) = invoke(&["infer", "--variant", "B0", "--input-size", "64"]);
    assert_eq!(code, 0);
    assert!(a.contains("seed = 0"));
    let (_, b, _) = invoke(&["infer", "--variant", "B0", "--input-size", "64", "--seed", "1"]);
    assert_ne!(a, b);
}

#[test]
fn usage_errors_exit_two() {
    let (code, _, err) = invoke(&["frobnicate"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"));
    let (code, _, _) = invoke(&["cost", "--variant", "B2", "--bogus"]);
    assert_eq!(code, 2);
    let (code, out, _) = invoke(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("describe"));
}

#[test]
fn operational_errors_exit_one() {
    let (code, _, err) = invoke(&["describe", "--variant", "B9"]);
    assert_eq!(code, 1);
    assert!(err.contains("B9"));
    let (code, _, err) = invoke(&["infer", "--variant", "B0", "--weights", "/no/such/file"]);
    assert_eq!(code, 1);
    assert!(err.contains("/no/such/file"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "variant = B0\nstage1.C = -3\n").unwrap();
    let (code, _, err) = invoke(&["describe", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("line 2"), "{err}");

    let wrong = dir.path().join("wrong.pvt2");
    save_weights(
        &WeightStore::from_module(&PvtModel::<f32>::new(&ModelConfig::micro(), 0).unwrap()).unwrap(),
        &wrong,
    )
    .unwrap();
    let (code, _, err) = invoke(&[
        "infer",
        "--variant",
        "B0",
        "--weights",
        wrong.to_str().unwrap(),
        "--input-size",
        "64",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("does not match"));
}
