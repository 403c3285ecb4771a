//! Release acceptance checks. Each criterion prints one PASS/FAIL line; the
//! process exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use pvtv2::analytics::{
    self, count_macs, count_params, linear_sra_complexity, sra_complexity, sweep_macs, verify_counter,
};
use pvtv2::io::{decode_weights, encode_weights, parse_config, render_config, WeightData, WeightStore};
use pvtv2::nn::Module;
use pvtv2::{config_for, gradcheck, oracle, Ablation, Error, ModelConfig, PvtModel, Tensor, Variant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const PARAM_TOL: f64 = 0.015;
const MAC_TOL: f64 = 0.10;

/// Reference totals at 224×224: (variant, params in millions, GMACs).
const REFERENCE: [(Variant, f64, f64); 7] = [
    (Variant::B0, 3.4, 0.6),
    (Variant::B1, 13.1, 2.1),
    (Variant::B2, 25.4, 4.0),
    (Variant::B2Li, 22.6, 3.9),
    (Variant::B3, 45.2, 6.9),
    (Variant::B4, 62.6, 10.1),
    (Variant::B5, 82.0, 11.8),
];

fn err(e: Error) -> String {
    e.to_string()
}

fn within(actual: f64, target: f64, tol: f64) -> bool {
    ((actual - target) / target).abs() <= tol
}

fn reconcile(
    label: &str,
    tol: f64,
    value: impl Fn(Variant) -> Result<f64, Error>,
    target: impl Fn(f64, f64) -> f64,
) -> Outcome {
    let mut lines = Vec::new();
    let mut misses = Vec::new();
    for (v, params, gmacs) in REFERENCE {
        let want = target(params, gmacs);
        let got = value(v).map_err(err)?;
        let rel = (got - want) / want;
        let entry = format!("{v} {got:.3} vs {want} ({:+.2}%)", rel * 100.0);
        if within(got, want, tol) {
            lines.push(entry);
        } else {
            misses.push(entry);
        }
    }
    if misses.is_empty() {
        Ok(format!("{label} all within {:.1}%: {}", tol * 100.0, lines.join(", ")))
    } else {
        Err(format!(
            "{label} outside {:.1}%: {}; within: {}",
            tol * 100.0,
            misses.join(", "),
            lines.join(", ")
        ))
    }
}

fn params_match_reference() -> Outcome {
    reconcile(
        "params (M)",
        PARAM_TOL,
        |v| Ok(count_params(&config_for(v))? as f64 / 1e6),
        |p, _| p,
    )
}

fn macs_match_reference() -> Outcome {
    reconcile(
        "GMACs at 224",
        MAC_TOL,
        |v| Ok(count_macs(&config_for(v), 224, 224)? as f64 / 1e9),
        |_, g| g,
    )
}

fn closed_forms() -> Outcome {
    let sra = sra_complexity(8, 8, 4, 2);
    let lin = linear_sra_complexity(8, 8, 4, 7);
    if sra == 12288.0 && lin == 25088.0 {
        Ok(format!("sra(8,8,4,2) = {sra}, linear(8,8,4,7) = {lin}"))
    } else {
        Err(format!(
            "sra(8,8,4,2) = {sra} (want 12288), linear(8,8,4,7) = {lin} (want 25088)"
        ))
    }
}

fn complexity_growth() -> Outcome {
    let sizes = [(224, 224), (448, 448), (896, 896)];
    let b2 = sweep_macs(&config_for(Variant::B2), &sizes).map_err(err)?;
    let li = sweep_macs(&config_for(Variant::B2Li), &sizes).map_err(err)?;
    let mut notes = Vec::new();
    for i in 1..sizes.len() {
        let g_b2 = b2[i].total_macs as f64 / b2[i - 1].total_macs as f64;
        let g_li = li[i].total_macs as f64 / li[i - 1].total_macs as f64;
        if g_li >= g_b2 {
            return Err(format!("step {i}: linear growth {g_li:.3} not below {g_b2:.3}"));
        }
        if li[i].attention_core_macs != 4 * li[i - 1].attention_core_macs {
            return Err(format!(
                "step {i}: linear attention core grew by {}",
                li[i].attention_core_macs as f64 / li[i - 1].attention_core_macs as f64
            ));
        }
        if b2[i].attention_core_macs != 16 * b2[i - 1].attention_core_macs {
            return Err(format!(
                "step {i}: reduced attention core grew by {}",
                b2[i].attention_core_macs as f64 / b2[i - 1].attention_core_macs as f64
            ));
        }
        notes.push(format!(
            "{}->{}: total x{g_b2:.3} vs x{g_li:.3}",
            sizes[i - 1].0,
            sizes[i].0
        ));
    }
    Ok(format!("{}; core x16 vs x4 per step", notes.join(", ")))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let r = gradcheck::check_micro(0, gradcheck::DEFAULT_TOL).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "{} elements, max rel err {:.2e} at {}, {:.1}s",
        r.elements, r.max_rel_err, r.worst, secs
    );
    if !r.passed() {
        return Err(format!("{summary}; first failure {}", r.failures[0]));
    }
    if secs >= 60.0 {
        return Err(format!("{summary}; over the 60s budget"));
    }
    Ok(summary)
}

fn oracles() -> Outcome {
    let start = Instant::now();
    let report = oracle::run_suite(0, 64);
    let secs = start.elapsed().as_secs_f64();
    let parts: Vec<_> = report
        .families
        .iter()
        .map(|f| format!("{} {} cases max {:.1e}", f.family, f.cases, f.max_abs_err))
        .collect();
    let summary = format!("{}, {secs:.1}s", parts.join(", "));
    for family in ["conv2d", "sra", "linear_sra"] {
        let f = report.family(family).ok_or_else(|| format!("{family} missing"))?;
        if f.cases < 50 || !f.passed() {
            return Err(format!("{summary}; {family}: {:?}", f.failures.first()));
        }
    }
    if !report.passed() || secs >= 120.0 {
        return Err(summary);
    }
    Ok(summary)
}

fn counter_soundness() -> Outcome {
    let mut checked = 0;
    for ab in Ablation::all() {
        for pool in [2, 3] {
            let cfg = ModelConfig::micro().with_ablation(ab, pool);
            let model: PvtModel<f32> = PvtModel::new(&cfg, 1).map_err(err)?;
            let check = verify_counter(&model, 32, 32, 2).map_err(err)?;
            if !check.is_exact() {
                return Err(format!("{ab}: {:?}", check.discrepancies));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} micro configs over all 8 toggle combinations exact"))
}

fn variable_resolution() -> Outcome {
    let cfg = config_for(Variant::B0);
    let model: PvtModel<f32> = PvtModel::new(&cfg, 0).map_err(err)?;
    let params = model.param_count();
    let mut layer_params = None;
    for size in [160, 224, 320] {
        let image = Tensor::<f32>::rand_uniform(&[1, 3, size, size], 1, -1.0, 1.0).map_err(err)?;
        let pyramid = model.forward_features(&image).map_err(err)?;
        for (map, stride) in pyramid.maps.iter().zip([4, 8, 16, 32]) {
            let s = map.shape();
            if s[2] != size / stride || s[3] != size / stride {
                return Err(format!("{size}: map {s:?} is not stride {stride}"));
            }
        }
        model.classify_features(&pyramid).map_err(err)?;
        let per_layer: Vec<u64> = analytics::cost_report(&cfg, size, size)
            .map_err(err)?
            .per_layer
            .iter()
            .map(|l| l.params)
            .collect();
        if *layer_params.get_or_insert_with(|| per_layer.clone()) != per_layer {
            return Err(format!("per-layer parameter counts change at {size}"));
        }
    }
    if model.param_count() != params || count_params(&cfg).map_err(err)? != params {
        return Err("parameter count changed".into());
    }
    Ok(format!(
        "B0 at 160/224/320 gives stride 4/8/16/32 maps with one {params}-parameter set"
    ))
}

fn serialization() -> Outcome {
    let micro = ModelConfig::micro();
    let f32s = WeightStore::from_module(&PvtModel::<f32>::new(&micro, 3).map_err(err)?).map_err(err)?;
    let f64s = WeightStore::from_module(&PvtModel::<f64>::new(&micro, 3).map_err(err)?).map_err(err)?;
    for store in [&f32s, &f64s] {
        let bytes = encode_weights(store);
        let back = decode_weights(&bytes).map_err(err)?;
        let same = back.entries().len() == store.entries().len()
            && back.entries().iter().zip(store.entries()).all(|(a, b)| {
                a.path == b.path
                    && a.shape == b.shape
                    && match (&a.data, &b.data) {
                        (WeightData::F32(x), WeightData::F32(y)) => {
                            x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits()))
                        }
                        (WeightData::F64(x), WeightData::F64(y)) => {
                            x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits()))
                        }
                        _ => false,
                    }
            });
        if !same || encode_weights(&back) != bytes {
            return Err("weight round trip changed data".into());
        }
    }
    let mut configs: Vec<ModelConfig> = Variant::ALL.iter().map(|&v| config_for(v)).collect();
    configs.push(micro);
    for cfg in &configs {
        if parse_config(&render_config(cfg)).map_err(err)? != *cfg {
            return Err(format!("config round trip changed {}", cfg.name));
        }
    }
    let good = encode_weights(&f32s);
    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"XXXX");
    let mut version = good.clone();
    version[4..8].copy_from_slice(&2u32.to_le_bytes());
    let cases = [
        ("bad magic", decode_weights(&magic).err(), "format"),
        ("bad version", decode_weights(&version).err(), "version"),
        ("truncated", decode_weights(&good[..good.len() - 4]).err(), "corrupt"),
    ];
    for (what, e, class) in cases {
        let ok = matches!(
            (&e, class),
            (Some(Error::Format { .. }), "format")
                | (Some(Error::Version { .. }), "version")
                | (Some(Error::Corrupt(_)), "corrupt")
        );
        if !ok {
            return Err(format!("{what}: expected {class} error, got {e:?}"));
        }
    }
    Ok(format!(
        "f32/f64 weights bit-identical, {} configs identical, corrupt files rejected by class",
        configs.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("parameter reconciliation", params_match_reference),
        ("FLOP reconciliation", macs_match_reference),
        ("closed-form evaluators", closed_forms),
        ("complexity growth", complexity_growth),
        ("gradient correctness", gradients),
        ("oracle equivalence", oracles),
        ("MAC counter soundness", counter_soundness),
        ("variable resolution", variable_resolution),
        ("serialization", serialization),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
