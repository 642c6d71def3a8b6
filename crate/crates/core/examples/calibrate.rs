//! Sweeps run counts, placements and input perturbations over the ten
//! one-per-class MNIST digits and prints mean normalized cross-correlation
//! (raw/denoised). The board presets in `tdc.rs` hold the values picked from
//! this output.
//!
//! cargo run --release -p tdcleak-core --example calibrate [key=value...]
//!
//! keys: sigma, seed, glitch, pattern, cutoff, operand, toggle, exponent, rule, cross-die, cross-slr

use tdcleak_core::attack::ThresholdRule;
use tdcleak_core::experiment::{load_subjects, mean_by, robustness_study, run_on_subjects, ExperimentSpec, RobustnessStudy};
use tdcleak_core::tdc::Placement;

fn main() {
    let mut base = ExperimentSpec::default();
    base.seed = 1;
    let mut overrides: Vec<(Placement, f64)> = Vec::new();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        let x: f64 = v.parse().unwrap_or(f64::NAN);
        match k {
            "sigma" => base.sensor.noise_sigma = Some(x),
            "seed" => base.seed = v.parse().expect("seed"),
            "glitch" => base.activity.glitch_sigma = x,
            "pattern" => base.activity.pattern_weight = x,
            "cutoff" => base.activity.pattern_cutoff = v.parse().expect("cutoff"),
            "operand" => base.activity.operand_weight = x,
            "toggle" => base.activity.toggle_weight = x,
            "exponent" => base.activity.operand_exponent = x,
            "rule" => base.attack.threshold = v.parse::<ThresholdRule>().expect("rule"),
            "cross-die" => overrides.push((Placement::CrossDie, x)),
            "cross-slr" => overrides.push((Placement::CrossSlr, x)),
            _ => panic!("unknown key {k}"),
        }
    }
    let subjects = load_subjects(&base).expect("bundled MNIST files");

    let r = run_on_subjects(&base, &subjects, None).unwrap();
    let curve: Vec<String> = base
        .run_counts
        .iter()
        .map(|&n| format!("{n}:{:.3}/{:.3}", r.mean_raw(n), r.mean_denoised(n)))
        .collect();
    println!("sweep {}", curve.join("  "));

    let mut per_placement = Vec::new();
    for p in Placement::ALL {
        let mut spec = base.clone();
        spec.sensor.placement = p;
        spec.run_counts = vec![3000];
        let att = overrides.iter().find(|(q, _)| *q == p).map(|(_, a)| *a).unwrap_or(p.attenuation());
        spec.sensor.attenuation = Some(att);
        let r = run_on_subjects(&spec, &subjects, None).unwrap();
        let per: Vec<f64> = r.rows.iter().map(|row| row.ccr_norm_denoised.unwrap_or(0.0)).collect();
        let worse_raw = r.rows.iter().filter(|row| row.ccr_norm_denoised.unwrap_or(0.0) <= row.ccr_norm_raw.unwrap_or(0.0)).count();
        println!(
            "{:<10} att {att:.2} raw {:.3} den {:.3} den<=raw {worse_raw} [{}]",
            p.name(),
            r.mean_raw(3000),
            r.mean_denoised(3000),
            per.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ")
        );
        per_placement.push(per);
    }
    let ordered = (0..subjects.len())
        .filter(|&i| per_placement[0][i] > per_placement[1][i] && per_placement[1][i] > per_placement[2][i])
        .count();
    println!("ordered digits {ordered}/{}", subjects.len());

    for study in [
        RobustnessStudy::background_default(),
        RobustnessStudy::bit_flip_default(1),
        RobustnessStudy::bit_flip_default(2),
    ] {
        let mut spec = base.clone();
        spec.run_counts = vec![6000];
        let rows = robustness_study(&spec, &study, &subjects, None).unwrap();
        let means = mean_by(&rows, |r| r.setting.clone(), |r| r.ccr_norm_denoised);
        let line: Vec<String> = means.iter().map(|(k, v)| format!("{k}:{v:.3}")).collect();
        println!("{}", line.join("  "));
    }
}
