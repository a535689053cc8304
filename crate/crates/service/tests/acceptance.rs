//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero when any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use guidewalk_core::builtin::{builtin_model, BANDS_CUTOFF, BUILTIN_NAMES, STYLE_RETENTION_THRESHOLD};
use guidewalk_core::dct::{band_energy, low_band_share, Band};
use guidewalk_core::diagnostics::{effective_mean, guidance_norm_series, layout_preservation, mean_field_error};
use guidewalk_core::fieldio::write_field;
use guidewalk_core::noise::uniform_stream;
use guidewalk_core::schedule::scaled_linear_defaults;
use guidewalk_core::walk::{blend_conditions_baseline, make_mask, MaskBuilder};
use guidewalk_core::{
    cfg, compose, draw_noise, linear_beta_schedule, run_sampling, ConditionId, Denoiser, Field, GuidanceTerm, Gsf,
    NoiseKey, NoiseSchedule, RunSpec, SamplerConfig, Stream, TemporalProfile,
};
use guidewalk_service::suites::{DiagnoseSuite, StoredRun, Unconditional};
use guidewalk_service::{run_spec, SpecContext, Store};
use rand::Rng;
use serde_json::json;

type Check = Result<String, String>;

fn schedule(steps: usize) -> NoiseSchedule {
    let (lo, hi) = scaled_linear_defaults(steps);
    linear_beta_schedule(steps, lo, hi).unwrap()
}

fn spec(doc: serde_json::Value) -> RunSpec {
    RunSpec::from_json(&doc.to_string()).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap().flatten() {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn sample_bytes(store: &Store, run_id: &str) -> Vec<Vec<u8>> {
    let dir = store.run_dir(run_id).join("samples");
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().flatten().map(|e| e.path()).collect();
    files.sort();
    files.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

fn cfg_reduction() -> Check {
    let start = Instant::now();
    let sched = schedule(500);
    let mut checked = 0;
    for (mi, name) in BUILTIN_NAMES.iter().enumerate() {
        let model = builtin_model(name).unwrap();
        let conds: Vec<ConditionId> = model.condition_ids().filter(|c| !c.is_null()).cloned().collect();
        let mut rng = uniform_stream(NoiseKey::new(2024, mi as u64, Stream::Diagnostics, 0));
        for k in 0..100u64 {
            let spread = rng.random_range(0.1..5.0);
            let x = draw_noise(NoiseKey::new(2024 + mi as u64, k, Stream::Diagnostics, 1), model.shape())
                .scale(spread)
                .unwrap();
            let step = rng.random_range(0..sched.num_steps());
            let s = rng.random_range(-10.0..10.0);
            let c = conds[rng.random_range(0..conds.len())].clone();
            let a = cfg(&model, &x, step, &sched, &c, s).unwrap();
            let b = compose(&model, &x, step, &sched, &[GuidanceTerm::constant(c.clone(), s).unwrap()]).unwrap();
            let same = a.values().iter().zip(b.values()).all(|(u, v)| u.to_bits() == v.to_bits());
            if !same {
                return Err(format!("{name}: mismatch at step {step}, s = {s}, condition {c}"));
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("{checked} triples bit-exact but took {secs:.2}s"));
    }
    Ok(format!("{checked} triples bit-exact in {secs:.3}s"))
}

fn master_oracle() -> Check {
    let start = Instant::now();
    let model = builtin_model("two_styles_2d").unwrap();
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for s in [-0.5, 0.0, 0.5, 1.0, 2.0, 7.5] {
        let cases = [
            vec![GuidanceTerm::constant("base", s).unwrap()],
            vec![GuidanceTerm::constant("base", s).unwrap(), GuidanceTerm::constant("style_A", s).unwrap()],
        ];
        for terms in cases {
            let out = run_sampling(&model, &terms, &SamplerConfig::ddpm(schedule(500), 1, 4096)).unwrap();
            let target = effective_mean(&model, &terms, 0.0).unwrap();
            let err = mean_field_error(&out.samples, &target).unwrap();
            worst = worst.max(err);
            if err > 0.1 {
                lines.push(format!("s = {s}, {} terms: error {err:.4}", terms.len()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if !lines.is_empty() {
        return Err(lines.join("; "));
    }
    if secs >= 60.0 {
        return Err(format!("max error {worst:.4} but took {secs:.1}s"));
    }
    Ok(format!("12 runs, max error {worst:.4} <= 0.1 in {secs:.1}s"))
}

fn unconditional(store: &Store) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in BUILTIN_NAMES {
        let run = spec(json!({
            "model": name,
            "sampler": {"kind": "ddpm", "steps": 500, "seed": 1},
            "outputs": {"samples": 2048}
        }));
        let outcome = run_spec(store, &run, &SpecContext::default()).unwrap();
        let report = Unconditional.run(&outcome.dir, &SpecContext::default()).unwrap().remove(0);
        ok &= report.pass;
        parts.push(format!("{name} p = {:.4}", report.value));
    }
    let detail = format!("{} (alpha 0.01, N = 2048 per side)", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn late_start() -> Check {
    let model = builtin_model("bands_32x32").unwrap();
    let base = vec![GuidanceTerm::constant("base", 2.0).unwrap()];
    let mut styled = base.clone();
    styled.push(GuidanceTerm::new("style", Gsf::temporal(TemporalProfile::RampUp { m: 4.0, a: 0.6 }).unwrap()).unwrap());
    let cfg = SamplerConfig::ddpm(schedule(500), 11, 4).with_trajectory(1);
    let a = run_sampling(&model, &base, &cfg).unwrap().trajectories.unwrap();
    let b = run_sampling(&model, &styled, &cfg).unwrap().trajectories.unwrap();
    let mut identical = 0;
    for (lane, (ta, tb)) in a.iter().zip(&b).enumerate() {
        let mut diverged = false;
        for (sa, sb) in ta.steps.iter().zip(&tb.steps) {
            let same = sa.latent.values().iter().zip(sb.latent.values()).all(|(u, v)| u.to_bits() == v.to_bits());
            if sa.t >= 0.6 {
                if !same {
                    return Err(format!("sample {lane} differs at step {} (t = {})", sa.step, sa.t));
                }
                identical += 1;
            } else if !same {
                diverged = true;
            }
        }
        if !diverged {
            return Err(format!("sample {lane}: the late term never acted"));
        }
    }
    Ok(format!("{identical} latent states with t >= 0.6 bit-identical across 4 samples; later steps diverge"))
}

fn mask_partition() -> Check {
    let model = builtin_model("pattern_16x16").unwrap();
    let mask = make_mask(model.shape(), &MaskBuilder::Rect { u0: 2, v0: 3, u1: 10, v1: 12 }).unwrap();
    let base = GuidanceTerm::constant("base", 1.0).unwrap();
    let style = |mask| GuidanceTerm::new("style", Gsf::new(TemporalProfile::Constant { m: 2.0 }, mask).unwrap()).unwrap();
    let terms = vec![base.clone(), style(mask.clone())];
    let out = run_sampling(&model, &terms, &SamplerConfig::ddpm(schedule(500), 3, 4096)).unwrap();
    let mean = Field::mean_of(&out.samples).unwrap();
    let styled_target = effective_mean(&model, &[base.clone(), style(Default::default())], 0.0).unwrap();
    let base_target = effective_mean(&model, &[base], 0.0).unwrap();
    let m = mask.to_field(model.shape()).unwrap();
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    for i in 0..m.len() {
        let target = if m.values()[i] == 1.0 { &styled_target } else { &base_target };
        let err = (mean.values()[i] - target.values()[i]).abs();
        if m.values()[i] == 1.0 {
            inside = inside.max(err);
        } else {
            outside = outside.max(err);
        }
    }
    let detail = format!("masked max error {inside:.4}, unmasked max error {outside:.4} (N = 4096)");
    if inside <= 0.1 && outside <= 0.1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn endpoints_and_transparency(store: &Store) -> Check {
    let ctx = SpecContext::default();
    let sampler = json!({"kind": "ddpm", "steps": 120, "seed": 8});
    let outputs = json!({"samples": 4});
    let base_term = json!({"condition": "base", "temporal": {"kind": "constant", "m": 2.0}});
    let style = |c: &str, m: f64| json!({"condition": c, "temporal": {"kind": "constant", "m": m}});
    let interp = guidewalk_core::walk::InterpSpec {
        base: spec(json!({"model": "bands_32x32", "terms": [base_term], "sampler": sampler, "outputs": outputs})),
        a: "style_A".into(),
        b: "style_B".into(),
        m: 4.0,
        lambdas: vec![0.0, 0.5, 1.0],
        style: Default::default(),
        baseline: false,
    };
    let grid = guidewalk_service::plans::run_interp(store, &interp, &ctx, 2).unwrap();
    let single = |c: &str| {
        let s = spec(json!({"model": "bands_32x32", "terms": [base_term, style(c, 4.0)], "sampler": sampler, "outputs": outputs}));
        run_spec(store, &s, &ctx).unwrap().run_id
    };
    let (a_id, b_id) = (single("style_A"), single("style_B"));
    if sample_bytes(store, &grid.run_ids[0]) != sample_bytes(store, &a_id) {
        return Err("lambda = 0 differs from the style_A run".into());
    }
    if sample_bytes(store, &grid.run_ids[2]) != sample_bytes(store, &b_id) {
        return Err("lambda = 1 differs from the style_B run".into());
    }
    let zero_terms = [
        json!({"condition": "style", "temporal": {"kind": "constant", "m": 0.0}}),
        json!({"condition": "style_B", "temporal": {"kind": "ramp_up", "m": 0.0, "a": 0.6}}),
        json!({"condition": "base", "temporal": {"kind": "ramp_down", "m": 0.0}}),
        json!({"condition": "style", "temporal": {"kind": "piecewise", "knots": [[0.9, 0.0], [0.2, 0.0]]}}),
        json!({"condition": "style", "temporal": {"kind": "constant", "m": 5.0}, "opacity": 0.0}),
        json!({"condition": "style_B", "temporal": {"kind": "constant", "m": 3.0},
               "mask": {"builder": {"kind": "rect", "params": {"u0": 0, "v0": 0, "u1": 32, "v1": 32}}}, "opacity": 0.0}),
    ];
    let reference = sample_bytes(store, &a_id);
    for (i, z) in zero_terms.iter().enumerate() {
        let mut terms = vec![base_term.clone(), style("style_A", 4.0)];
        terms.insert(i % 3, z.clone());
        let s = spec(json!({"model": "bands_32x32", "terms": terms, "sampler": sampler, "outputs": outputs}));
        let id = run_spec(store, &s, &ctx).unwrap().run_id;
        if id == a_id || sample_bytes(store, &id) != reference {
            return Err(format!("zero term {z} changed the samples"));
        }
    }
    Ok(format!(
        "lambda 0 and 1 sample files byte-identical to single-style runs; {} all-zero GSF variants transparent",
        zero_terms.len()
    ))
}

fn layout_contrast() -> Check {
    let model = builtin_model("bands_32x32").unwrap();
    let base = vec![GuidanceTerm::constant("base", 2.0).unwrap()];
    let with = |temporal: TemporalProfile| {
        let mut t = base.clone();
        t.push(GuidanceTerm::new("style", Gsf::temporal(temporal).unwrap()).unwrap());
        t
    };
    let constant = with(TemporalProfile::Constant { m: 4.0 });
    let late = with(TemporalProfile::RampUp { m: 4.0, a: 0.6 });
    let mut wins = 0;
    let mut values = Vec::new();
    for seed in 0..10 {
        let cfg = SamplerConfig::ddpm(schedule(201), seed, 1);
        let b = run_sampling(&model, &base, &cfg).unwrap().samples.remove(0);
        let c = run_sampling(&model, &constant, &cfg).unwrap().samples.remove(0);
        let l = run_sampling(&model, &late, &cfg).unwrap().samples.remove(0);
        let lc = layout_preservation(&b, &c, BANDS_CUTOFF).unwrap();
        let ll = layout_preservation(&b, &l, BANDS_CUTOFF).unwrap();
        if ll < lc {
            wins += 1;
        }
        values.push(format!("{ll:.1e}/{lc:.1e}"));
    }
    let detail = format!("late-start smaller in {wins}/10 seeds (late/constant: {})", values.join(" "));
    if wins >= 9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn coarse_to_fine() -> Check {
    let model = builtin_model("bands_32x32").unwrap();
    let terms = vec![GuidanceTerm::constant("base", 2.0).unwrap(), GuidanceTerm::constant("style", 2.0).unwrap()];
    let mut wins = 0;
    let mut values = Vec::new();
    for seed in 0..10 {
        let cfg = SamplerConfig::ddpm(schedule(201), seed, 1).with_trajectory(1);
        let traj = run_sampling(&model, &terms, &cfg).unwrap().trajectories.unwrap().remove(0);
        let series = guidance_norm_series(&traj).unwrap();
        let at = |t: f64| {
            series
                .iter()
                .find(|(s, _)| (s - t).abs() < 1e-12)
                .map(|(_, f)| low_band_share(f, BANDS_CUTOFF).unwrap())
                .expect("t on the step grid")
        };
        let (early, late) = (at(1.0), at(0.2));
        if early > late {
            wins += 1;
        }
        values.push(format!("{early:.3}/{late:.3}"));
    }
    let detail = format!("low-band share t=1 above t=0.2 in {wins}/10 seeds ({})", values.join(" "));
    if wins >= 9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn style_free_valley(store: &Store) -> Check {
    let ctx = SpecContext::default();
    let model = builtin_model("two_styles_2d").unwrap();
    let (blended, id) = blend_conditions_baseline(&model, &"style_A".into(), &"style_B".into(), 0.5).unwrap();
    let blend_mean = blended.mean(&id).unwrap();
    let interp = guidewalk_core::walk::InterpSpec {
        base: spec(json!({"model": "two_styles_2d", "sampler": {"kind": "ddpm", "steps": 500, "seed": 4}, "outputs": {"samples": 4096}})),
        a: "style_A".into(),
        b: "style_B".into(),
        m: 2.0,
        lambdas: vec![0.5],
        style: Default::default(),
        baseline: true,
    };
    let grid = guidewalk_service::plans::run_interp(store, &interp, &ctx, 2).unwrap();
    let samples = StoredRun::load(&store.run_dir(&grid.run_ids[1])).unwrap().samples().unwrap();
    let blend_norm = Field::mean_of(&samples).unwrap().norm();

    let bands = builtin_model("bands_32x32").unwrap();
    let energy = |terms: &[GuidanceTerm]| {
        let cfg = SamplerConfig::ddpm(schedule(201), 6, 8);
        let plain = run_sampling(&bands, &[], &cfg).unwrap().samples;
        let styled = run_sampling(&bands, terms, &cfg).unwrap().samples;
        let total: f64 = plain
            .iter()
            .zip(&styled)
            .map(|(p, s)| band_energy(&s.sub(p).unwrap(), Band::High, BANDS_CUTOFF).unwrap())
            .sum();
        total / plain.len() as f64
    };
    let m = 4.0;
    let pair = |l: f64| {
        vec![GuidanceTerm::constant("style_A", m * (1.0 - l)).unwrap(), GuidanceTerm::constant("style_B", m * l).unwrap()]
    };
    let (e0, e1, mid) = (energy(&pair(0.0)), energy(&pair(1.0)), energy(&pair(0.5)));
    let ratio = mid / ((e0 + e1) / 2.0);
    let detail = format!(
        "blend mean {:.2e}, sampled blend-mean norm {blend_norm:.4} (< 0.1); guidance interpolation keeps {ratio:.3} of endpoint high-band energy (>= {STYLE_RETENTION_THRESHOLD})",
        blend_mean.norm()
    );
    if blend_norm < 0.1 && ratio >= STYLE_RETENTION_THRESHOLD {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn write_doc(dir: &Path, name: &str, doc: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    p
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_guidewalk")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism(work: &Path) -> Check {
    let docs = work.join("docs");
    std::fs::create_dir_all(&docs).unwrap();
    let mask = Field::from_fn(16, 16, |r, c| ((r + c) as f64 / 30.0).min(1.0)).unwrap();
    write_field(&docs.join("fade.gwf"), &mask).unwrap();
    let sampler = json!({"kind": "ddpm", "steps": 60, "seed": 21});
    let run = write_doc(&docs, "run.json", json!({
        "model": "pattern_16x16",
        "terms": [
            {"condition": "base", "temporal": {"kind": "ramp_down", "m": 2.0}},
            {"condition": "style", "temporal": {"kind": "ramp_up", "m": 3.0, "a": 0.8}, "mask": {"file": "fade.gwf"}}
        ],
        "sampler": sampler,
        "outputs": {"samples": 6, "record_trajectory": true, "trajectory_stride": 7, "emit": ["fields", "images", "metrics", "normmaps"]}
    }));
    let ddim = write_doc(&docs, "ddim.json", json!({
        "model": "two_styles_2d",
        "terms": [{"condition": "style_B", "temporal": {"kind": "constant", "m": 1.5}}],
        "sampler": {"kind": "ddim", "eta": 0.5, "steps": 40, "seed": 2},
        "outputs": {"samples": 32, "emit": ["fields", "metrics"]}
    }));
    let walk = write_doc(&docs, "walk.json", json!({
        "base": {
            "model": "pattern_16x16",
            "terms": [
                {"condition": "base", "temporal": {"kind": "constant", "m": 1.0}},
                {"condition": "style", "temporal": {"kind": "ramp_up", "m": 2.0, "a": 1.0}}
            ],
            "sampler": sampler,
            "outputs": {"samples": 4, "emit": ["fields", "images"]}
        },
        "axes": [
            {"term": 0, "parameter": "magnitude", "values": [0.0, 1.0, 2.0]},
            {"term": 1, "parameter": "onset", "values": [0.6, 1.0, 1.4]}
        ]
    }));
    let interp = write_doc(&docs, "interp.json", json!({
        "base": {"model": "two_styles_2d", "sampler": {"kind": "ddpm", "steps": 50, "seed": 5}, "outputs": {"samples": 16}},
        "a": "style_A", "b": "style_B", "m": 2.0, "lambdas": [0.0, 0.25, 0.5, 0.75, 1.0], "baseline": true
    }));
    let suite = |store: &Path, jobs: &str| -> Result<(), String> {
        let s = store.to_str().unwrap();
        cli(&["sample", run.to_str().unwrap(), "--out", s])?;
        cli(&["sample", ddim.to_str().unwrap(), "--out", s])?;
        cli(&["walk", walk.to_str().unwrap(), "--out", s, "--jobs", jobs])?;
        cli(&["interp", interp.to_str().unwrap(), "--out", s, "--jobs", jobs])
    };
    let (s1, s2, s3) = (work.join("first"), work.join("second"), work.join("serial"));
    suite(&s1, "4")?;
    suite(&s2, "4")?;
    suite(&s3, "1")?;
    let (t1, t2, t3) = (tree(&s1), tree(&s2), tree(&s3));
    if t1 != t2 {
        let diff: Vec<_> = t1.keys().filter(|k| t2.get(*k) != t1.get(*k)).take(3).collect();
        return Err(format!("re-run differs: {diff:?}"));
    }
    if t1 != t3 {
        return Err("concurrent and serial executions differ".into());
    }
    let walk_runs = std::fs::read_dir(s1.join("walks")).unwrap().count();
    Ok(format!("{} files byte-identical across two CLI runs and across --jobs 4 vs --jobs 1 ({walk_runs} walk, 9 cells)", t1.len()))
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let store = Store::open(work.path().join("store")).unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("cfg_reduction", Box::new(cfg_reduction)),
        ("master_mu_eff_oracle", Box::new(master_oracle)),
        ("unconditional_energy_test", Box::new(|| unconditional(&store))),
        ("late_start_invariance", Box::new(late_start)),
        ("spatial_mask_partition", Box::new(mask_partition)),
        ("interpolation_endpoints_and_transparency", Box::new(|| endpoints_and_transparency(&store))),
        ("layout_preservation_contrast", Box::new(layout_contrast)),
        ("coarse_to_fine_norm_maps", Box::new(coarse_to_fine)),
        ("style_free_valley", Box::new(|| style_free_valley(&store))),
        ("determinism", Box::new(|| determinism(&work.path().join("cli")))),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in &criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
