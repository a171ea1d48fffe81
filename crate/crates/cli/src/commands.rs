use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use polcomp::bench::{
    bench_curves, random_disturbance, run_trials_with, synthetic_sweep, LcvrModel, SweepSynth, TrialSetup,
    TrialStats, VirtualApparatus,
};
use polcomp::compensation::{run_compensation, Phase, TerminationReason};
use polcomp::lcvr::build_curve;
use polcomp::polarimetry::{simulate_scan, tomography, ScanConfig, Tomography};
use polcomp::stokes::fidelity;
use polcomp::{CardinalState, Config, Noise, Normalized};
use serde::Serialize;
use serde_json::json;

use crate::io;
use crate::manifest::{self, RunManifest};
use crate::{
    BenchArgs, CharacterizeArgs, Command, CompensateArgs, LoopArgs, NoisePreset, SynthCommand,
    SynthCurvesArgs, SynthScanArgs, SynthSweepArgs, TomographyArgs, UsageError, EXIT_BUDGET,
};

/// What every command needs to write its manifest.
struct Ctx {
    command: Command,
    invocation: Vec<String>,
    timestamp: String,
    working_dir: PathBuf,
}

impl Ctx {
    fn write_manifest(
        &self,
        primary: &Path,
        config: serde_json::Value,
        seeds: Vec<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<PathBuf> {
        let path = manifest::manifest_path(primary);
        RunManifest {
            command: self.command.clone(),
            invocation: self.invocation.clone(),
            config,
            seeds,
            inputs,
            outputs,
            working_dir: self.working_dir.clone(),
            artifact_version: manifest::ARTIFACT_VERSION.into(),
            timestamp: self.timestamp.clone(),
        }
        .write(&path)?;
        Ok(path)
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn out_path(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("output paths are resolved before dispatch")
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Runs a resolved command. `timestamp` is set when replaying, so the manifest is
/// reproduced as well as the outputs.
pub fn dispatch(command: Command, invocation: Vec<String>, timestamp: Option<String>) -> Result<u8> {
    if let Command::Replay(a) = &command {
        return replay(&a.manifest);
    }
    let ctx = Ctx {
        command: command.clone(),
        invocation,
        timestamp: match timestamp {
            Some(t) => t,
            None => manifest::timestamp()?,
        },
        working_dir: std::env::current_dir().context("reading the working directory")?,
    };
    match &command {
        Command::Characterize(a) => characterize(&ctx, a),
        Command::Tomography(a) => run_tomography(&ctx, a),
        Command::Compensate(a) => compensate(&ctx, a),
        Command::Bench(a) => bench(&ctx, a),
        Command::Synth(SynthCommand::Sweep(a)) => synth_sweep(&ctx, a),
        Command::Synth(SynthCommand::Scan(a)) => synth_scan(&ctx, a),
        Command::Synth(SynthCommand::Curves(a)) => synth_curves(&ctx, a),
        Command::Replay(_) => unreachable!(),
    }
}

fn replay(path: &Path) -> Result<u8> {
    let m = RunManifest::read(path)?;
    std::env::set_current_dir(&m.working_dir)
        .with_context(|| format!("entering recorded working directory {}", m.working_dir.display()))?;
    if matches!(m.command, Command::Replay(_)) {
        bail!("{}: manifest records a replay", path.display());
    }
    dispatch(m.command, m.invocation, Some(m.timestamp))
}

/// `H`, `V`, `D`, `A`, `R`, `L` or three comma-separated components of a unit vector.
pub fn parse_state(s: &str) -> Result<Normalized> {
    if s.contains(',') {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| usage(format!("state '{s}': expected three numbers u1,u2,u3")))?;
        if nums.len() != 3 {
            return Err(usage(format!("state '{s}': expected three numbers u1,u2,u3")));
        }
        Normalized::new(nums[0], nums[1], nums[2]).map_err(|e| usage(format!("state '{s}': {e}")))
    } else {
        s.parse::<CardinalState>()
            .map(CardinalState::normalized)
            .map_err(usage)
    }
}

fn noise_of(preset: NoisePreset) -> Noise {
    match preset {
        NoisePreset::None => Noise::none(),
        NoisePreset::Paper => Noise::paper(),
    }
}

/// `--max-steps N` is the fine budget; the coarse budget is the default capped at N.
fn loop_config(a: &LoopArgs) -> Result<Config> {
    let mut c = Config::default();
    if let Some(t) = a.coarse_threshold {
        c.coarse_threshold = t;
    }
    if let Some(t) = a.fine_threshold {
        c.fine_threshold = t;
    }
    if let Some(n) = a.max_steps {
        let n = usize::try_from(n).map_err(|_| usage("--max-steps is too large"))?;
        c.max_fine_steps = n;
        c.max_coarse_steps = c.max_coarse_steps.min(n);
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn characterize(ctx: &Ctx, a: &CharacterizeArgs) -> Result<u8> {
    let out = out_path(&a.out);
    let sweep = io::read_sweep(&a.sweep)?;
    let ch = build_curve(&sweep).with_context(|| a.sweep.display().to_string())?;
    let mpath = manifest::manifest_path(out);
    io::write_curve(out, &ch.curve, a.wavelength_nm, &path_str(&mpath))?;
    ctx.write_manifest(
        out,
        json!({ "wavelength_nm": a.wavelength_nm, "v_max": ch.v_max }),
        vec![],
        vec![a.sweep.clone(), io::sidecar_path(&a.sweep)],
        vec![out.to_path_buf(), io::sidecar_path(out)],
    )?;
    let (lo, hi) = ch.curve.retardance_range();
    println!("folds: {}", ch.folds.len());
    println!(
        "retardance span: {:.4} rad ({:.3} pi), from {lo:.4} to {hi:.4} rad",
        hi - lo,
        (hi - lo) / PI
    );
    println!("wrote {}", out.display());
    Ok(0)
}

#[derive(Serialize)]
struct FourierOut {
    a0: f64,
    b0: f64,
    c0: f64,
    d0: f64,
}

#[derive(Serialize)]
struct TomographyOut {
    stokes: [f64; 4],
    normalized: [f64; 3],
    dop: Option<f64>,
    fourier: FourierOut,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fidelity: Option<f64>,
    manifest: String,
}

#[derive(Serialize)]
struct ScanRow {
    file: String,
    normalized: [f64; 3],
    dop: Option<f64>,
    fidelity: f64,
}

#[derive(Serialize)]
struct TomographySetOut {
    /// `truth` when `--truth` was given, otherwise the mean measured direction.
    reference_kind: &'static str,
    reference: [f64; 3],
    scans: Vec<ScanRow>,
    n: usize,
    mean_fidelity: f64,
    std_error: Option<f64>,
    manifest: String,
}

fn scan_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{}: no scan CSV files", dir.display());
    }
    Ok(files)
}

fn run_tomography(ctx: &Ctx, a: &TomographyArgs) -> Result<u8> {
    let out = out_path(&a.out);
    let truth = a.truth.as_deref().map(parse_state).transpose()?;
    let mpath = path_str(&manifest::manifest_path(out));
    let config = json!({ "truth": truth.as_ref().map(Normalized::as_array) });

    if !a.input.is_dir() {
        let scan = io::read_scan(&a.input)?;
        let t: Tomography<f64> = tomography(&scan).with_context(|| a.input.display().to_string())?;
        let fid = truth.as_ref().map(|u| fidelity(&t.normalized, u));
        let body = TomographyOut {
            stokes: t.stokes.as_array(),
            normalized: t.normalized.as_array(),
            dop: t.dop,
            fourier: FourierOut {
                a0: t.fourier.a0,
                b0: t.fourier.b0,
                c0: t.fourier.c0,
                d0: t.fourier.d0,
            },
            truth: truth.as_ref().map(Normalized::as_array),
            fidelity: fid,
            manifest: mpath,
        };
        io::write_atomic(out, &io::to_json_bytes(&body)?)?;
        ctx.write_manifest(
            out,
            config,
            vec![],
            vec![a.input.clone(), io::sidecar_path(&a.input)],
            vec![out.to_path_buf()],
        )?;
        let [u1, u2, u3] = body.normalized;
        println!("normalized: ({u1:.6}, {u2:.6}, {u3:.6})");
        if let Some(d) = body.dop {
            println!("dop: {d:.6}");
        }
        if let Some(f) = fid {
            println!("fidelity: {f:.6}");
        }
        return Ok(0);
    }

    let files = scan_files(&a.input)?;
    let mut results = Vec::with_capacity(files.len());
    for f in &files {
        let scan = io::read_scan(f)?;
        let t = tomography(&scan).with_context(|| f.display().to_string())?;
        results.push((f, t));
    }
    let (reference_kind, reference) = match truth {
        Some(u) => ("truth", u),
        None => {
            let sum = results.iter().fold([0.0; 3], |acc, (_, t)| {
                let u = t.normalized.as_array();
                [acc[0] + u[0], acc[1] + u[1], acc[2] + u[2]]
            });
            let mean = Normalized::from_components(sum[0], sum[1], sum[2])
                .context("measured states average to zero; pass --truth")?;
            ("mean", mean)
        }
    };
    let scans: Vec<ScanRow> = results
        .iter()
        .map(|(f, t)| ScanRow {
            file: f
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            normalized: t.normalized.as_array(),
            dop: t.dop,
            fidelity: fidelity(&t.normalized, &reference),
        })
        .collect();
    let n = scans.len();
    let mean = scans.iter().map(|s| s.fidelity).sum::<f64>() / n as f64;
    let std_error = (n > 1).then(|| {
        let var = scans.iter().map(|s| (s.fidelity - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });

    println!(
        "{:<24} {:>10} {:>10} {:>10} {:>10}",
        "file", "u1", "u2", "u3", "fidelity"
    );
    for s in &scans {
        let [u1, u2, u3] = s.normalized;
        println!(
            "{:<24} {u1:>10.6} {u2:>10.6} {u3:>10.6} {:>10.6}",
            s.file, s.fidelity
        );
    }
    match std_error {
        Some(se) => println!("mean fidelity over {n} scans: {mean:.6} (standard error {se:.6})"),
        None => println!("mean fidelity over {n} scans: {mean:.6}"),
    }

    let body = TomographySetOut {
        reference_kind,
        reference: reference.as_array(),
        scans,
        n,
        mean_fidelity: mean,
        std_error,
        manifest: mpath,
    };
    io::write_atomic(out, &io::to_json_bytes(&body)?)?;
    let mut inputs = Vec::with_capacity(2 * files.len());
    for f in &files {
        inputs.push(f.clone());
        inputs.push(io::sidecar_path(f));
    }
    ctx.write_manifest(out, config, vec![], inputs, vec![out.to_path_buf()])?;
    Ok(0)
}

#[derive(Serialize)]
struct StepLine {
    record: &'static str,
    step: usize,
    phase: Phase,
    d1_rad: f64,
    d2_rad: f64,
    d3_rad: f64,
    d4_rad: Option<f64>,
    v1: f64,
    v2: f64,
    v3: f64,
    v4: Option<f64>,
    fidelity: f64,
    best_fidelity: f64,
    true_fidelity: Option<f64>,
    stokes: [f64; 3],
}

#[derive(Serialize)]
struct SummaryLine {
    record: &'static str,
    seed: u64,
    steps_to_97: Option<usize>,
    steps_to_99: Option<usize>,
    steps_to_995: Option<usize>,
    reason: TerminationReason,
    total_steps: usize,
    manifest: String,
}

fn fmt_steps(s: Option<usize>) -> String {
    s.map_or_else(|| "not reached".into(), |n| n.to_string())
}

fn compensate(ctx: &Ctx, a: &CompensateArgs) -> Result<u8> {
    let out = out_path(&a.out);
    if !(3..=4).contains(&a.curves.len()) {
        return Err(usage(format!(
            "need 3 or 4 --curve files, got {}",
            a.curves.len()
        )));
    }
    let target = parse_state(&a.target)?;
    let config = loop_config(&a.loop_args)?;
    let noise = noise_of(a.noise_preset);
    let curves = a
        .curves
        .iter()
        .map(|p| io::read_curve(p))
        .collect::<Result<Vec<_>>>()?;

    let mut apparatus = VirtualApparatus::new(random_disturbance(a.seed), &curves, noise, a.seed);
    let run = run_compensation(&mut apparatus, &curves, target, &config, a.seed)?;
    let term = run
        .termination()
        .context("compensation ended without a termination record")?;

    let mut log = Vec::new();
    for r in run.records() {
        let line = StepLine {
            record: "step",
            step: r.step,
            phase: r.phase,
            d1_rad: r.retardances.d1,
            d2_rad: r.retardances.d2,
            d3_rad: r.retardances.d3,
            d4_rad: r.fourth_retardance,
            v1: r.voltages[0],
            v2: r.voltages[1],
            v3: r.voltages[2],
            v4: r.voltages.get(3).copied(),
            fidelity: r.fidelity,
            best_fidelity: r.best_fidelity,
            true_fidelity: r.true_fidelity,
            stokes: r.measured.as_array(),
        };
        serde_json::to_writer(&mut log, &line)?;
        log.push(b'\n');
    }
    let mpath = manifest::manifest_path(out);
    let summary = SummaryLine {
        record: "summary",
        seed: a.seed,
        steps_to_97: term.steps_to_97,
        steps_to_99: term.steps_to_99,
        steps_to_995: term.steps_to_995,
        reason: term.reason,
        total_steps: run.records().len() - 1,
        manifest: path_str(&mpath),
    };
    serde_json::to_writer(&mut log, &summary)?;
    log.push(b'\n');
    io::write_atomic(out, &log)?;

    let mut inputs = Vec::new();
    for c in &a.curves {
        inputs.push(c.clone());
        inputs.push(io::sidecar_path(c));
    }
    ctx.write_manifest(
        out,
        json!({
            "loop": config,
            "noise": noise,
            "target": target.as_array(),
            "source": "H",
        }),
        vec![a.seed],
        inputs,
        vec![out.to_path_buf()],
    )?;

    println!("steps to F>97%:   {}", fmt_steps(term.steps_to_97));
    println!("steps to F>99%:   {}", fmt_steps(term.steps_to_99));
    println!("steps to F>99.5%: {}", fmt_steps(term.steps_to_995));
    println!(
        "reason: {}",
        serde_json::to_value(term.reason)?.as_str().unwrap_or_default()
    );
    println!("wrote {}", out.display());
    Ok(match term.reason {
        TerminationReason::FineThresholdReached => 0,
        TerminationReason::BudgetExhausted => EXIT_BUDGET,
    })
}

#[derive(Serialize)]
struct BenchOut<'a> {
    #[serde(flatten)]
    stats: &'a TrialStats,
    traces: String,
    manifest: String,
}

fn fmt_mean(m: Option<f64>) -> String {
    m.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
}

fn bench(ctx: &Ctx, a: &BenchArgs) -> Result<u8> {
    let out = out_path(&a.out);
    let traces_path = out_path(&a.traces);
    let n = usize::try_from(a.n).map_err(|_| usage("-n is too large"))?;
    let target = parse_state(&a.target)?;
    let config = loop_config(&a.loop_args)?;
    let noise = noise_of(a.noise_preset);
    let setup = TrialSetup {
        target,
        ..TrialSetup::default()
    };
    let stats = run_trials_with(&setup, n, &config, &noise, a.base_seed)?;
    let mpath = path_str(&manifest::manifest_path(out));

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "seed",
        "step",
        "phase",
        "fidelity",
        "infidelity",
        "best_fidelity",
        "true_fidelity",
    ])?;
    for t in &stats.trials {
        for p in &t.trace {
            let phase = match p.phase {
                Phase::Coarse => "coarse",
                Phase::Fine => "fine",
            };
            w.write_record([
                t.seed.to_string(),
                p.step.to_string(),
                phase.to_string(),
                p.fidelity.to_string(),
                (1.0 - p.fidelity).to_string(),
                p.best_fidelity.to_string(),
                p.true_fidelity.map(|f| f.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    let traces_bytes = w.into_inner().map_err(|e| anyhow::anyhow!(e.to_string()))?;
    io::write_atomic(traces_path, &traces_bytes)?;
    io::write_atomic(
        &io::sidecar_path(traces_path),
        &io::to_json_bytes(&json!({ "manifest": mpath }))?,
    )?;
    let body = BenchOut {
        stats: &stats,
        traces: path_str(traces_path),
        manifest: mpath,
    };
    io::write_atomic(out, &io::to_json_bytes(&body)?)?;
    ctx.write_manifest(
        out,
        json!({
            "n": n,
            "loop": config,
            "noise": noise,
            "target": target.as_array(),
            "source": "H",
            "curves": "bench",
        }),
        (0..a.n).map(|i| a.base_seed.wrapping_add(i)).collect(),
        vec![],
        vec![
            out.to_path_buf(),
            traces_path.to_path_buf(),
            io::sidecar_path(traces_path),
        ],
    )?;

    println!("trials: {n}");
    println!("mean steps to F>97%:   {}", fmt_mean(stats.mean_steps_to_97));
    println!("mean steps to F>99%:   {}", fmt_mean(stats.mean_steps_to_99));
    println!("mean steps to F>99.5%: {}", fmt_mean(stats.mean_steps_to_995));
    let missed = stats.unreached.steps_to_995.len();
    if missed > 0 {
        println!(
            "{missed} trial(s) never reached F>99.5%: seeds {:?}",
            stats.unreached.steps_to_995
        );
    }
    println!("wrote {} and {}", out.display(), traces_path.display());
    Ok(0)
}

fn synth_sweep(ctx: &Ctx, a: &SynthSweepArgs) -> Result<u8> {
    let out = out_path(&a.out);
    if a.v_step.is_nan() || a.v_step <= 0.0 || a.v_end.is_nan() || a.v_end <= a.v_start {
        return Err(usage("need v_step > 0 and v_end > v_start"));
    }
    let model = LcvrModel::paper_like().with_retardance_at(a.pi_at_v, PI)?;
    let count = ((a.v_end - a.v_start) / a.v_step).round() as usize + 1;
    let voltages: Vec<f64> = (0..count).map(|i| a.v_start + i as f64 * a.v_step).collect();
    let synth = SweepSynth {
        full_scale_v: 1.0,
        background_v: a.background,
        sample_sigma: a.sigma,
        samples_per_point: a.samples,
        background_samples: 100,
    };
    let sweep = if a.constant {
        synthetic_sweep(|_| PI, &voltages, &synth, a.seed)?
    } else {
        synthetic_sweep(|v| model.retardance(v), &voltages, &synth, a.seed)?
    };
    let mpath = manifest::manifest_path(out);
    io::write_sweep(out, &sweep, &path_str(&mpath))?;
    ctx.write_manifest(
        out,
        json!({ "model": model, "synth": synth, "constant": a.constant }),
        vec![a.seed],
        vec![],
        vec![out.to_path_buf(), io::sidecar_path(out)],
    )?;
    println!("wrote {} ({count} points)", out.display());
    Ok(0)
}

fn synth_scan(ctx: &Ctx, a: &SynthScanArgs) -> Result<u8> {
    let out = out_path(&a.out);
    let state = parse_state(&a.state)?;
    let noise = noise_of(a.noise_preset);
    let config = ScanConfig::full_turn(a.samples);
    let mpath = manifest::manifest_path(out);
    let mut outputs = Vec::new();
    let mut seeds = Vec::new();
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i);
        let path = if a.count > 1 {
            out.join(format!("scan_{i:03}.csv"))
        } else {
            out.to_path_buf()
        };
        let scan = simulate_scan(&state.to_stokes(), &config, &noise, seed)?;
        io::write_scan(&path, &scan, &path_str(&mpath))?;
        outputs.push(io::sidecar_path(&path));
        outputs.push(path);
        seeds.push(seed);
    }
    ctx.write_manifest(
        out,
        json!({ "state": state.as_array(), "noise": noise, "samples": a.samples, "step_rad": config.step }),
        seeds,
        vec![],
        outputs,
    )?;
    println!("wrote {} scan(s) to {}", a.count, out.display());
    Ok(0)
}

fn synth_curves(ctx: &Ctx, a: &SynthCurvesArgs) -> Result<u8> {
    let out = out_path(&a.out);
    let mpath = manifest::manifest_path(out);
    let mut outputs = Vec::new();
    for (i, curve) in bench_curves().iter().enumerate() {
        let path = out.join(format!("lcvr{}.csv", i + 1));
        io::write_curve(&path, curve, 1550.0, &path_str(&mpath))?;
        outputs.push(path.clone());
        outputs.push(io::sidecar_path(&path));
    }
    ctx.write_manifest(
        out,
        json!({ "models": polcomp::bench::bench_models() }),
        vec![],
        vec![],
        outputs,
    )?;
    println!("wrote 4 curves to {}", out.display());
    Ok(0)
}
