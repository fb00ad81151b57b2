use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use spectralds::distill::{build_pair_bank, distill_stu_model, practical_distill, spectral_to_lds, BankFit, PracticalConfig, SelectionScore};
use spectralds::stu::{fit_stu_to_impulse, fit_stu_to_lds_io, GdConfig};
use spectralds::{compute_basis, rng, AlphaSampler, DiagonalLds, DistilledFilters, HankelSpec, Persist, SpectralBasis, StuParams};
use spectralds_experiments::cond::cond_experiment;
use spectralds_experiments::record::{write_json, write_loss_csv, write_rows_csv};
use spectralds_experiments::runtime::{runtime_bench, scaling_ratios, ModelKind, RuntimeDims};
use spectralds_experiments::subset::{curve_points, subset_curve};
use spectralds_experiments::synth::{synth_compare, SynthSetup};
use spectralds_experiments::{ExperimentConfig, Summary};

use crate::args::{BenchArgs, Command, DistillMode, FitMode, SynthPreset};
use crate::{CliError, CliResult};

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Basis { len, k, out } => basis(len, k, &out),
        Command::FitStu {
            lds,
            basis,
            mode,
            out,
            seed,
            steps,
            lr,
        } => fit_stu(&lds, &basis, mode, &out, seed, steps, lr),
        Command::Distill {
            basis,
            mode,
            h,
            h_start,
            trials,
            bank_size,
            threshold,
            seed,
            out,
        } => distill(&basis, mode, h, h_start, trials, bank_size, threshold, seed, &out),
        Command::Verify { distilled, basis } => verify(&distilled, &basis),
        Command::BenchCond(args) => {
            let k = args.overrides.k.unwrap_or(ExperimentConfig::default().k);
            bench_cond(&resolve(ExperimentConfig::cond(k), &args)?, &args.out)
        }
        Command::BenchSubset(args) => bench_subset(&resolve(ExperimentConfig::default(), &args)?, &args.out),
        Command::BenchSynth { preset, bench } => {
            let base = match preset {
                SynthPreset::Synth => ExperimentConfig::synth(),
                SynthPreset::Noisy => ExperimentConfig::noisy(),
            };
            bench_synth(&resolve(base, &bench)?, &bench.out)
        }
        Command::BenchRuntime(args) => bench_runtime(&resolve(ExperimentConfig::runtime(), &args)?, &args.out),
        Command::Demo { seed } => demo(seed),
    }
}

/// Preset, then the JSON config file, then individual flags.
fn resolve(preset: ExperimentConfig, args: &BenchArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => preset,
    };
    args.overrides.apply(&mut cfg);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn new_basis(len: usize, k: usize) -> CliResult<SpectralBasis> {
    Ok(compute_basis(HankelSpec::new(len)?, k)?)
}

fn finite_or_fail(what: &str, v: f64) -> CliResult<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Failure(anyhow::anyhow!("{what} is not finite")))
    }
}

fn basis(len: usize, k: usize, out: &Path) -> CliResult<()> {
    let b = new_basis(len, k)?;
    b.save(out)?;
    println!("basis L={len} k={k} -> {}", out.display());
    println!("sigma_1 = {:.6e}, sigma_k = {:.6e}", b.sigma()[0], b.sigma()[k - 1]);
    Ok(())
}

fn fit_stu(lds: &Path, basis: &Path, mode: FitMode, out: &Path, seed: u64, steps: usize, lr: f64) -> CliResult<()> {
    let lds = DiagonalLds::load(lds)?;
    let b = SpectralBasis::load(basis)?;
    let params = match mode {
        FitMode::Closed => {
            let fit = fit_stu_to_impulse(&lds.impulse_response(b.len()), &b)?;
            println!("closed-form fit: max impulse residual {:.3e}, condition {:.3e}", fit.max_residual(), fit.condition);
            fit.params
        }
        FitMode::Gd => {
            let cfg = GdConfig {
                seq_len: b.len(),
                lr,
                steps,
                seed,
                ..GdConfig::default()
            };
            let fit = fit_stu_to_lds_io(&lds, &b, &cfg)?;
            println!("gradient fit: {} steps, held-out MSE {:.3e}", fit.losses.len(), finite_or_fail("held-out MSE", fit.final_mse)?);
            fit.params
        }
    };
    params.save_with_seed(out, Some(seed))?;
    println!("stu k={} m={} n={} -> {}", params.k(), params.outputs(), params.inputs(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn distill(
    basis: &Path,
    mode: DistillMode,
    h: usize,
    h_start: Option<usize>,
    trials: usize,
    bank_size: usize,
    threshold: f64,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let b = SpectralBasis::load(basis)?;
    let filters = match mode {
        DistillMode::Direct => {
            let d = spectral_to_lds(&b, h, &AlphaSampler::new(seed))?;
            println!("direct distillation: chain bound {:.3e}", d.chain_bound);
            d.filters
        }
        DistillMode::Practical => {
            let bank = build_pair_bank(&b, bank_size, &AlphaSampler::new(seed).signed(), threshold, &BankFit::Joint)?;
            println!("pair bank: {} of {} rows kept", bank.size(), bank.attempted());
            let cfg = PracticalConfig::new(h_start.unwrap_or(b.k()), h, trials, seed);
            let d = practical_distill(&bank, &b, &cfg)?;
            println!(
                "practical distillation: pseudoinverse error {:.3e}, fine-tuned {:.3e}",
                d.pinv_error, d.final_error
            );
            d.filters
        }
    };
    finite_or_fail("reconstruction error", filters.error_fro())?;
    filters.save_with_seed(out, Some(seed))?;
    print!("distilled k={} h={} L={}: error_fro {:.6e}", filters.k(), filters.h(), filters.len(), filters.error_fro());
    match filters.lambda_max() {
        Some(l) => println!(", lambda_max {l:.6e}"),
        None => println!(),
    }
    println!("-> {}", out.display());
    Ok(())
}

fn verify(distilled: &Path, basis: &Path) -> CliResult<()> {
    let d = DistilledFilters::load(distilled)?;
    let b = SpectralBasis::load(basis)?;
    let (per, fro) = d.errors(&b)?;
    for (j, e) in per.iter().enumerate() {
        println!("filter {:>3}: {e:.6e}", j + 1);
    }
    println!("frobenius: {fro:.6e}");
    finite_or_fail("reconstruction error", fro)?;
    Ok(())
}

fn write_csv<T: Serialize>(out: &Path, name: &str, rows: &[T]) -> CliResult<()> {
    write_rows_csv(&out.join(name), rows)?;
    Ok(())
}

fn bench_cond(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let b = new_basis(cfg.len, cfg.k)?;
    let seeds: Vec<u64> = (0..cfg.repetitions as u64).map(|r| cfg.seed + r).collect();
    let table = cond_experiment(&b, &cfg.h_values, &seeds, &AlphaSampler::new(cfg.seed))?;

    #[derive(Serialize)]
    struct SeedRow {
        seed: u64,
        h: usize,
        lambda_max: f64,
    }
    let per_seed: Vec<SeedRow> = seeds
        .iter()
        .zip(&table.per_seed)
        .flat_map(|(&seed, vals)| cfg.h_values.iter().zip(vals).map(move |(&h, &lambda_max)| SeedRow { seed, h, lambda_max }))
        .collect();
    write_csv(out, "cond.csv", &table.rows)?;
    write_csv(out, "cond_per_seed.csv", &per_seed)?;
    write_json(&out.join("summary.json"), &json!({ "config": cfg, "rows": table.rows }))?;
    for r in &table.rows {
        println!("h={:>4}: median lambda_max {:.3e}, median lambda_max*h {:.3e}", r.h, r.lambda_median, r.lambda_h_median);
    }
    Ok(())
}

fn bench_subset(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let b = new_basis(cfg.len, cfg.k)?;
    let h_max = *cfg.h_values.last().expect("validated non-empty");
    let bank = build_pair_bank(&b, cfg.bank_size, &AlphaSampler::new(cfg.seed).signed(), f64::INFINITY, &BankFit::Joint)?;
    let curves = subset_curve(&bank, &b, &cfg.h_start_values, h_max, cfg.trials, cfg.seed, SelectionScore::Refit)?;
    write_csv(out, "subset.csv", &curve_points(&curves))?;
    write_json(&out.join("summary.json"), &json!({ "config": cfg, "curves": curves }))?;
    for c in &curves {
        println!(
            "h_start={:>4}: best random subset {:.3e} (median {:.3e}), greedy at h={h_max}: {:.3e}",
            c.h_start,
            c.errors[0],
            c.random_median,
            c.last()
        );
    }
    Ok(())
}

fn bench_synth(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let setup = SynthSetup::new(cfg)?;
    let pairs = synth_compare(cfg, &setup)?;
    let records: Vec<_> = pairs.iter().flat_map(|p| [p.baseline.clone(), p.treatment.clone()]).collect();
    write_loss_csv(&out.join("losses.csv"), &records)?;

    #[derive(Serialize)]
    struct MetricRow<'a> {
        name: &'a str,
        rep: usize,
        seed: u64,
        metric: &'a str,
        value: f64,
    }
    let metrics: Vec<MetricRow> = records
        .iter()
        .flat_map(|r| {
            r.metrics.iter().map(move |(m, &value)| MetricRow {
                name: &r.name,
                rep: r.rep,
                seed: r.seed,
                metric: m,
                value,
            })
        })
        .collect();
    write_csv(out, "metrics.csv", &metrics)?;
    for r in &records {
        r.save(&out.join("runs").join(format!("{}-{}", r.name, r.rep)))?;
    }

    let base: Vec<f64> = pairs.iter().map(|p| p.baseline_mse()).collect();
    let treat: Vec<f64> = pairs.iter().map(|p| p.treatment_mse()).collect();
    let diverged = pairs.iter().filter(|p| p.baseline.diverged()).count();
    write_json(
        &out.join("summary.json"),
        &json!({
            "config": cfg,
            "baseline_mse": Summary::of(&base),
            "treatment_mse": Summary::of(&treat),
            "baseline_diverged": diverged,
            "per_rep": pairs.iter().map(|p| json!({
                "rep": p.baseline.rep,
                "seed": p.baseline.seed,
                "baseline_mse": finite_or_null(p.baseline_mse()),
                "treatment_mse": finite_or_null(p.treatment_mse()),
            })).collect::<Vec<_>>(),
        }),
    )?;
    for p in &pairs {
        println!(
            "rep {}: baseline {}, distilled {:.3e}",
            p.baseline.rep,
            if p.baseline.diverged() { "diverged".to_string() } else { format!("{:.3e}", p.baseline_mse()) },
            p.treatment_mse()
        );
    }
    Ok(())
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn bench_runtime(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let dims = RuntimeDims {
        width: cfg.d_in,
        k: cfg.k,
        repeats: cfg.repetitions,
    };
    let models = [ModelKind::ConvStu, ModelKind::RecurrentLds];
    let rows = runtime_bench(&cfg.t_values, &models, &cfg.state_dims, &dims, cfg.seed)?;
    write_csv(out, "timings.csv", &rows)?;
    let mut ratios = serde_json::Map::new();
    ratios.insert("conv_stu".into(), json!(scaling_ratios(&rows, ModelKind::ConvStu, 0)));
    for &h in &cfg.state_dims {
        ratios.insert(format!("recurrent_lds_h{h}"), json!(scaling_ratios(&rows, ModelKind::RecurrentLds, h)));
    }
    write_json(&out.join("summary.json"), &json!({ "config": cfg, "rows": rows, "ratios": ratios }))?;
    for r in &rows {
        println!("{:?} h={:>4} T={:>6}: {:.3} s ({:.2} us/token)", r.model, r.state_dim, r.t, r.seconds, r.per_token_us);
    }
    Ok(())
}

fn demo(seed: u64) -> CliResult<()> {
    const L: usize = 256;
    const K: usize = 8;
    const H: usize = 24;
    const WIDTH: usize = 2;
    let b = new_basis(L, K)?;
    let bank = build_pair_bank(&b, 500, &AlphaSampler::new(seed).signed(), f64::INFINITY, &BankFit::Joint)?;
    let d = practical_distill(&bank, &b, &PracticalConfig::new(K, H, 20, seed))?;
    let (_, recon) = d.filters.errors(&b)?;

    let params = StuParams::random(K, WIDTH, WIDTH, 1.0 / ((K * WIDTH) as f64).sqrt(), &mut rng::stream(seed, "demo-params"));
    let mut r = rng::stream(seed, "demo-inputs");
    let u = DMatrix::from_fn(L, WIDTH, |_, _| StandardNormal.sample(&mut r));
    let conv = params.forward_nonar(&b, &u)?;
    let rec = distill_stu_model(&params, &d.filters)?.run(&u)?;
    let equiv = (&conv - &rec).amax() / conv.amax();

    println!("demo: L={L} k={K} h={H} seed={seed}");
    println!("reconstruction error (Frobenius): {:.6e}", finite_or_fail("reconstruction error", recon)?);
    println!("equivalence error (max relative, STU vs recurrent): {:.6e}", finite_or_fail("equivalence error", equiv)?);
    Ok(())
}
