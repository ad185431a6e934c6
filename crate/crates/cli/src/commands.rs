use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lska_core::analysis::probe::{FactorPairs, LatentMatrix};
use lska_core::analysis::{compute_erf, erf_radius, run_probe, Factor};
use lska_core::report::{rows_to_csv, sig6, sweep_row};
use lska_core::tensor::{Shape, Tensor};
use lska_core::verify::{run_suite, Fault, VerifyOptions};
use lska_core::{build_van, init, AttentionVariant, KernelSpec, ModelConfig, Scope, KERNEL_SIZES};

use crate::args::{CostArgs, ErfArgs, KernelArg, ProbeArgs, ScopeArgs, SweepArgs, VerifyArgs};
use crate::output::{emit, write_files};
use crate::CliError;

pub const PROBE_FILES: [&str; 4] = ["shape_a.csv", "shape_b.csv", "texture_a.csv", "texture_b.csv"];
pub const PROBE_HEADER: &str = "factor,score,dimensionality,percent_of_n";
pub const ERF_HEADER: &str = "variant,k,d,capacity,n_inputs,seed,hw,mass,erf_radius";

pub fn verify(args: VerifyArgs, config: Option<&ModelConfig>) -> Result<(), CliError> {
    let fault = args.inject_fault.as_deref().map(str::parse::<Fault>).transpose()?;
    let opts = VerifyOptions {
        filter: args.filter,
        fault,
        seed: config.map_or(args.seed, |c| c.seed),
    };
    let results = run_suite(&opts);
    if results.is_empty() {
        return Err(CliError::Usage(format!(
            "no property matches filter {:?}",
            opts.filter.unwrap_or_default()
        )));
    }
    for r in &results {
        println!("{r}");
    }
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(CliError::Verify(r.name.to_string())),
        None => Ok(()),
    }
}

fn scope(s: &ScopeArgs) -> Scope {
    match (s.channels, s.capacity) {
        (Some(c), _) => Scope::Channels(c),
        (None, Some(cap)) => Scope::Capacity(cap),
        (None, None) => Scope::Capacity(lska_core::Capacity::Tiny),
    }
}

fn spec_for(k: usize, d: Option<usize>) -> Result<KernelSpec, CliError> {
    Ok(KernelArg { k, d }.spec()?)
}

pub fn cost(args: CostArgs, config: Option<&ModelConfig>) -> Result<(), CliError> {
    let (variant, spec, scope, seed) = match config {
        Some(c) => (c.attention.variant, c.attention.spec(), Scope::Capacity(c.capacity), c.seed),
        None => {
            let variant = args.variant.ok_or_else(|| CliError::Usage("--variant is required".into()))?;
            let k = args.k.ok_or_else(|| CliError::Usage("--k is required".into()))?;
            (variant, spec_for(k, args.d)?, scope(&args.scope), args.seed)
        }
    };
    let row = sweep_row(variant, spec, scope, args.hw, seed, None)?;
    emit(args.out.as_deref(), rows_to_csv(&[row]))
}

pub fn sweep(args: SweepArgs, config: Option<&ModelConfig>) -> Result<(), CliError> {
    let (points, scope, seed) = match config {
        Some(c) => (
            vec![(c.attention.variant, c.attention.spec())],
            Scope::Capacity(c.capacity),
            c.seed,
        ),
        None => {
            let variants = if args.variants.is_empty() {
                AttentionVariant::ALL.to_vec()
            } else {
                args.variants.clone()
            };
            let ks = if args.ks.is_empty() {
                KERNEL_SIZES.iter().map(|&k| KernelArg { k, d: None }).collect()
            } else {
                args.ks.clone()
            };
            let mut points = Vec::new();
            for &v in &variants {
                for &k in &ks {
                    points.push((v, k.spec()?));
                }
            }
            (points, scope(&args.scope), args.seed)
        }
    };
    let reps = args.bench.then_some(args.reps);
    let rows = points
        .iter()
        .enumerate()
        .map(|(i, &(v, spec))| sweep_row(v, spec, scope, args.hw, seed + i as u64, reps))
        .collect::<lska_core::Result<Vec<_>>>()?;
    emit(args.out.as_deref(), rows_to_csv(&rows))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn erf(args: ErfArgs, config: Option<&ModelConfig>) -> Result<(), CliError> {
    let cfg = match config {
        Some(c) => c.clone(),
        None => {
            let k = args.k.ok_or_else(|| CliError::Usage("--k is required".into()))?;
            ModelConfig::new(args.capacity, args.variant, spec_for(k, args.d)?).with_seed(args.seed)
        }
    };
    if args.n_inputs == 0 {
        return Err(CliError::Usage("--n-inputs must be positive".into()));
    }
    if !(args.mass > 0.0 && args.mass <= 1.0) {
        return Err(CliError::Usage("--mass must lie in (0, 1]".into()));
    }
    cfg.check_input(args.hw, args.hw)?;
    let model = build_van(&cfg)?;
    let x = Tensor::uniform(
        Shape::new(args.n_inputs, 3, args.hw, args.hw),
        1.0,
        &mut init::rng(cfg.seed.wrapping_add(1)),
    );
    let map = compute_erf(&model.feature_extractor(), &x, cfg.attention.k)?;
    let radius = erf_radius(&map, args.mass);

    let att = cfg.attention;
    let d = if att.variant.is_trivial() { String::new() } else { att.d.to_string() };
    let mut csv = format!("{ERF_HEADER}\n");
    let _ = writeln!(
        csv,
        "{},{},{d},{},{},{},{},{},{}",
        att.variant,
        att.k,
        cfg.capacity,
        args.n_inputs,
        cfg.seed,
        args.hw,
        sig6(args.mass),
        sig6(radius)
    );
    write_files(vec![
        (with_suffix(&args.out, ".pgm"), map.to_pgm()),
        (with_suffix(&args.out, ".csv"), csv.into_bytes()),
        (with_suffix(&args.out, "_map.csv"), map.to_csv().into_bytes()),
    ])?;
    eprintln!("erf_radius({}) = {radius}", args.mass);
    Ok(())
}

pub fn probe(args: ProbeArgs) -> Result<(), CliError> {
    let paths: Vec<PathBuf> = PROBE_FILES.iter().map(|f| args.input_dir.join(f)).collect();
    let mut mats = Vec::with_capacity(4);
    for p in &paths {
        if !p.is_file() {
            return Err(CliError::Io(format!("{}: missing latent file", p.display())));
        }
        mats.push(LatentMatrix::read_csv(p)?);
    }
    let n = args.n.unwrap_or(mats[0].cols());
    for (m, p) in mats.iter().zip(&paths) {
        if m.cols() != n {
            return Err(CliError::Usage(format!("{}: {} columns, expected N = {n}", p.display(), m.cols())));
        }
    }
    for pair in [0, 2] {
        if mats[pair].rows() != mats[pair + 1].rows() {
            return Err(CliError::Usage(format!(
                "{}: {} rows but {} has {}",
                paths[pair + 1].display(),
                mats[pair + 1].rows(),
                paths[pair].display(),
                mats[pair].rows()
            )));
        }
    }
    let mut it = mats.into_iter();
    let mut next = || it.next().expect("four matrices");
    let shape = FactorPairs::new(next(), next())?;
    let texture = FactorPairs::new(next(), next())?;
    let report = run_probe(&shape, &texture, Some(n))?;

    let mut csv = format!("{PROBE_HEADER}\n");
    for f in Factor::ALL {
        let e = report.get(f);
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            f.as_str(),
            sig6(e.score),
            sig6(e.dimensionality),
            sig6(e.percent_of_n(n))
        );
    }
    emit(args.out.as_deref(), csv)
}
