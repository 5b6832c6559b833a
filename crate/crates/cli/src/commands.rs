use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cgmf_core::cgmf::{fuse_timed, run_variant, InitOptions, Variant};
use cgmf_core::gradcheck::{check_fuse_gradients, GradcheckOptions, GradcheckReport};
use cgmf_core::io::{
    inputs_from_container, inputs_to_container, load_weights, save_weights_as, Dtype,
    StoredTensor, TensorContainer,
};
use cgmf_core::metrics::{read_records, report, spbench_report, FreeTextRule, Protocol, ScoringRules};
use cgmf_core::pipeline::{synth_tokens, TokenDistribution};
use cgmf_core::{CgmfWeights, FusionConfig, FusionInputs, TokenTensor};

use crate::{
    sibling_report, AblateArgs, BenchArgs, CliError, FuseArgs, GenArgs, GradcheckArgs, InitArgs,
    ProtocolName, Result, ScoreArgs,
};

fn synth(config: &FusionConfig, seed: u64, dist: TokenDistribution) -> Result<FusionInputs> {
    synth_tokens(config, seed, dist).map_err(|e| CliError::Io(e.into()))
}

fn weights_for(config: &FusionConfig, path: Option<&PathBuf>, seed: u64) -> Result<CgmfWeights> {
    match path {
        Some(p) => Ok(load_weights(p, config)?),
        None => {
            info!("no weights given; initializing from seed {seed}");
            CgmfWeights::init(config, seed).map_err(|e| CliError::Io(e.into()))
        }
    }
}

fn write_json(path: &PathBuf, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|source| {
        CliError::Io(cgmf_core::io::IoError::File {
            path: path.clone(),
            source,
        })
    })
}

pub fn gen(args: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let (config, file_seed) = args.model.resolve(FusionConfig::demo())?;
    let seed = args.seed.or(file_seed).unwrap_or(0);
    let inputs = synth(&config, seed, args.distribution.into())?;
    inputs_to_container(&inputs, Dtype::F64).write(&args.out)?;
    writeln!(
        out,
        "wrote {} (seed {seed}, {}): f_v {:?}, f_s {:?}, f_c {:?}",
        args.out.display(),
        TokenDistribution::from(args.distribution),
        inputs.f_v.shape(),
        inputs.f_s.shape(),
        inputs.f_c.shape()
    )?;
    Ok(())
}

pub fn init(args: &InitArgs, out: &mut dyn Write) -> Result<()> {
    let (config, file_seed) = args.model.resolve(FusionConfig::demo())?;
    let seed = args.seed.or(file_seed).unwrap_or(0);
    let options = InitOptions {
        near_identity: args.near_identity,
    };
    let mut weights =
        CgmfWeights::init_with(&config, seed, options).map_err(|e| CliError::Io(e.into()))?;
    if args.zero_gate {
        weights.p_g1 = weights.p_g1.zeros_like();
    }
    let dtype = if args.f32 { Dtype::F32 } else { Dtype::F64 };
    save_weights_as(&weights, &args.out, dtype)?;
    writeln!(
        out,
        "wrote {} ({} parameters, seed {seed})",
        args.out.display(),
        weights.param_count()
    )?;
    Ok(())
}

/// Where the fusion inputs come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputSource {
    File(PathBuf),
    Synthetic(u64),
}

/// Everything a fusion run needs, with exactly one input source.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: FusionConfig,
    pub weights: Option<PathBuf>,
    pub init_seed: u64,
    pub input: InputSource,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn from_args(args: &FuseArgs) -> Result<Self> {
        let (config, _) = args.model.resolve(FusionConfig::demo())?;
        let input = match (&args.input, args.seed) {
            (Some(path), None) => InputSource::File(path.clone()),
            (None, Some(seed)) => InputSource::Synthetic(seed),
            _ => {
                return Err(CliError::Usage(
                    "give exactly one of --input and --seed".into(),
                ))
            }
        };
        Ok(Self {
            config,
            weights: args.weights.clone(),
            init_seed: args.init_seed,
            input,
            out: args.out.clone(),
        })
    }
}

/// Runs fusion as described by `manifest`, writes `f_fused` to its output
/// path and returns the fused tokens.
pub fn fuse_manifest(manifest: &RunManifest, out: &mut dyn Write) -> Result<TokenTensor> {
    let config = &manifest.config;
    let inputs = match &manifest.input {
        InputSource::File(path) => inputs_from_container(&TensorContainer::read(path)?)?,
        InputSource::Synthetic(seed) => synth(config, *seed, TokenDistribution::Gaussian)?,
    };
    let weights = weights_for(config, manifest.weights.as_ref(), manifest.init_seed)?;
    let start = Instant::now();
    let (fused, timings) = fuse_timed(&inputs, &weights, config)?;
    let total = start.elapsed();

    let mut container = TensorContainer::new();
    container.insert("f_fused", StoredTensor::from_tokens(&fused, Dtype::F64));
    container.write(&manifest.out)?;

    for t in &timings {
        writeln!(out, "{:<14} {:>10.3} ms", t.stage, t.elapsed.as_secs_f64() * 1e3)?;
    }
    let tokens = config.n_frames * config.m_visual;
    writeln!(out, "{:<14} {:>10.3} ms", "total", total.as_secs_f64() * 1e3)?;
    writeln!(
        out,
        "{tokens} visual tokens, {:.1} tokens/s; wrote {} {:?}",
        tokens as f64 / total.as_secs_f64(),
        manifest.out.display(),
        fused.shape()
    )?;
    Ok(fused)
}

pub fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<GradcheckReport> {
    let (config, file_seed) = args.model.resolve(FusionConfig::tiny())?;
    let seed = args.seed.or(file_seed).unwrap_or(0);
    let weights = weights_for(&config, args.weights.as_ref(), seed)?;
    // Parameter-count guard before any tensors are generated.
    let options = GradcheckOptions {
        step: args.step,
        corrupt_group: args.corrupt_vjp.clone(),
    };
    if weights.param_count() > cgmf_core::gradcheck::MAX_GRADCHECK_PARAMS {
        return Err(cgmf_core::gradcheck::GradcheckError::TooLarge {
            params: weights.param_count(),
            limit: cgmf_core::gradcheck::MAX_GRADCHECK_PARAMS,
        }
        .into());
    }
    let inputs = synth(&config, seed, TokenDistribution::Gaussian)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let cotangent = TokenTensor::randn(config.n_frames, config.m_visual, config.d_visual, &mut rng);
    let report = check_fuse_gradients(&inputs, &weights, &config, &cotangent, &options)?;

    writeln!(out, "{:<20} {:>6} {:>12} {:>12}", "group", "count", "max_abs", "max_rel")?;
    for g in &report.groups {
        let mark = if g.max_rel_error < args.tolerance { "" } else { "  FAIL" };
        writeln!(
            out,
            "{:<20} {:>6} {:>12.3e} {:>12.3e}{mark}",
            g.group, g.count, g.max_abs_error, g.max_rel_error
        )?;
    }
    let failures = report.failures(args.tolerance);
    writeln!(
        out,
        "max relative error {:.3e}, tolerance {:e}: {}",
        report.max_rel_error(),
        args.tolerance,
        if failures.is_empty() { "pass" } else { "FAIL" }
    )?;
    if !failures.is_empty() {
        let names: Vec<&str> = failures.iter().map(|g| g.group.as_str()).collect();
        return Err(CliError::CheckFailed(format!(
            "{} group(s) at or above {:e}: {}",
            names.len(),
            args.tolerance,
            names.join(", ")
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// Frobenius norm of the fused output.
    pub norm: f64,
    /// Largest change the variant makes to `f_v`.
    pub max_update: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// `pairwise[i][j]` is the max-abs difference between rows `i` and `j`.
    pub pairwise: Vec<Vec<f64>>,
}

pub fn ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<AblationTable> {
    let (config, file_seed) = args.model.resolve(FusionConfig::tiny())?;
    let seed = args.seed.or(file_seed).unwrap_or(0);
    let inputs = synth(&config, seed, TokenDistribution::Gaussian)?;
    let weights = weights_for(&config, args.weights.as_ref(), seed)?;
    let outputs = Variant::FUSED
        .iter()
        .map(|&v| run_variant(v, &inputs, &weights, &config))
        .collect::<Result<Vec<_>, _>>()?;
    let diff = |a: &TokenTensor, b: &TokenTensor| a.max_abs_diff(b).expect("same shape");
    let rows: Vec<AblationRow> = Variant::FUSED
        .iter()
        .zip(&outputs)
        .map(|(v, o)| AblationRow {
            variant: v.label().to_owned(),
            norm: o.frobenius_norm(),
            max_update: diff(o, &inputs.f_v),
        })
        .collect();
    let pairwise: Vec<Vec<f64>> = outputs
        .iter()
        .map(|a| outputs.iter().map(|b| diff(a, b)).collect())
        .collect();

    writeln!(out, "{:<10} {:>12} {:>12}", "variant", "norm", "max_update")?;
    for r in &rows {
        writeln!(out, "{:<10} {:>12.6} {:>12.6}", r.variant, r.norm, r.max_update)?;
    }
    writeln!(out, "\npairwise max |difference|")?;
    write!(out, "{:<10}", "")?;
    for r in &rows {
        write!(out, " {:>10}", r.variant)?;
    }
    writeln!(out)?;
    for (r, line) in rows.iter().zip(&pairwise) {
        write!(out, "{:<10}", r.variant)?;
        for d in line {
            write!(out, " {d:>10.3e}")?;
        }
        writeln!(out)?;
    }
    let table = AblationTable { rows, pairwise };
    if let Some(path) = &args.out {
        write_json(path, &table)?;
    }
    Ok(table)
}

#[derive(Serialize)]
struct ScoreFile<'a, T: Serialize> {
    protocol: &'a str,
    records: usize,
    #[serde(flatten)]
    report: T,
}

pub fn score(args: &ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let records = read_records(&args.records)?;
    let rule = if args.refined {
        FreeTextRule::Refined
    } else {
        FreeTextRule::Exact
    };
    let path = args.out.clone().unwrap_or_else(|| sibling_report(&args.records));
    match args.protocol {
        ProtocolName::Vsi | ProtocolName::Sqa3d => {
            let protocol = match args.protocol {
                ProtocolName::Vsi => Protocol::vsi(),
                _ => Protocol::sqa3d(rule),
            };
            let r = report(&records, &protocol)?;
            for s in &r.subtasks {
                writeln!(out, "{:<12} {:>8.4}  (n={})", s.subtask, s.score, s.count)?;
            }
            writeln!(out, "{:<12} {:>8.4}", "average", r.average)?;
            for e in &r.excluded {
                writeln!(out, "excluded {}: {}", e.id, e.reason)?;
            }
            write_json(
                &path,
                &ScoreFile {
                    protocol: &protocol.name,
                    records: records.len(),
                    report: r,
                },
            )?;
        }
        ProtocolName::Spbench => {
            let rules = ScoringRules {
                free_text: rule,
                ..ScoringRules::default()
            };
            let r = spbench_report(&records, &rules)?;
            writeln!(out, "si  nq {:.4}  mcq {:.4}", r.si_nq, r.si_mcq)?;
            writeln!(out, "mv  nq {:.4}  mcq {:.4}", r.mv_nq, r.mv_mcq)?;
            writeln!(
                out,
                "si {:.4}  mv {:.4}  overall {:.4}",
                r.scores.si, r.scores.mv, r.scores.overall
            )?;
            write_json(
                &path,
                &ScoreFile {
                    protocol: "spbench",
                    records: records.len(),
                    report: r,
                },
            )?;
        }
    }
    writeln!(out, "report written to {}", path.display())?;
    Ok(())
}

/// Wall-time statistics over repeated fusion passes, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchStats {
    pub config: FusionConfig,
    pub threads: usize,
    pub samples: Vec<f64>,
    pub median: f64,
    pub p95: f64,
    /// Visual tokens fused per second at the median time.
    pub tokens_per_second: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn bench(args: &BenchArgs, out: &mut dyn Write) -> Result<BenchStats> {
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let (config, file_seed) = args.model.resolve(FusionConfig::demo())?;
    let seed = args.seed.or(file_seed).unwrap_or(0);
    let inputs = synth(&config, seed, TokenDistribution::Gaussian)?;
    let weights = weights_for(&config, None, seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| CliError::Threads(e.to_string()))?;
    let threads = pool.current_num_threads();

    let mut samples = Vec::with_capacity(args.reps);
    let mut stages = Vec::new();
    for rep in 0..args.reps {
        let start = Instant::now();
        let (_, timings) = pool.install(|| fuse_timed(&inputs, &weights, &config))?;
        let elapsed = start.elapsed().as_secs_f64();
        info!("rep {rep}: {elapsed:.4} s");
        samples.push(elapsed);
        if rep == 0 {
            stages = timings;
        }
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let stats = BenchStats {
        config,
        threads,
        p95: percentile(&sorted, 0.95),
        tokens_per_second: (config.n_frames * config.m_visual) as f64 / med,
        median: med,
        samples,
    };

    writeln!(
        out,
        "config N={} M_v={} M_s={} d_v={} d_s={} d_a={} heads={}, {} thread(s), {} rep(s)",
        config.n_frames,
        config.m_visual,
        config.m_spatial,
        config.d_visual,
        config.d_spatial,
        config.d_attn,
        config.n_heads,
        threads,
        args.reps
    )?;
    for t in &stages {
        writeln!(out, "  first pass {:<14} {:>10.3} ms", t.stage, t.elapsed.as_secs_f64() * 1e3)?;
    }
    writeln!(
        out,
        "median {:.4} s, p95 {:.4} s, {:.0} tokens/s",
        stats.median, stats.p95, stats.tokens_per_second
    )?;
    if let Some(path) = &args.out {
        write_json(path, &stats)?;
    }
    Ok(stats)
}
