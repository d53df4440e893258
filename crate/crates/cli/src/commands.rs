use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dkit::experiments::{self, AblationRow, Workload};
use dkit::io;
use dkit::net::{NetConfig, NetParams};
use dkit::oracle::{reference_solution, OracleSolution, OracleStatus};
use dkit::problem::{generate_dataset, Dataset, ProblemInstance, Split};
use dkit::train::{self, BatchProblem, TrainSet};
use nalgebra::DVector;
use rayon::prelude::*;

use crate::config::{resolve, RunConfig};
use crate::{AblationKind, CliError, ConfigArgs, Ctx, SplitArg};

fn resolve_config(args: &ConfigArgs, ctx: &Ctx) -> Result<RunConfig, CliError> {
    let file = args.config.as_ref().map(|p| ctx.path(p));
    let cfg = resolve(&args.profile, file.as_deref(), &args.overrides)?;
    println!("# resolved config (profile {})", args.profile);
    print!("{}", cfg.to_toml());
    Ok(cfg)
}

/// Prints the checksum of every input file before any work starts.
fn echo_inputs(files: &[&Path]) -> Result<(), CliError> {
    for f in files {
        println!("# input {} sha256 {}", f.display(), io::file_checksum(f)?);
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<(Dataset, Vec<ProblemInstance>, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let ds = io::decode_dataset(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let insts = ds.instances()?;
    Ok((ds, insts, io::sha256_hex(&bytes)))
}

fn load_truth(path: &Path, dataset_sha: &str, count: usize) -> Result<Vec<DVector<f64>>, CliError> {
    let of = io::load_oracle(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if of.dataset_sha256 != dataset_sha {
        return Err(CliError::Config(format!("{} was computed for a different dataset", path.display())));
    }
    if of.solutions.len() != count {
        return Err(CliError::Config(format!("{} has {} solutions for {count} instances", path.display(), of.solutions.len())));
    }
    let inaccurate = of.solutions.iter().filter(|s| s.status != OracleStatus::Solved).count();
    if inaccurate > 0 {
        println!("# warning: {inaccurate} reference solution(s) are marked inaccurate");
    }
    Ok(of.solutions.into_iter().map(|s| DVector::from_vec(s.y)).collect())
}

pub fn gen(ctx: &Ctx, args: &ConfigArgs, split: SplitArg, out: &Path) -> Result<(), CliError> {
    let cfg = resolve_config(args, ctx)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let spec = cfg.dataset.spec(split);
    let started = Instant::now();
    let ds = generate_dataset(&spec)?;
    let out = ctx.path(out);
    let sha = io::save_dataset(&out, &ds)?;
    let inst = ds.instance(0)?;
    println!(
        "wrote {} ({:?}, {:?} split): {} instances, n = {}, n_eq = {}, n_ineq = {}, {:.1} ms",
        out.display(),
        spec.family,
        spec.split,
        ds.len(),
        spec.n,
        inst.constraints.n_eq(),
        inst.constraints.n_ineq(),
        started.elapsed().as_secs_f64() * 1e3
    );
    println!("sha256 {sha}");
    Ok(())
}

pub fn oracle(ctx: &Ctx, args: &ConfigArgs, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = resolve_config(args, ctx)?;
    let dataset = ctx.path(dataset);
    let out = ctx.path(out);
    echo_inputs(&[&dataset])?;
    let (_, insts, sha) = load_dataset(&dataset)?;
    let previous: Option<io::OracleFile> = if out.exists() {
        match io::load_oracle(&out) {
            Ok(of) if of.dataset_sha256 == sha && of.solutions.len() == insts.len() => Some(of),
            Ok(_) => {
                println!("# existing {} belongs to another dataset; recomputing", out.display());
                None
            }
            Err(e) => return Err(CliError::Io(format!("{}: {e}", out.display()))),
        }
    } else {
        None
    };
    let started = Instant::now();
    let reused = previous.as_ref().map_or(0, |p| p.solutions.iter().filter(|s| s.status == OracleStatus::Solved).count());
    let solutions: Vec<OracleSolution> = insts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            if let Some(prev) = previous.as_ref().map(|p| &p.solutions[i]) {
                if prev.status == OracleStatus::Solved {
                    return prev.clone();
                }
            }
            reference_solution(inst, &cfg.oracle, &cfg.classical).unwrap_or_else(|_| {
                let y = inst.feasible_init().map(|v| v.as_slice().to_vec()).unwrap_or_default();
                OracleSolution {
                    y,
                    status: OracleStatus::Inaccurate,
                    iterations: 0,
                    prim_res: f64::NAN,
                    dual_res: f64::NAN,
                    polished: false,
                }
            })
        })
        .collect();
    let inaccurate: Vec<usize> =
        solutions.iter().enumerate().filter(|(_, s)| s.status != OracleStatus::Solved).map(|(i, _)| i).collect();
    let worst_prim = solutions.iter().map(|s| s.prim_res).fold(0.0, f64::max);
    let worst_dual = solutions.iter().map(|s| s.dual_res).fold(0.0, f64::max);
    let file_sha = io::save_oracle(&out, &io::OracleFile { dataset_sha256: sha, solutions })?;
    println!(
        "wrote {}: {} solved ({} reused), {} inaccurate, worst primal residual {:.2e}, worst dual residual {:.2e}, {:.1} s",
        out.display(),
        insts.len() - inaccurate.len(),
        reused,
        inaccurate.len(),
        worst_prim,
        worst_dual,
        started.elapsed().as_secs_f64()
    );
    if !inaccurate.is_empty() {
        let shown: Vec<String> = inaccurate.iter().take(20).map(|i| i.to_string()).collect();
        println!("inaccurate instances: {}{}", shown.join(" "), if inaccurate.len() > 20 { " ..." } else { "" });
    }
    println!("sha256 {file_sha}");
    Ok(())
}

fn history_path(out: &Path, history: Option<&Path>, ctx: &Ctx) -> PathBuf {
    match history {
        Some(h) => ctx.path(h),
        None => {
            let mut s = out.as_os_str().to_owned();
            s.push(".history.jsonl");
            PathBuf::from(s)
        }
    }
}

pub fn train(
    ctx: &Ctx,
    args: &ConfigArgs,
    dataset: &Path,
    oracle: Option<&Path>,
    out: &Path,
    history: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = resolve_config(args, ctx)?;
    let dataset = ctx.path(dataset);
    let oracle = oracle.map(|p| ctx.path(p));
    let resume = resume.map(|p| ctx.path(p));
    let out = ctx.path(out);
    let mut inputs: Vec<&Path> = vec![&dataset];
    inputs.extend(oracle.as_deref());
    inputs.extend(resume.as_deref());
    echo_inputs(&inputs)?;

    let (_, insts, sha) = load_dataset(&dataset)?;
    let targets = match &oracle {
        Some(p) => {
            let truth = load_truth(p, &sha, insts.len())?;
            Some(insts.iter().zip(&truth).map(|(i, y)| i.objective.value(y)).collect())
        }
        None => None,
    };
    let data = TrainSet { batch: BatchProblem::from_instances(&insts)?, targets };
    let st = &data.batch.structure;
    let (params, start_epoch) = match &resume {
        Some(p) => {
            let (params, epoch) = io::load_checkpoint(p)?;
            if params.config != cfg.net {
                println!("# note: network settings come from the checkpoint, not the resolved config");
            }
            (params, epoch)
        }
        None => (NetParams::init(cfg.net, st.n, st.l, cfg.train.seed)?, 0),
    };
    let hist_path = history_path(&out, history, ctx);
    let mut kept = Vec::new();
    if resume.is_some() && hist_path.exists() {
        kept = io::read_history(&hist_path)?;
        kept.retain(|r| r.epoch < start_epoch);
    }
    io::write_atomic(&hist_path, io::history_to_jsonl(&kept)?.as_bytes())?;
    io::save_checkpoint(&out, &params, start_epoch)?;

    let mut hist_file = OpenOptions::new().append(true).open(&hist_path).map_err(|e| CliError::Io(e.to_string()))?;
    let mut io_err: Option<CliError> = None;
    let outcome = train::train(params, &data, &cfg.train, start_epoch, |rec, p| {
        if io_err.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).expect("record serializes");
        let res = writeln!(hist_file, "{line}")
            .map_err(|e| CliError::Io(e.to_string()))
            .and_then(|_| io::save_checkpoint(&out, p, rec.epoch + 1).map(|_| ()).map_err(CliError::from));
        if let Err(e) = res {
            io_err = Some(e);
        }
        println!(
            "epoch {:>4}  loss {:.6e}  eq_vio {:.1e}  ineq_vio {:.1e}  rel_err {}  {:.0} ms",
            rec.epoch,
            rec.loss,
            rec.eq_vio,
            rec.ineq_vio,
            rec.rel_err.map_or("-".into(), |r| format!("{r:.3e}")),
            rec.wall_ms
        );
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let done = start_epoch + outcome.history.len();
    let sha_out = io::save_checkpoint(&out, &outcome.params, done)?;
    println!("wrote {} after {done} epochs, sha256 {sha_out}", out.display());
    println!("history {}", hist_path.display());
    if let Some(reason) = outcome.diverged {
        return Err(CliError::Numerical(format!("training diverged ({reason}); last good parameters saved")));
    }
    Ok(())
}

pub fn eval(
    ctx: &Ctx,
    dataset: &Path,
    checkpoint: &Path,
    oracle: Option<&Path>,
    json: Option<&Path>,
    batch: usize,
) -> Result<(), CliError> {
    let dataset = ctx.path(dataset);
    let checkpoint = ctx.path(checkpoint);
    let oracle = oracle.map(|p| ctx.path(p));
    let mut inputs: Vec<&Path> = vec![&dataset, &checkpoint];
    inputs.extend(oracle.as_deref());
    echo_inputs(&inputs)?;
    let (params, epoch) = io::load_checkpoint(&checkpoint)?;
    println!("# network: {}", serde_json::to_string(&params.config).expect("config serializes"));
    let (_, insts, sha) = load_dataset(&dataset)?;
    let truth = match &oracle {
        Some(p) => Some(load_truth(p, &sha, insts.len())?),
        None => None,
    };
    let mut w = Workload::new(&insts[..1], None, insts.clone(), truth)?;
    w.eval_batch = batch.max(1);
    let report = experiments::evaluate_params(&params, &w)?;
    println!("{}", dkit::metrics::render_table(&[(format!("descent-net@{epoch}"), report.clone())]));
    if oracle.is_none() {
        println!("note: no reference solutions given; error columns are empty");
    }
    if let Some(j) = json {
        io::write_atomic(&ctx.path(j), serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
    }
    Ok(())
}

pub struct AblationInputs<'a> {
    pub train_data: &'a Path,
    pub test_data: &'a Path,
    pub train_oracle: Option<&'a Path>,
    pub test_oracle: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub json: Option<&'a Path>,
}

pub fn ablate(ctx: &Ctx, kind: AblationKind, args: &ConfigArgs, inp: AblationInputs<'_>) -> Result<(), CliError> {
    let cfg = resolve_config(args, ctx)?;
    let train_data = ctx.path(inp.train_data);
    let test_data = ctx.path(inp.test_data);
    let train_oracle = inp.train_oracle.map(|p| ctx.path(p));
    let test_oracle = inp.test_oracle.map(|p| ctx.path(p));
    let checkpoint = inp.checkpoint.map(|p| ctx.path(p));
    let mut inputs: Vec<&Path> = vec![&train_data, &test_data];
    inputs.extend(train_oracle.as_deref());
    inputs.extend(test_oracle.as_deref());
    inputs.extend(checkpoint.as_deref());
    echo_inputs(&inputs)?;

    let (_, tr, tr_sha) = load_dataset(&train_data)?;
    let (_, te, te_sha) = load_dataset(&test_data)?;
    let tr_truth = train_oracle.as_deref().map(|p| load_truth(p, &tr_sha, tr.len())).transpose()?;
    let te_truth = test_oracle.as_deref().map(|p| load_truth(p, &te_sha, te.len())).transpose()?;
    let w = Workload::new(&tr, tr_truth.as_deref(), te, te_truth)?;
    let trained = |net: NetConfig| -> Result<NetParams, CliError> {
        match &checkpoint {
            Some(p) => Ok(io::load_checkpoint(p)?.0),
            None => Ok(experiments::run(net, &cfg.train, &w, cfg.train.seed)?.params),
        }
    };

    let (text, json) = match kind {
        AblationKind::LayersK | AblationKind::StepsS | AblationKind::StepsizeStrategy | AblationKind::PgmBaseline => {
            let rows: Vec<AblationRow> = match kind {
                AblationKind::LayersK => experiments::sweep_layers(cfg.net, &cfg.train, &w, &cfg.ablation.layers)?,
                AblationKind::StepsS => experiments::sweep_stages(cfg.net, &cfg.train, &w, &cfg.ablation.stages)?,
                AblationKind::StepsizeStrategy => experiments::compare_step_strategies(cfg.net, &cfg.train, &w)?,
                _ => experiments::compare_pgm_baseline(cfg.net, &cfg.train, &w)?,
            };
            (experiments::render_rows(&rows), serde_json::to_value(&rows))
        }
        AblationKind::SubproblemTrace => {
            let params = trained(NetConfig { stages: 1, ..cfg.net })?;
            let count = cfg.ablation.trace_instances.min(w.test_insts.len());
            let rows = experiments::subproblem_trace(&params, &w.test_insts[..count], cfg.ablation.trace_ref_iters)?;
            (experiments::render_subproblem(&rows), serde_json::to_value(&rows))
        }
        AblationKind::GammaDump => {
            let g = experiments::gamma_table(&trained(cfg.net)?);
            (experiments::render_gammas(&g), serde_json::to_value(&g))
        }
    };
    println!("{text}");
    if let Some(j) = inp.json {
        let value = json.map_err(|e| CliError::Io(e.to_string()))?;
        io::write_atomic(&ctx.path(j), serde_json::to_string_pretty(&value).expect("json").as_bytes())?;
    }
    Ok(())
}
