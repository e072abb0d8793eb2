use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context};
use hypergcn::eventlog::{self, Dataset, PATIENT_RATIOS};
use hypergcn::graphrep::WeightScaler;
use hypergcn::models::{Arch, HyperParams, Model};
use hypergcn::pseudoembed::{BinningConfig, PseudoEmbedder};
use hypergcn::trainer::{evaluate, split_stratified, train, write_curves, TrainResult};
use hypergcn::tuner::{classify_dataset, derive_seed, retrain_best, tune_with, GraphTrainer, Trial, TuneConfig};
use hypergcn::encode::EncoderState;

use crate::artifacts::*;
use crate::config::{ModelId, RunConfig};
use crate::report;

pub struct Ctx {
    pub config: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Ctx {
    fn dataset(&self) -> anyhow::Result<Dataset> {
        load_dataset(&self.config.dataset, &self.config)
    }

    fn check_durations(&self, dataset: &Dataset) -> anyhow::Result<()> {
        if self.config.wants_pseudo() && !dataset.has_durations() {
            bail!("TP models need event durations, but every event in {} is instantaneous", self.config.dataset.display());
        }
        Ok(())
    }

    /// Dataset, fitted state and the split's indices.
    fn prepared(&self) -> anyhow::Result<(Dataset, FittedState, SplitManifest, Vec<usize>, Vec<usize>)> {
        let dir = prepare_dir(&self.out);
        let state = FittedState::load(&dir)?;
        let manifest: SplitManifest = read_json(&dir.join(SPLIT))?;
        let dataset = self.dataset()?;
        if manifest.class_names != dataset.class_names {
            bail!("dataset classes changed since `prepare`; rerun it");
        }
        let (tr, va) = manifest.indices(&dataset)?;
        Ok((dataset, state, manifest, tr, va))
    }
}

pub fn prepare(ctx: &Ctx) -> anyhow::Result<()> {
    let dataset = ctx.dataset()?;
    ctx.check_durations(&dataset)?;
    let fraction = ctx.config.train_config(0).split_fraction;
    let seed = derive_seed(ctx.config.seed, "prepare", 0);
    let (tr, va) = split_stratified(&dataset, fraction, seed)?;
    let train_traces: Vec<_> = tr.iter().map(|&i| dataset.traces[i].clone()).collect();

    let encoder = EncoderState::fit(&train_traces, &dataset.schema)?;
    let scaler = WeightScaler::fit(&train_traces)?;
    let pseudo = if ctx.config.wants_pseudo() || ctx.config.binning.is_some() {
        let b = ctx.config.binning.clone().unwrap_or_default();
        Some(PseudoEmbedder::fit(&train_traces, &b)?)
    } else {
        None
    };

    let dir = prepare_dir(&ctx.out);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(ENCODER), encoder.to_json()? + "\n")?;
    write_json(&dir.join(SCALER), &scaler)?;
    let binning = dir.join(BINNING);
    match &pseudo {
        Some(p) => write_json(&binning, p)?,
        None if binning.exists() => fs::remove_file(&binning)?,
        None => {}
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| dataset.traces[i].case_id.clone()).collect();
    let manifest =
        SplitManifest { seed: ctx.config.seed, fraction, class_names: dataset.class_names.clone(), train: ids(&tr), val: ids(&va) };
    write_json(&dir.join(SPLIT), &manifest)?;
    log::info!(
        "prepared {} cases ({} train / {} validation) into {}",
        dataset.traces.len(),
        tr.len(),
        va.len(),
        dir.display()
    );
    Ok(())
}

fn read_ledger(path: &Path, budget: usize) -> anyhow::Result<Vec<Trial>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut trials = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Trial>(&line) {
            Ok(t) if t.id < budget => trials.push(t),
            Ok(_) => {}
            // a torn final line from an interrupted run
            Err(e) => log::warn!("{}:{}: skipping unreadable trial ({e})", path.display(), n + 1),
        }
    }
    trials.sort_by_key(|t| t.id);
    trials.dedup_by_key(|t| t.id);
    Ok(trials)
}

/// Save checkpoint, curves and validation metrics for a trained model.
fn save_model(
    dir: &Path,
    id: ModelId,
    model: &Model,
    result: &TrainResult,
    dataset: &Dataset,
    state: &FittedState,
    val: &[hypergcn::graphrep::GraphInstance],
) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let ck = Checkpoint::new(model, &dataset.class_names, state.pseudo.is_some(), result.best_epoch);
    write_json(&dir.join("checkpoint.json"), &ck)?;
    let curves = fs::File::create(dir.join("curves.csv"))?;
    write_curves(result, curves)?;
    let eval = evaluate(model, val)?;
    write_json(&dir.join("metrics.json"), &MetricsFile::new(id, "validation", &dataset.class_names, &eval))?;
    Ok(())
}

pub fn tune(ctx: &Ctx) -> anyhow::Result<()> {
    let (dataset, state, _, tr, va) = ctx.prepared()?;
    ctx.check_durations(&dataset)?;
    if ctx.config.wants_pseudo() && state.pseudo.is_none() {
        bail!("TP requested but `prepare` fitted no binning; rerun it");
    }
    let train_graphs = state.graphs(&dataset, &tr)?;
    let val_graphs = state.graphs(&dataset, &va)?;
    let kind = ctx
        .config
        .dataset_kind
        .unwrap_or_else(|| classify_dataset(&dataset.class_counts(), ctx.config.imbalance_threshold));
    let space = ctx.config.search_space.resolve()?;
    log::info!("dataset treated as {kind:?}");

    for &id in &ctx.config.models {
        let name = id.to_string();
        let dir = model_dir(&ctx.out, "models", id);
        fs::create_dir_all(&dir)?;
        let ledger_path = dir.join("trials.jsonl");
        let done = read_ledger(&ledger_path, ctx.config.budget)?;
        // rewrite without any torn tail, then append as trials finish
        let mut ledger = fs::File::create(&ledger_path)?;
        for t in &done {
            append_line(&mut ledger, t)?;
        }
        let ledger = Mutex::new(ledger);

        let seed = derive_seed(ctx.config.seed, "tune", 0);
        let runner = GraphTrainer {
            train: &train_graphs,
            val: &val_graphs,
            dims: state.dims(),
            n_classes: dataset.class_names.len(),
            config: ctx.config.train_config(seed),
            seed: derive_seed(seed, &name, 0),
        };
        let tc = TuneConfig {
            budget: ctx.config.budget,
            train: runner.config.clone(),
            kind,
            seed: runner.seed,
            jobs: ctx.jobs,
            pruning: ctx.config.pruning,
        };
        log::info!("{name}: {} of {} trials to run", ctx.config.budget - done.len(), ctx.config.budget);
        let on_trial = |t: &Trial| {
            log::info!("{name}: trial {} {:?}", t.id, t.status);
            if let Err(e) = append_line(&mut ledger.lock().unwrap(), t) {
                log::error!("writing ledger: {e}");
            }
        };
        let outcome = tune_with(&runner, &space, id.arch, id.conv, &tc, done, &on_trial)
            .with_context(|| format!("tuning {name}"))?;
        let keys = outcome.best.keys.expect("completed");
        log::info!(
            "{name}: best trial {} (accuracy {:.4}, weighted F1 {:.4}); retraining for {} epochs",
            outcome.best.id,
            keys.accuracy,
            keys.weighted_f1,
            ctx.config.retrain_epochs
        );
        let (model, result) = retrain_best(
            &outcome.best,
            &train_graphs,
            &val_graphs,
            state.dims(),
            dataset.class_names.len(),
            ctx.config.retrain_epochs,
            derive_seed(ctx.config.seed, "train", 0),
        )?;
        write_json(&dir.join("best_trial.json"), &outcome.best)?;
        save_model(&dir, id, &model, &result, &dataset, &state, &val_graphs)?;
    }
    Ok(())
}

pub fn train_hp(ctx: &Ctx, hp_path: &Path) -> anyhow::Result<()> {
    let hp: HyperParams = read_json(hp_path)?;
    hp.validate().with_context(|| format!("checking {}", hp_path.display()))?;
    let id = ModelId { arch: hp.arch, conv: hp.conv_kind };
    let (dataset, state, _, tr, va) = ctx.prepared()?;
    if hp.arch == Arch::TP && state.pseudo.is_none() {
        bail!("TP model but `prepare` fitted no binning; list a TP model or a binning in the config");
    }
    let train_graphs = state.graphs(&dataset, &tr)?;
    let val_graphs = state.graphs(&dataset, &va)?;
    let seed = derive_seed(ctx.config.seed, "train", 0);
    let mut model = Model::build(&hp, state.dims(), dataset.class_names.len(), derive_seed(seed, "init", 0))?;
    let result = train(&mut model, &train_graphs, &val_graphs, &ctx.config.train_config(seed), None)?;
    log::info!("{id}: best epoch {} of {}", result.best_epoch, result.epochs());
    save_model(&model_dir(&ctx.out, "train", id), id, &model, &result, &dataset, &state, &val_graphs)
}

/// Re-index labels onto the checkpoint's class list.
fn align_labels(mut dataset: Dataset, class_names: &[String]) -> anyhow::Result<Dataset> {
    let map: Vec<usize> = dataset
        .class_names
        .iter()
        .map(|c| {
            class_names.iter().position(|k| k == c).with_context(|| format!("class `{c}` unknown to the checkpoint"))
        })
        .collect::<anyhow::Result<_>>()?;
    for t in &mut dataset.traces {
        t.label = map[t.label];
    }
    dataset.class_names = class_names.to_vec();
    Ok(dataset)
}

pub fn evaluate_checkpoint(ctx: &Ctx, checkpoint: &Path, dataset_path: Option<&Path>) -> anyhow::Result<()> {
    let ck: Checkpoint = read_json(checkpoint)?;
    let id = ModelId { arch: ck.spec.arch, conv: ck.spec.conv_kind };
    let model = ck.model()?;
    let state = ck.fitted_state(checkpoint)?;
    let (dataset, idx, split) = match dataset_path {
        Some(p) => {
            let ds = align_labels(load_dataset(p, &ctx.config)?, &ck.class_names)?;
            let all: Vec<usize> = (0..ds.traces.len()).collect();
            (ds, all, "dataset")
        }
        None => {
            let (ds, _, _, _, va) = ctx.prepared()?;
            (align_labels(ds, &ck.class_names)?, va, "validation")
        }
    };
    let graphs = state.graphs(&dataset, &idx)?;
    let eval = evaluate(&model, &graphs)?;
    let path = model_dir(&ctx.out, "eval", id).join("metrics.json");
    let mf = MetricsFile::new(id, split, &ck.class_names, &eval);
    write_json(&path, &mf)?;
    print!("{}", report::text(&mf));
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn report(inputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    if inputs.is_empty() {
        bail!("report needs at least one metrics JSON or trial ledger");
    }
    fs::create_dir_all(out)?;
    let mut metrics = Vec::new();
    for p in inputs {
        if p.extension().is_some_and(|e| e == "jsonl") {
            let trials = read_ledger(p, usize::MAX)?;
            let stem = p.parent().and_then(|d| d.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ledger".into());
            report::write_ledger_tables(&trials, &out.join(format!("{stem}_trials.csv")), &out.join(format!("{stem}_curves.csv")))?;
        } else {
            metrics.push(read_json::<MetricsFile>(p)?);
        }
    }
    if !metrics.is_empty() {
        report::write_csv(&metrics, &out.join("report.csv"))?;
        let text: String = metrics.iter().map(report::text).collect::<Vec<_>>().join("\n");
        fs::write(out.join("report.txt"), &text)?;
        print!("{text}");
    }
    Ok(())
}

pub struct SynthArgs {
    pub kind: String,
    pub n: usize,
    pub classes: usize,
    pub ratios: Option<Vec<f64>>,
    pub seed: u64,
}

/// Write `data.csv` plus a ready-to-edit `config.json` into `out`.
pub fn synth(args: &SynthArgs, out: &Path) -> anyhow::Result<()> {
    let (dataset, mut config) = match args.kind.as_str() {
        "balanced" => {
            let ds = eventlog::synth_balanced(args.n, args.classes, args.seed)?;
            let mut c = RunConfig::new("data.csv".into(), ds.schema.clone(), "outcome");
            // instantaneous events: no TP
            c.models.retain(|m| m.arch != Arch::TP);
            (ds, c)
        }
        "imbalanced" => {
            let ratios = args.ratios.clone().unwrap_or_else(|| PATIENT_RATIOS.to_vec());
            let ds = eventlog::synth_imbalanced(args.n, &ratios, args.seed)?;
            let mut c = RunConfig::new("data.csv".into(), ds.schema.clone(), "outcome");
            c.binning = Some(BinningConfig::default());
            (ds, c)
        }
        other => bail!("unknown synth kind `{other}` (expected balanced or imbalanced)"),
    };
    config.seed = args.seed;
    fs::create_dir_all(out)?;
    let file = OpenOptions::new().write(true).create(true).truncate(true).open(out.join("data.csv"))?;
    eventlog::write_csv_to(&dataset, file, "outcome")?;
    write_json(&out.join("config.json"), &config)?;
    log::info!("wrote {} cases to {}", dataset.traces.len(), out.join("data.csv").display());
    Ok(())
}
