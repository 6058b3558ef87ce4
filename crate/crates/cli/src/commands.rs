use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mamba_cnn::data::{
    load_samples, read_ppm, read_synth, split_samples, synth_dataset, synth_range, transform_eval, write_synth,
    Dataset, Sample, SplitData,
};
use mamba_cnn::layers::Mode;
use mamba_cnn::model::{make_variant, Variant};
use mamba_cnn::training::{
    gradcheck_preset, history_csv, peek_precision, GradcheckConfig, GradcheckPreset, TrainEvent, TrainObserver,
};
use mamba_cnn::{evaluate, Checkpoint, Error, EvalReport, Precision, Rng, Scalar, Trainer};

use crate::config::RunConfig;
use crate::{AblateArgs, ConfigArgs, DataArgs, EvalArgs, Failure, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

const DEFAULT_OUT: &str = "mamba-cnn-out";

fn write_file(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn create_dir(path: &Path) -> CmdResult {
    std::fs::create_dir_all(path).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn bad_checkpoint(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure::usage(format!("checkpoint {}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Puts the command-line data source into the config, which must then name
/// exactly one source.
fn apply_data_args(cfg: &mut RunConfig, args: &DataArgs) -> CmdResult {
    if let Some(n) = args.synthetic {
        cfg.data.synthetic = Some(n);
        cfg.data.images = None;
        cfg.data.labels = None;
    } else if let Some(dir) = &args.data {
        cfg.data.synthetic = None;
        cfg.data.images = Some(dir.clone());
        cfg.data.labels = args.labels.clone();
    }
    if cfg.data.images.is_some() && cfg.data.labels.is_none() {
        cfg.data.labels = cfg.data.images.as_ref().map(|d| d.join("labels.csv"));
    }
    match (&cfg.data.images, cfg.data.synthetic) {
        (Some(_), Some(_)) => Err(Failure::usage("give either image data or --synthetic, not both")),
        (None, None) => Err(Failure::usage("no data source: pass --data DIR [--labels CSV] or --synthetic N")),
        _ => Ok(()),
    }
}

fn load_split<S: Scalar>(cfg: &RunConfig) -> Result<SplitData<S>, Failure> {
    let samples = match (&cfg.data.images, &cfg.data.labels, cfg.data.synthetic) {
        (Some(dir), Some(labels), _) => load_samples(dir, labels)?,
        (_, _, Some(n)) => synth_range::<S>(n, cfg.model.input_size, cfg.data.synthetic_seed, 0)?.samples,
        _ => return Err(Failure::usage("no data source")),
    };
    Ok(split_samples(samples, &cfg.data.split(), cfg.model.input_size)?)
}

struct Progress(bool);

impl TrainObserver for Progress {
    fn on_event(&mut self, event: &TrainEvent) {
        if let (false, TrainEvent::EpochEnd { record }) = (self.0, event) {
            eprintln!(
                "epoch {:>4}  train_loss={:.6}  val_loss={:.6}  lr={:.3e}",
                record.epoch, record.train_loss, record.val_loss, record.lr
            );
        }
    }
}

pub fn train(args: TrainArgs) -> CmdResult {
    if let Some(path) = &args.resume {
        return match peek_precision(path).map_err(bad_checkpoint(path))? {
            Precision::F32 => resume::<f32>(&args, path),
            Precision::F64 => resume::<f64>(&args, path),
        };
    }
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    apply_data_args(&mut cfg, &args.data)?;
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F32 => run_train::<f32>(cfg, &args, None),
        Precision::F64 => run_train::<f64>(cfg, &args, None),
    }
}

fn resume<S: Scalar>(args: &TrainArgs, path: &Path) -> CmdResult {
    let ckpt = Checkpoint::<S>::load(path).map_err(bad_checkpoint(path))?;
    let sibling = path.with_file_name("config.json");
    let config_path = match &args.config {
        Some(p) => p.clone(),
        None if sibling.exists() => sibling,
        None => return Err(Failure::usage("--resume needs --config or a config.json beside the checkpoint")),
    };
    let mut cfg = RunConfig::load(&config_path)?;
    apply_data_args(&mut cfg, &args.data)?;
    cfg.model = ckpt.model_config.clone();
    cfg.train = ckpt.train_config.clone();
    if ckpt.train.is_none() {
        eprintln!("{} holds weights only; starting a new schedule from them", path.display());
    }
    let trainer = ckpt.into_trainer().map_err(bad_checkpoint(path))?;
    run_train(cfg, args, Some(trainer))
}

fn run_train<S: Scalar>(mut cfg: RunConfig, args: &TrainArgs, resumed: Option<Trainer<S>>) -> CmdResult {
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    cfg.out_dir = Some(out.clone());
    let split = load_split::<S>(&cfg)?;
    let mut trainer = match resumed {
        Some(t) if t.stats != split.stats => {
            return Err(Failure {
                code: 2,
                message: "training data differ from the data the checkpoint was trained on".into(),
            })
        }
        Some(t) => t,
        None => Trainer::new(&cfg.model, &cfg.train, &split.stats)?,
    };
    create_dir(&out)?;
    write_file(&out.join("config.json"), &cfg.to_canonical())?;

    let until = args.until.unwrap_or(usize::MAX);
    trainer.run_until(&split.train, &split.val, until, &mut Progress(args.quiet))?;
    Checkpoint::from_trainer(&trainer).save(&out.join("last.mckp"))?;
    write_file(&out.join("history.csv"), &history_csv(&trainer.state.history))?;
    if !trainer.is_finished() {
        eprintln!(
            "paused after {} epochs; continue with --resume {}",
            trainer.state.history.len(),
            out.join("last.mckp").display()
        );
        return Ok(());
    }

    let outcome = trainer.restore_best()?;
    Checkpoint::from_model(&trainer.model, &trainer.config, &trainer.stats).save(&out.join("best.mckp"))?;
    trainer.model.set_mode(Mode::Eval);
    let report = evaluate(&mut trainer.model, &split.val, &trainer.stats, trainer.config.batch_size)?;
    let kv = format!(
        "epochs={}\nbest_epoch={}\nbest_val_loss={:.12}\nstopped_early={}\n{}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.stopped_early,
        report.render_kv()
    );
    write_file(&out.join("report.txt"), &kv)?;
    println!("validation split ({} samples)", split.val.len());
    println!("{}", report.render_table());
    print!("{kv}");
    Ok(())
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let path = &args.checkpoint;
    match peek_precision(path).map_err(bad_checkpoint(path))? {
        Precision::F32 => eval_with::<f32>(&args),
        Precision::F64 => eval_with::<f64>(&args),
    }
}

fn eval_with<S: Scalar>(args: &EvalArgs) -> CmdResult {
    let path = &args.checkpoint;
    let ckpt = Checkpoint::<S>::load(path).map_err(bad_checkpoint(path))?;
    let mut model = ckpt.build_model().map_err(bad_checkpoint(path))?;
    let samples: Vec<Sample<S>> = match (&args.synthetic_manifest, &args.data) {
        (Some(m), _) => {
            let dir = if m.is_dir() { m.as_path() } else { m.parent().unwrap_or(Path::new(".")) };
            read_synth::<S>(dir)?.samples
        }
        (None, Some(dir)) => {
            let labels = args.labels.clone().unwrap_or_else(|| dir.join("labels.csv"));
            load_samples(dir, &labels)?
        }
        (None, None) => return Err(Failure::usage("pass --data DIR [--labels CSV] or --synthetic-manifest PATH")),
    };
    let dataset = Dataset::new(samples, &ckpt.stats, model.config.input_size)?;
    model.set_mode(Mode::Eval);
    let report = evaluate(&mut model, &dataset, &ckpt.stats, args.batch_size)?;
    println!("{}", report.render_table());
    print!("{}", report.render_kv());
    Ok(())
}

pub fn ablate(args: AblateArgs) -> CmdResult {
    let variants: Vec<Variant> = args
        .variants
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if variants.is_empty() {
        return Err(Failure::usage("--variants lists no variant"));
    }
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    apply_data_args(&mut cfg, &args.data)?;
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F32 => ablate_with::<f32>(&cfg, &variants, &args),
        Precision::F64 => ablate_with::<f64>(&cfg, &variants, &args),
    }
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

fn pc_text(report: &EvalReport, digits: usize) -> String {
    report.pc.map_or("undefined".into(), |v| format!("{v:.digits$}"))
}

fn ablate_with<S: Scalar>(cfg: &RunConfig, variants: &[Variant], args: &AblateArgs) -> CmdResult {
    let split = load_split::<S>(cfg)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
    }
    let mut rows = Vec::new();
    for &v in variants {
        if !args.quiet {
            eprintln!("variant {v}: {}", v.description());
        }
        let model = make_variant(&cfg.model, v);
        let mut trainer = Trainer::<S>::new(&model, &cfg.train, &split.stats)?;
        let outcome = trainer.fit(&split.train, &split.val, &mut Progress(args.quiet))?;
        trainer.model.set_mode(Mode::Eval);
        let report = evaluate(&mut trainer.model, &split.val, &split.stats, cfg.train.batch_size)?;
        if let Some(dir) = &args.out {
            write_file(&dir.join(format!("history_{v}.csv")), &history_csv(&outcome.history))?;
        }
        rows.push((v, report, outcome.best_epoch));
    }

    let mut table = String::new();
    let _ = writeln!(table, "{:<24} {:^8} {:^15} {:>8} {:>8}", "Variant", "SSM Gate", "Feature Pyramid", "PC", "RMSE");
    for (v, r, _) in &rows {
        let _ = writeln!(
            table,
            "{:<24} {:^8} {:^15} {:>8} {:>8.4}",
            format!("({v}) {}", v.description()),
            mark(v.gate()),
            mark(v.pyramid()),
            pc_text(r, 4),
            r.rmse
        );
    }
    println!("{table}");

    let mut csv = String::from("variant,gate,pyramid,pc,rmse,mae,best_epoch\n");
    for (v, r, best) in &rows {
        println!(
            "variant={v} gate={} pyramid={} pc={} rmse={:.12} mae={:.12} best_epoch={best}",
            v.gate(),
            v.pyramid(),
            pc_text(r, 12),
            r.rmse,
            r.mae
        );
        let _ = writeln!(csv, "{v},{},{},{},{:.12},{:.12},{best}", v.gate(), v.pyramid(), pc_text(r, 12), r.rmse, r.mae);
    }
    if let Some(dir) = &args.out {
        write_file(&dir.join("ablation.csv"), &csv)?;
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let preset: GradcheckPreset = args.preset.parse()?;
    let cfg = GradcheckConfig {
        eps: args.eps,
        tol: args.tol,
        seed: args.seed,
        ..GradcheckConfig::default()
    };
    let reports = gradcheck_preset(preset, &cfg)?;
    for r in &reports {
        print!("{}", r.render());
    }
    let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    let failed = reports.iter().filter(|r| !r.passed(args.tol)).count();
    println!("max_rel_err={worst:.6e}");
    println!("failed={failed}");
    if failed > 0 {
        return Err(Failure {
            code: 3,
            message: format!("{failed} of {} gradient checks exceed {:e}", reports.len(), args.tol),
        });
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> CmdResult {
    let set = synth_dataset::<f32>(args.n, args.size, args.seed)?;
    create_dir(&args.out)?;
    write_synth(&args.out, &set)?;
    println!("wrote {} samples ({}x{}) to {}", args.n, args.size, args.size, args.out.display());
    Ok(())
}

pub fn predict(args: PredictArgs) -> CmdResult {
    let path = &args.checkpoint;
    match peek_precision(path).map_err(bad_checkpoint(path))? {
        Precision::F32 => predict_with::<f32>(&args),
        Precision::F64 => predict_with::<f64>(&args),
    }
}

fn predict_with<S: Scalar>(args: &PredictArgs) -> CmdResult {
    let path = &args.checkpoint;
    let ckpt = Checkpoint::<S>::load(path).map_err(bad_checkpoint(path))?;
    let mut model = ckpt.build_model().map_err(bad_checkpoint(path))?;
    model.set_mode(Mode::Eval);
    let image = read_ppm::<S>(&args.image)?;
    let x = transform_eval(&image, model.config.input_size, &ckpt.stats)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let y = model.forward(&x.reshape(&shape)?, &mut Rng::new(0))?;
    let score = ckpt.stats.denormalize_score(y.to_f64_vec()[0])?;
    println!("score={score:.6}");
    Ok(())
}

pub fn config(args: ConfigArgs) -> CmdResult {
    let cfg = match &args.file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&args.preset)?,
    };
    print!("{}", cfg.to_canonical());
    Ok(())
}
