//! The `pcam` command line: dataset generation, training, AM, evaluation,
//! the diffusion study, misclassification review and SVG export.
//!
//! Every command writes its outputs and a `manifest.json` into `--out-dir`.
//! Exit codes: 0 success, 1 replay mismatch, 2 contract or configuration
//! error, 3 numeric failure, 4 I/O or malformed input.

pub mod config;
pub mod manifest;
pub mod review;
pub mod store;
pub mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use pcam_core::am::{am_single, AmConfig, AmMethod, AmResult, Optimizer};
use pcam_core::checkpoint::Checkpoint;
use pcam_core::classifier::{accuracy, train_classifier, ClassifierConfig, ClassifierModel, ClassifierTrainConfig};
use pcam_core::generators::{
    reconstruction_chamfer, train_ae, train_aed, train_naed, AeConfig, AutoencoderModel, DiscriminatorConfig,
    DiscriminatorModel, GenKind, GenTrainConfig, LatentGenerator,
};
use pcam_core::io::load_cloud;
use pcam_core::metrics::{diffusion_study, evaluate_am_set, DiffusionConfig, EvalConfig};
use pcam_core::shapes::{dataset_generate, derive_seed, AverageSource, DatasetConfig, DatasetSplit, ShapeFamily};
use pcam_core::{Error, PointCloud, Result};

use config::Settings;
use manifest::{relative_to, sha256_file, sha256_files, FileHash, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "pcam", version, about = "Activation maximization toolkit for point-cloud classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for independent work items.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// `key = value` file with tunables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting; overrides the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic labeled shape dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the point-cloud classifier.
    TrainCls {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a generative prior (ae, aed or naed).
    TrainGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        data: PathBuf,
        /// Frozen classifier for the feature losses (aed, naed).
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Autoencoder checkpoint to start from instead of a fresh one.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run activation maximization.
    Am {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Autoencoder checkpoint for latent methods.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Target class name or index; all classes when omitted.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Score a directory of AM outputs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        am_dir: PathBuf,
    },
    /// FID/CD/EMD of random clouds of growing spread against real objects.
    DiffusionStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
    },
    /// List misclassified test instances with AM outputs for comparison.
    Review {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        am_dir: PathBuf,
    },
    /// Render a cloud as three orthographic projections.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out-dir>/<input stem>.svg`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-run a command from its manifest and compare outputs.
    Replay {
        manifest: PathBuf,
        /// Where to write the re-run; defaults to the recorded directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 4,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Bookkeeping for one command: settings, hashed inputs, written outputs.
struct Session {
    name: &'static str,
    argv: Vec<String>,
    common: Common,
    settings: Settings,
    inputs: Vec<FileHash>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Session {
    fn new(name: &'static str, argv: Vec<String>, common: Common) -> Result<Self> {
        if common.threads == 0 {
            return Err(Error::Contract("--threads must be ≥ 1".into()));
        }
        let settings = Settings::load(common.config.as_deref(), &common.set)?;
        std::fs::create_dir_all(&common.out_dir)?;
        Ok(Self { name, argv, common, settings, inputs: Vec::new(), outputs: Vec::new(), started: Instant::now() })
    }

    /// Call once every setting the command understands has been read.
    fn settings_done(&self) -> Result<()> {
        self.settings.check_consumed()
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash { path: path.display().to_string(), sha256: sha256_file(path)? });
        Ok(())
    }

    fn input_set(&mut self, label: &Path, files: &[PathBuf]) -> Result<()> {
        self.inputs.push(FileHash { path: label.display().to_string(), sha256: sha256_files(files)? });
        Ok(())
    }

    fn dataset(&mut self, dir: &Path) -> Result<DatasetSplit> {
        let (split, files) = at(dir, store::load_dataset(dir))?;
        self.input_set(dir, &files)?;
        Ok(split)
    }

    fn checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        let ck = at(path, Checkpoint::load(path))?;
        self.input(path)?;
        Ok(ck)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.common.out_dir.join(name)
    }

    fn wrote(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out(name);
        std::fs::write(&path, contents)?;
        self.wrote(path);
        Ok(())
    }

    fn finish(self) -> Result<RunManifest> {
        let config = self.settings.finish()?;
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            outputs.push(FileHash { path: relative_to(p, &self.common.out_dir), sha256: sha256_file(p)? });
        }
        let m = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.name.to_string(),
            argv: self.argv,
            cwd: std::env::current_dir()?.display().to_string(),
            seed: self.common.seed,
            threads: self.common.threads,
            config,
            inputs: self.inputs,
            outputs,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        m.write(&self.common.out_dir)?;
        Ok(m)
    }
}

/// Names the offending path in I/O errors.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn dispatch(command: Command, argv: Vec<String>) -> Result<i32> {
    let (name, common) = match &command {
        Command::Replay { manifest, out_dir } => return replay(manifest, out_dir.as_deref()),
        Command::GenData { common } => ("gen-data", common),
        Command::TrainCls { common, .. } => ("train-cls", common),
        Command::TrainGen { common, .. } => ("train-gen", common),
        Command::Am { common, .. } => ("am", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::DiffusionStudy { common, .. } => ("diffusion-study", common),
        Command::Review { common, .. } => ("review", common),
        Command::Export { common, .. } => ("export", common),
    };
    let out_dir = common.out_dir.clone();
    let mut s = Session::new(name, argv, common.clone())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(s.common.threads)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::GenData { .. } => gen_data(&mut s),
        Command::TrainCls { data, .. } => train_cls(&mut s, &data),
        Command::TrainGen { kind, data, classifier, init, .. } => {
            train_gen(&mut s, &kind, &data, classifier.as_deref(), init.as_deref())
        }
        Command::Am { method, data, classifier, generator, class, count, .. } => {
            am(&mut s, &method, &data, &classifier, generator.as_deref(), class.as_deref(), count)
        }
        Command::Eval { data, classifier, am_dir, .. } => eval(&mut s, &data, &classifier, &am_dir),
        Command::DiffusionStudy { data, classifier, .. } => diffusion(&mut s, &data, &classifier),
        Command::Review { data, classifier, am_dir, .. } => review_cmd(&mut s, &data, &classifier, &am_dir),
        Command::Export { input, output, .. } => export(&mut s, &input, output),
        Command::Replay { .. } => unreachable!("handled above"),
    })?;
    let m = s.finish()?;
    println!("{}: wrote {} outputs to {}", m.command, m.outputs.len(), out_dir.display());
    Ok(0)
}

pub fn dataset_config(s: &mut Settings, seed: u64) -> Result<DatasetConfig> {
    let d = DatasetConfig::default();
    let names: Vec<String> = s.get_list("families", &d.families.iter().map(|f| f.name().to_string()).collect::<Vec<_>>())?;
    let families = names.iter().map(|n| n.parse()).collect::<Result<Vec<ShapeFamily>>>()?;
    Ok(DatasetConfig {
        families,
        train_per_class: s.get("train_per_class", d.train_per_class)?,
        test_per_class: s.get("test_per_class", d.test_per_class)?,
        points: s.get("points", d.points)?,
        scale_range: (s.get("scale_min", d.scale_range.0)?, s.get("scale_max", d.scale_range.1)?),
        max_rotation: s.get("max_rotation", d.max_rotation)?,
        noise_sigma: s.get("noise_sigma", d.noise_sigma)?,
        seed,
    })
}

fn gen_data(s: &mut Session) -> Result<()> {
    let cfg = dataset_config(&mut s.settings, s.common.seed)?;
    s.settings_done()?;
    let split = dataset_generate(&cfg)?;
    let dir = s.common.out_dir.clone();
    for p in store::save_dataset(&dir, &split, Some(&cfg))? {
        s.wrote(p);
    }
    println!("generated {} train / {} test clouds over {} classes", split.train.len(), split.test.len(), split.class_count());
    Ok(())
}

fn train_cls(s: &mut Session, data: &Path) -> Result<()> {
    let split = s.dataset(data)?;
    let d = ClassifierConfig::new(split.class_count());
    let arch = ClassifierConfig {
        shared: s.settings.get_list("shared", &d.shared)?,
        head: s.settings.get_list("head", &d.head)?,
        classes: split.class_count(),
    };
    let dt = ClassifierTrainConfig::default();
    let hyper = ClassifierTrainConfig {
        epochs: s.settings.get("epochs", dt.epochs)?,
        batch: s.settings.get("batch", dt.batch)?,
        lr: s.settings.get("lr", dt.lr)?,
        seed: derive_seed(s.common.seed, 1),
    };
    s.settings_done()?;
    let model = ClassifierModel::new(arch, derive_seed(s.common.seed, 0))?;
    let (model, history) = train_classifier(model, &split, &hyper)?;
    let meta = serde_json::json!({ "train": hyper, "best_test_accuracy": history.best_test_accuracy() });
    let path = s.out("classifier.ckpt");
    model.to_checkpoint(meta).save(&path)?;
    s.wrote(path);
    s.write("classifier_history.json", serde_json::to_string_pretty(&history)?)?;
    println!("best test accuracy {:.4} at epoch {}", history.best_test_accuracy(), history.best_epoch);
    Ok(())
}

pub fn gen_train_config(st: &mut Settings, seed: u64) -> Result<GenTrainConfig> {
    let d = GenTrainConfig::default();
    Ok(GenTrainConfig {
        w_f: st.get("w_f", d.w_f)?,
        w_f1: st.get("w_f1", d.w_f1)?,
        w_f2: st.get("w_f2", d.w_f2)?,
        w_d: st.get("w_d", d.w_d)?,
        d_alt_threshold: st.get("d_alt_threshold", d.d_alt_threshold)?,
        d_noise_threshold: st.get("d_noise_threshold", d.d_noise_threshold)?,
        d_noise_sigma: st.get("d_noise_sigma", d.d_noise_sigma)?,
        ae_param_noise_sigma: st.get("ae_param_noise_sigma", d.ae_param_noise_sigma)?,
        epochs: st.get("epochs", d.epochs)?,
        batch: st.get("batch", d.batch)?,
        lr: st.get("lr", d.lr)?,
        seed,
    })
}

fn train_gen(s: &mut Session, kind: &str, data: &Path, classifier: Option<&Path>, init: Option<&Path>) -> Result<()> {
    let kind: GenKind = kind.parse()?;
    let split = s.dataset(data)?;
    let points = split.points_per_cloud().ok_or_else(|| Error::Contract("empty dataset".into()))?;
    let seed = s.common.seed;
    let cfg = gen_train_config(&mut s.settings, derive_seed(seed, 2))?;
    let ae = match init {
        Some(p) => {
            let ck = s.checkpoint(p)?;
            AutoencoderModel::from_checkpoint(&ck)?
        }
        None => {
            let d = AeConfig::new(points);
            let arch = AeConfig {
                points,
                encoder: s.settings.get_list("encoder", &d.encoder)?,
                decoder: s.settings.get_list("decoder", &d.decoder)?,
            };
            AutoencoderModel::new(arch, derive_seed(seed, 0))?
        }
    };
    s.settings_done()?;
    let out = match kind {
        GenKind::Ae => train_ae(ae, &split, &cfg)?,
        GenKind::Aed | GenKind::Naed => {
            let path = classifier.ok_or_else(|| Error::Contract(format!("train-gen --kind {kind} needs --classifier")))?;
            let ck = s.checkpoint(path)?;
            let cls = ClassifierModel::from_checkpoint(&ck)?;
            let disc = DiscriminatorModel::new(DiscriminatorConfig::default(), derive_seed(seed, 1))?;
            if kind == GenKind::Aed {
                train_aed(ae, disc, &cls, &split, &cfg)?
            } else {
                train_naed(ae, disc, &cls, &split, &cfg)?
            }
        }
    };
    let meta = serde_json::json!({ "kind": kind, "train": cfg });
    let path = s.out(&format!("{kind}.ckpt"));
    out.ae.to_checkpoint(meta.clone()).save(&path)?;
    s.wrote(path);
    if let Some(d) = &out.discriminator {
        let path = s.out(&format!("{kind}_discriminator.ckpt"));
        d.to_checkpoint(meta).save(&path)?;
        s.wrote(path);
    }
    s.write(&format!("{kind}_log.jsonl"), out.log.to_jsonl()?)?;
    let test: Vec<&PointCloud> = split.test.iter().map(|c| &c.cloud).collect();
    let cd = reconstruction_chamfer(&out.ae, &test)?;
    let violations = out.log.violations(&cfg);
    let summary = serde_json::json!({
        "kind": kind,
        "held_out_reconstruction_cd": cd,
        "epoch_losses": out.log.epoch_losses(),
        "rule_violations": violations.len(),
    });
    s.write(&format!("{kind}_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{kind}: held-out reconstruction CD {cd:.5}, {} rule violations", violations.len());
    Ok(())
}

pub fn am_config(st: &mut Settings, method: AmMethod, seed: u64) -> Result<AmConfig> {
    let d = AmConfig::new(0, method);
    let optimizer = match st.get("optimizer", "adam".to_string())?.as_str() {
        "adam" => Optimizer::Adam,
        "sgd" => Optimizer::Sgd,
        other => return Err(Error::Contract(format!("unknown optimizer `{other}`"))),
    };
    let average_source = match st.get("average_source", "class-test".to_string())?.as_str() {
        "class-test" => AverageSource::ClassTest,
        "global-test" => AverageSource::GlobalTest,
        other => return Err(Error::Contract(format!("unknown average source `{other}`"))),
    };
    Ok(AmConfig {
        lr: st.get("lr", d.lr)?,
        iterations: st.get("iterations", d.iterations)?,
        stuck_window: st.get("stuck_window", d.stuck_window)?,
        stuck_eps: st.get("stuck_eps", d.stuck_eps)?,
        kick_sigma: st.get("kick_sigma", d.kick_sigma)?,
        init_jitter: st.get("init_jitter", d.init_jitter)?,
        optimizer,
        average_source,
        seed,
        ..d
    })
}

fn resolve_class(split: &DatasetSplit, class: &str) -> Result<usize> {
    if let Some(i) = split.class_index(class) {
        return Ok(i);
    }
    match class.parse::<usize>() {
        Ok(i) if i < split.class_count() => Ok(i),
        _ => Err(Error::Contract(format!("unknown class `{class}`"))),
    }
}

fn am(
    s: &mut Session,
    method: &str,
    data: &Path,
    classifier: &Path,
    generator: Option<&Path>,
    class: Option<&str>,
    count: usize,
) -> Result<()> {
    let method: AmMethod = method.parse()?;
    if count == 0 {
        return Err(Error::Contract("--count must be ≥ 1".into()));
    }
    let split = s.dataset(data)?;
    let ck = s.checkpoint(classifier)?;
    let model = ClassifierModel::from_checkpoint(&ck)?;
    let ae = if method.is_latent() {
        let path = generator.ok_or_else(|| Error::Contract(format!("method `{method}` needs --generator")))?;
        let ck = s.checkpoint(path)?;
        if let Some(kind) = ck.metadata.get("kind").and_then(|k| k.as_str()) {
            if kind != method.name() {
                return Err(Error::Contract(format!("generator checkpoint holds a `{kind}` model, method is `{method}`")));
            }
        }
        Some(AutoencoderModel::from_checkpoint(&ck)?)
    } else {
        None
    };
    let base = am_config(&mut s.settings, method, s.common.seed)?;
    s.settings_done()?;
    let classes: Vec<usize> = match class {
        Some(c) => vec![resolve_class(&split, c)?],
        None => (0..split.class_count()).collect(),
    };
    let jobs: Vec<(usize, usize)> = classes.iter().flat_map(|&c| (0..count).map(move |i| (c, i))).collect();
    let gen = ae.as_ref().map(|a| a as &(dyn LatentGenerator + Sync));
    let results: Vec<Result<AmResult>> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let cfg = AmConfig { target_class: c, seed: base.seed + i as u64, ..base.clone() };
            am_single(&model, gen.map(|g| g as &dyn LatentGenerator), &split, &cfg)
        })
        .collect();
    let mut summary = Vec::new();
    for ((c, i), r) in jobs.iter().zip(results) {
        let r = r?;
        let stem = store::am_stem(&split.class_names[*c], *i);
        r.write(&s.common.out_dir, &stem)?;
        s.wrote(s.out(&format!("{stem}.ply")));
        s.wrote(s.out(&format!("{stem}.json")));
        summary.push(serde_json::json!({
            "class": split.class_names[*c],
            "index": i,
            "initial_activation": r.initial_activation(),
            "final_activation": r.final_activation(),
            "kicks": r.kick_events.len(),
        }));
    }
    s.write("am_summary.json", serde_json::to_string_pretty(&summary)?)?;
    println!("{} AM runs with method {method}", jobs.len());
    Ok(())
}

fn eval(s: &mut Session, data: &Path, classifier: &Path, am_dir: &Path) -> Result<()> {
    let split = s.dataset(data)?;
    let ck = s.checkpoint(classifier)?;
    let model = ClassifierModel::from_checkpoint(&ck)?;
    let (generated, files) = at(am_dir, store::load_am_outputs(am_dir, &split.class_names))?;
    s.input_set(am_dir, &files)?;
    if let Some((k, _)) = generated.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Contract(format!("no AM outputs for class `{}` in {}", split.class_names[*k], am_dir.display())));
    }
    let d = EvalConfig::default();
    let cfg = EvalConfig {
        k_refs: s.settings.get("k_refs", d.k_refs)?,
        reg_eps: s.settings.get("reg_eps", d.reg_eps)?,
        emd: s.settings.get("emd", d.emd)?,
        exclude_diagonal: s.settings.get("exclude_diagonal", d.exclude_diagonal)?,
        seed: s.common.seed,
    };
    s.settings_done()?;
    let per_class: Vec<Vec<PointCloud>> = generated.into_values().collect();
    let report = evaluate_am_set(&model, &per_class, &split, &cfg)?;
    s.write("report.json", report.to_json()?)?;
    s.write("report.csv", report.to_csv())?;
    let a = &report.aggregate;
    println!("m-IS {:.4}  FID {:.5}  CD {:.5}  PC-AMS {:.4}", a.m_is, a.fid, a.cd, a.pc_ams);
    Ok(())
}

fn diffusion(s: &mut Session, data: &Path, classifier: &Path) -> Result<()> {
    let split = s.dataset(data)?;
    let ck = s.checkpoint(classifier)?;
    let model = ClassifierModel::from_checkpoint(&ck)?;
    let d = DiffusionConfig::default();
    let cfg = DiffusionConfig {
        steps: s.settings.get("steps", d.steps)?,
        n_per_step: s.settings.get("n_per_step", d.n_per_step)?,
        max_radius: s.settings.get("max_radius", d.max_radius)?,
        max_sigma: s.settings.get("max_sigma", d.max_sigma)?,
        reg_eps: s.settings.get("reg_eps", d.reg_eps)?,
        emd: s.settings.get("emd", d.emd)?,
        seed: s.common.seed,
    };
    s.settings_done()?;
    let table = diffusion_study(&model, &split, &cfg)?;
    s.write("diffusion.csv", table.to_csv())?;
    s.write("diffusion.json", serde_json::to_string_pretty(&table)?)?;
    println!("{} study rows", table.rows.len());
    Ok(())
}

fn review_cmd(s: &mut Session, data: &Path, classifier: &Path, am_dir: &Path) -> Result<()> {
    let split = s.dataset(data)?;
    let ck = s.checkpoint(classifier)?;
    let model = ClassifierModel::from_checkpoint(&ck)?;
    let (generated, files) = at(am_dir, store::load_am_outputs(am_dir, &split.class_names))?;
    s.input_set(am_dir, &files)?;
    let firsts: BTreeMap<usize, PointCloud> =
        generated.into_iter().filter_map(|(k, mut v)| (!v.is_empty()).then(|| (k, v.swap_remove(0)))).collect();
    s.settings_done()?;
    let rows = review::review(&model, &split, &firsts)?;
    let acc = accuracy(&model, &split.test)?;
    let dir = s.out("review");
    for p in review::write_bundle(&dir, &split, &rows, &firsts)? {
        s.wrote(p);
    }
    let report = serde_json::json!({ "test_accuracy": acc, "test_size": split.test.len(), "misclassified": rows });
    s.write("review.json", serde_json::to_string_pretty(&report)?)?;
    println!("{} misclassified of {} (accuracy {acc:.4})", rows.len(), split.test.len());
    Ok(())
}

fn export(s: &mut Session, input: &Path, output: Option<PathBuf>) -> Result<()> {
    s.settings_done()?;
    let cloud = at(input, load_cloud(input))?;
    s.input(input)?;
    let path = output.unwrap_or_else(|| {
        let stem = input.file_stem().map_or_else(|| "cloud".into(), |x| x.to_string_lossy().into_owned());
        s.out(&format!("{stem}.svg"))
    });
    std::fs::write(&path, svg::render(&cloud))?;
    s.wrote(path);
    Ok(())
}

/// Swaps the `--out-dir` value in a recorded argument list.
fn with_out_dir(argv: &[String], dir: &Path) -> Vec<String> {
    let dir = dir.display().to_string();
    let mut out = Vec::with_capacity(argv.len() + 2);
    let mut it = argv.iter();
    let mut replaced = false;
    while let Some(a) = it.next() {
        if a == "--out-dir" {
            it.next();
            out.extend(["--out-dir".to_string(), dir.clone()]);
            replaced = true;
        } else if a.starts_with("--out-dir=") {
            out.push(format!("--out-dir={dir}"));
            replaced = true;
        } else {
            out.push(a.clone());
        }
    }
    if !replaced {
        out.extend(["--out-dir".to_string(), dir]);
    }
    out
}

fn replay(manifest_path: &Path, out_dir: Option<&Path>) -> Result<i32> {
    let m = RunManifest::read(manifest_path)?;
    let target = match out_dir {
        Some(d) => std::path::absolute(d)?,
        None => manifest_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    let target = std::path::absolute(target)?;
    let argv = with_out_dir(&m.argv, &target);
    std::env::set_current_dir(&m.cwd)?;
    let code = run(std::iter::once("pcam".to_string()).chain(argv));
    if code != 0 {
        return Ok(code);
    }
    let bad = m.mismatches(&target)?;
    if bad.is_empty() {
        println!("replay: all {} outputs identical", m.outputs.len());
        Ok(0)
    } else {
        eprintln!("replay: {} outputs differ: {}", bad.len(), bad.join(", "));
        Ok(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dir_is_swapped_or_appended() {
        let a: Vec<String> = ["gen-data", "--out-dir", "x", "--seed", "3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(with_out_dir(&a, Path::new("/y")), ["gen-data", "--out-dir", "/y", "--seed", "3"]);
        let b: Vec<String> = ["export", "--out-dir=x"].iter().map(|s| s.to_string()).collect();
        assert_eq!(with_out_dir(&b, Path::new("/y")), ["export", "--out-dir=/y"]);
        let c: Vec<String> = vec!["gen-data".into()];
        assert_eq!(with_out_dir(&c, Path::new("/y")), ["gen-data", "--out-dir", "/y"]);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Contract(String::new())), 2);
        assert_eq!(exit_code(&Error::Numeric(String::new())), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 4);
        assert_eq!(exit_code(&Error::Parse { offset: 0, message: String::new() }), 4);
    }
}
