use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use selfdistill::analysis::{analyze_soft_labels, AnalysisOptions, Sampling};
use selfdistill::datagen::{
    generate_synthetic_dataset, inject_label_noise, load_folds, make_fold_splits, save_folds, DatasetManifest,
    FoldSplit, NoiseConfig, NoiseMode,
};
use selfdistill::distill::{
    generate_soft_labels, run_fold_protocol, smooth_soft_labels, train_student, train_teacher, FrameStore,
    SoftLabelSet, SoftTargetScope, SoftTargets,
};
use selfdistill::ensemble::{ensemble_predict, export_predictions, import_predictions, EnsembleSpec, ExportFormat};
use selfdistill::experiment::{
    emit_report, per_video_table, run_ablation, validate_config, ExperimentConfig, ReportFormat,
};
use selfdistill::metrics::evaluate;
use selfdistill::model::{file_hash, Checkpoint};
use selfdistill::vocab::TripletVocabulary;

#[derive(Parser)]
#[command(name = "selfdistill", version, about = "Self-distillation for surgical action-triplet recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "seed.teacher_init")]
    seed_teacher_init: Option<u64>,
    #[arg(long = "seed.student_init")]
    seed_student_init: Option<u64>,
    #[arg(long = "seed.data")]
    seed_data: Option<u64>,
    #[arg(long = "seed.noise")]
    seed_noise: Option<u64>,
    #[arg(long = "seed.baseline")]
    seed_baseline: Option<u64>,
    /// Worker threads for fold-level parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => validate_config(path)?,
            None => ExperimentConfig::default(),
        };
        let seeds = [
            ("teacher_init", self.seed_teacher_init),
            ("student_init", self.seed_student_init),
            ("data", self.seed_data),
            ("noise", self.seed_noise),
            ("baseline", self.seed_baseline),
        ];
        for (name, value) in seeds {
            if let Some(v) = value {
                config.seeds.set(name, v)?;
            }
        }
        if let Some(w) = self.workers {
            config.workers = w;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct FoldArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Fold file written by `split`; computed from the data seed if absent.
    #[arg(long)]
    folds: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset and write its manifest.
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_videos: Option<usize>,
        #[arg(long)]
        frames_per_video: Option<usize>,
        #[arg(long)]
        instruments: Option<usize>,
        #[arg(long)]
        verbs: Option<usize>,
        #[arg(long)]
        targets: Option<usize>,
        #[arg(long)]
        n_valid_triplets: Option<usize>,
        #[arg(long)]
        imbalance_exponent: Option<f64>,
        #[arg(long)]
        max_triplets_per_frame: Option<usize>,
        #[arg(long)]
        n_phases: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        /// Label noise rate; overrides the configured rate.
        #[arg(long)]
        noise_rate: Option<f64>,
        #[arg(long, value_parser = parse_noise_mode)]
        noise_mode: Option<NoiseMode>,
    },
    /// Write video-level cross-validation folds.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n_folds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher on hard labels.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a teacher over its training frames to produce soft labels.
    GenSoftLabels {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Label smoothing; defaults to the configured value.
        #[arg(long)]
        smoothing: Option<f64>,
        /// Also store auxiliary-head soft labels.
        #[arg(long)]
        all_heads: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student on soft labels.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        soft: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher, soft labels and student for every fold.
    RunFolds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the predictions of an ensemble spec.
    EnsembleInfer {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_export_format)]
        format: Option<ExportFormat>,
    },
    /// Score a prediction file against a manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the report and the per-video table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Component-match study of a soft-label file.
    AnalyzeSoftLabels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        soft: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file; checked against the manifest's.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Draw baseline classes with replacement.
        #[arg(long)]
        with_replacement: bool,
        #[arg(long, default_value_t = 0)]
        draw_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the four-rung ablation ladder.
    RunAblation {
        #[command(flatten)]
        common: Common,
        /// Output directory; overrides the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_noise_mode(s: &str) -> Result<NoiseMode, String> {
    match s {
        "swap_one_component" => Ok(NoiseMode::SwapOneComponent),
        "drop_triplet" => Ok(NoiseMode::DropTriplet),
        "add_triplet" => Ok(NoiseMode::AddTriplet),
        _ => Err("expected swap_one_component, drop_triplet or add_triplet".into()),
    }
}

fn parse_export_format(s: &str) -> Result<ExportFormat, String> {
    s.parse().map_err(|e: selfdistill::Error| e.to_string())
}

fn load_store(data: &Path) -> Result<FrameStore> {
    let manifest = DatasetManifest::load(data).with_context(|| format!("loading {}", data.display()))?;
    Ok(FrameStore::load(manifest.materialize()?)?)
}

fn fold_split(store: &FrameStore, args: &FoldArgs, config: &ExperimentConfig) -> Result<FoldSplit> {
    let folds = match &args.folds {
        Some(path) => load_folds(path)?,
        None => make_fold_splits(store.manifest(), config.n_folds, config.seeds.data)?,
    };
    folds
        .into_iter()
        .find(|f| f.fold_id == args.fold)
        .with_context(|| format!("no fold {}", args.fold))
}

fn save_checkpoint(ckpt: &Checkpoint, out: &Path) -> Result<()> {
    let hash = ckpt.save(out)?;
    println!(
        "{} epoch {} val mAP {} sha256 {hash}",
        out.display(),
        ckpt.meta.epoch,
        ckpt.meta.val_map.map_or("-".into(), |m| format!("{m:.4}"))
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::MakeSynthetic {
            common,
            out,
            n_videos,
            frames_per_video,
            instruments,
            verbs,
            targets,
            n_valid_triplets,
            imbalance_exponent,
            max_triplets_per_frame,
            n_phases,
            image_size,
            noise_rate,
            noise_mode,
        } => {
            let config = common.config()?;
            let mut spec = config.data.synthetic.clone().unwrap_or_default();
            macro_rules! set {
                ($($f:ident),*) => { $( if let Some(v) = $f { spec.$f = v; } )* };
            }
            set!(
                n_videos,
                frames_per_video,
                instruments,
                verbs,
                targets,
                n_valid_triplets,
                imbalance_exponent,
                max_triplets_per_frame,
                n_phases,
                image_size
            );
            spec.seed = config.seeds.data;
            let mut manifest = generate_synthetic_dataset(&spec)?;
            let rate = noise_rate.unwrap_or(config.noise.rate);
            if rate > 0.0 {
                let (noisy, report) = inject_label_noise(
                    &manifest,
                    &NoiseConfig {
                        rate,
                        mode: noise_mode.unwrap_or(config.noise.mode),
                        seed: config.seeds.noise,
                    },
                )?;
                println!("noise: {} of {} labels changed", report.changed, report.examined);
                manifest = noisy;
            }
            manifest.save(&out)?;
            println!("{} frames in {} videos -> {}", manifest.len(), manifest.videos().len(), out.display());
        }
        Command::Split {
            common,
            data,
            n_folds,
            out,
        } => {
            let config = common.config()?;
            let manifest = DatasetManifest::load(&data)?;
            let folds = make_fold_splits(&manifest, n_folds.unwrap_or(config.n_folds), config.seeds.data)?;
            save_folds(&folds, &out)?;
            for f in &folds {
                println!("fold {}: {} validation videos", f.fold_id, f.val_videos.len());
            }
        }
        Command::TrainTeacher { common, fold, out } => {
            let config = common.config()?;
            let store = load_store(&fold.data)?;
            let split = fold_split(&store, &fold, &config)?;
            let ckpt = train_teacher(&store, &split, &config.distill.teacher_config(&config.seeds.protocol()))?;
            save_checkpoint(&ckpt, &out)?;
        }
        Command::GenSoftLabels {
            common,
            fold,
            teacher,
            smoothing,
            all_heads,
            out,
        } => {
            let config = common.config()?;
            let store = load_store(&fold.data)?;
            let split = fold_split(&store, &fold, &config)?;
            let hash = file_hash(&teacher)?;
            let ckpt = Checkpoint::load(&teacher, Some(&hash))?;
            let all_heads = all_heads || config.distill.soft_target_scope == SoftTargetScope::AllHeads;
            let soft = generate_soft_labels(&ckpt, &hash, &store, &split, all_heads)?;
            let soft = smooth_soft_labels(&soft, smoothing.unwrap_or(config.distill.smoothing))?;
            soft.save(&out)?;
            println!("{} soft labels -> {}", soft.len(), out.display());
        }
        Command::TrainStudent {
            common,
            fold,
            soft,
            out,
        } => {
            let config = common.config()?;
            let store = load_store(&fold.data)?;
            let split = fold_split(&store, &fold, &config)?;
            let labels = SoftLabelSet::load(&soft)?;
            let targets = SoftTargets {
                labels: &labels,
                alpha: config.distill.alpha,
                scope: config.distill.soft_target_scope,
            };
            let ckpt = train_student(&store, &split, targets, &config.distill.student_config(&config.seeds.protocol()))?;
            save_checkpoint(&ckpt, &out)?;
        }
        Command::RunFolds {
            common,
            data,
            folds,
            out,
        } => {
            let config = common.config()?;
            let store = load_store(&data)?;
            let folds = match folds {
                Some(p) => load_folds(&p)?,
                None => make_fold_splits(store.manifest(), config.n_folds, config.seeds.data)?,
            };
            let record = run_fold_protocol(&store, &folds, &config.distill, &config.seeds.protocol(), &out, config.workers)?;
            for f in &record.folds {
                println!(
                    "fold {}: teacher {} student {} (epoch {})",
                    f.fold_id,
                    f.teacher.val_map.map_or("-".into(), |m| format!("{m:.4}")),
                    f.student.val_map.map_or("-".into(), |m| format!("{m:.4}")),
                    f.student.epoch
                );
            }
        }
        Command::EnsembleInfer {
            spec,
            data,
            out,
            format,
        } => {
            let spec = EnsembleSpec::load(&spec)?;
            let store = load_store(&data)?;
            let pred = ensemble_predict(&spec, &store)?;
            export_predictions(&pred, &out, format.unwrap_or_else(|| ExportFormat::from_path(&out)))?;
            println!("{} frames -> {}", pred.len(), out.display());
        }
        Command::Evaluate {
            common,
            pred,
            data,
            out,
        } => {
            let config = common.config()?;
            let manifest = DatasetManifest::load(&data)?;
            let pred = import_predictions(&pred, ExportFormat::from_path(&pred))?;
            let report = evaluate(&pred, &manifest, &config.metrics)?;
            std::fs::create_dir_all(&out)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            std::fs::write(out.join("eval_report.json"), json)?;
            std::fs::write(out.join("per_video.tsv"), per_video_table(&report.per_video))?;
            let pct = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v));
            println!("triplet mAP: {}", pct(report.triplet_map));
            println!("instrument mAP: {}", pct(report.instrument_map));
            println!("verb mAP: {}", pct(report.verb_map));
            println!("target mAP: {}", pct(report.target_map));
            println!("top-{} accuracy: {}", report.top_k, pct(report.top_k_accuracy));
            println!("excluded classes: {}", report.excluded_classes);
        }
        Command::AnalyzeSoftLabels {
            common,
            soft,
            data,
            vocab,
            with_replacement,
            draw_seed,
            out,
        } => {
            common.config()?;
            let manifest = DatasetManifest::load(&data)?;
            if let Some(v) = vocab {
                if TripletVocabulary::load(&v)? != *manifest.vocab() {
                    bail!("{} does not match the manifest vocabulary", v.display());
                }
            }
            let soft = SoftLabelSet::load(&soft)?;
            let options = AnalysisOptions {
                sampling: if with_replacement {
                    Sampling::WithReplacement
                } else {
                    Sampling::WithoutReplacement
                },
                seed: draw_seed,
                ..AnalysisOptions::default()
            };
            let report = analyze_soft_labels(&manifest, &soft, &options)?;
            std::fs::create_dir_all(&out)?;
            report.save(&out.join("similarity.json"), &out.join("similarity_frames.tsv"), manifest.vocab())?;
            print!("{}", report.summary());
        }
        Command::RunAblation { common, out } => {
            let mut config = common.config()?;
            if let Some(out) = out {
                config.out_dir = out;
            }
            let report = run_ablation(&config)?;
            emit_report(&report, &config.out_dir, ReportFormat::Json)?;
            emit_report(&report, &config.out_dir, ReportFormat::Text)?;
            print!("{}", report.to_text());
            if !report.is_complete() {
                bail!("ablation finished with failed rungs");
            }
        }
    }
    Ok(())
}
