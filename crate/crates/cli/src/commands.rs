use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use capsaudio::analysis::{augment, capsule_scatter, export_transfer_features, AugmentSpec};
use capsaudio::features::{
    synth_multilabel, write_digit_corpus, write_features, DatasetManifest, DigitCorpusConfig, FeatureConfig,
    FeatureMatrix, ManifestEntry, MfccExtractor, Split,
};
use capsaudio::gradcheck::{run_suite, TOLERANCE};
use capsaudio::nn::checkpoint::Checkpoint;
use capsaudio::training::{
    evaluate, experiment_grid, metric_name, render_grid, split_pair, train, Dataset, LabelMode, Model, RunConfig,
};
use capsaudio::{Error, Scalar};

use crate::{Command, ConfigArgs, OutArgs, Precision, SplitArg};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Features { data, out } => features(&data, &out),
        Command::Train { data, config, out, precision } => match precision {
            Precision::F32 => train_run::<f32>(&data, &config, &out),
            Precision::F64 => train_run::<f64>(&data, &config, &out),
        },
        Command::Eval { checkpoint, data, split, out, force } => eval(&checkpoint, &data, split, out.as_deref(), force),
        Command::Grid { data, axis, repeats, jobs, config, out, precision } => match precision {
            Precision::F32 => grid::<f32>(&data, axis, repeats, jobs, &config, &out),
            Precision::F64 => grid::<f64>(&data, axis, repeats, jobs, &config, &out),
        },
        Command::Gradcheck { trials, seed, out, force } => gradcheck(trials, seed, out.as_deref(), force),
        Command::Analyze { checkpoint, data, class, kind, levels, split, out } => {
            let spec = AugmentSpec::new(kind, levels.unwrap_or_else(|| kind.default_levels()))?;
            analyze(&checkpoint, &data, &class, &spec, split, &out)
        }
        Command::Transfer { checkpoint, data, out } => transfer(&checkpoint, &data, &out),
        Command::SynthMultilabel { data, seed, out } => {
            let dir = prepare_dir(&out.out, out.force)?;
            let m = synth_multilabel(&DatasetManifest::load(&data)?, seed, &dir)?;
            Ok(format!(
                "synth-multilabel: {} mixtures over {} classes -> {}",
                m.entries.len(),
                m.class_names.len(),
                dir.display()
            ))
        }
        Command::SynthDigits { reps, seed, out } => {
            let dir = prepare_dir(&out.out, out.force)?;
            let m = write_digit_corpus(&DigitCorpusConfig { reps, seed, ..Default::default() }, &dir)?;
            Ok(format!("synth-digits: {} clips -> {}", m.entries.len(), dir.join("manifest.csv").display()))
        }
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn prepare_dir(dir: &Path, force: bool) -> Result<PathBuf> {
    if dir.is_file() {
        return Err(CliError::Runtime(format!("{} is a file", dir.display())));
    }
    if !force && dir.read_dir().is_ok_and(|mut d| d.next().is_some()) {
        return Err(CliError::Runtime(format!("{} already exists and is not empty (use --force)", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let pairs = args.overrides.iter().map(|s| split_pair(s)).collect::<capsaudio::Result<Vec<_>>>()?;
    cfg.apply(&pairs)?;
    Ok(cfg)
}

fn extractor<T: Scalar>() -> Result<MfccExtractor<T>> {
    Ok(MfccExtractor::new(&FeatureConfig::default())?)
}

/// One split of a manifest with labels indexed into `classes`.
fn load_split<T: Scalar>(m: &DatasetManifest, split: Split, classes: &[String]) -> Result<Dataset<T>> {
    let sub = m.subset(split)?;
    let labels = sub
        .entries
        .iter()
        .map(|e| {
            e.labels
                .iter()
                .map(|l| {
                    classes.iter().position(|c| c == l).ok_or_else(|| {
                        CliError::Config(format!(
                            "label `{l}` is not one of the model classes ({})",
                            classes.join(", ")
                        ))
                    })
                })
                .collect::<Result<BTreeSet<usize>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(sub.materialize(&extractor::<T>()?)?, labels, classes.to_vec())?)
}

fn load_train_test<T: Scalar>(data: &Path, cfg: &RunConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let m = DatasetManifest::load(data)?;
    if m.is_multi_label() && cfg.mode == LabelMode::Single {
        return Err(CliError::Config(format!("{} is multi-label; set mode=multi", data.display())));
    }
    Ok((load_split(&m, Split::Train, &m.class_names)?, load_split(&m, Split::Test, &m.class_names)?))
}

fn config_text(cfg: &RunConfig, data: &Path) -> String {
    let data = fs::canonicalize(data).unwrap_or_else(|_| data.to_path_buf());
    format!("# data={}\n{}", data.display(), cfg.to_text())
}

/// Writes one cache per matrix under `dir/features` and a manifest that
/// keeps the labels and splits of `src`.
fn write_feature_set(src: &DatasetManifest, mats: &[FeatureMatrix<f64>], dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("features"))?;
    let mut entries = Vec::with_capacity(mats.len());
    for (i, (e, m)) in src.entries.iter().zip(mats).enumerate() {
        let stem = e.path.file_stem().map_or_else(|| "clip".into(), |s| s.to_string_lossy().into_owned());
        let rel = PathBuf::from("features").join(format!("{i:05}_{stem}.feat"));
        write_features(dir.join(&rel), m)?;
        entries.push(ManifestEntry { path: rel, labels: e.labels.clone(), split: e.split });
    }
    let out = DatasetManifest::new(dir, entries)?;
    out.save(dir.join("manifest.csv"))?;
    Ok(out)
}

fn features(data: &Path, out: &OutArgs) -> Result<String> {
    let m = DatasetManifest::load(data)?;
    let mats = m.materialize(&extractor::<f64>()?)?;
    let dir = prepare_dir(&out.out, out.force)?;
    write_feature_set(&m, &mats, &dir)?;
    let frames: usize = mats.iter().map(|f| f.n_frames).sum();
    let dims = mats.first().map_or(0, |f| f.n_dims);
    Ok(format!(
        "features: {} clips, {frames} frames x {dims} dims -> {}",
        mats.len(),
        dir.join("manifest.csv").display()
    ))
}

fn train_run<T: Scalar>(data: &Path, args: &ConfigArgs, out: &OutArgs) -> Result<String> {
    let cfg = load_config(args)?;
    let (tr, te) = load_train_test::<T>(data, &cfg)?;
    let dir = prepare_dir(&out.out, out.force)?;
    fs::write(dir.join("config.txt"), config_text(&cfg, data))?;
    let outcome = train(&cfg, &tr, &te)?;
    fs::write(dir.join("metrics.csv"), outcome.metrics.render(&cfg, &tr.class_names))?;
    outcome.model.to_checkpoint(&tr.class_names).save(dir.join("model.ckpt"))?;
    let m = &outcome.metrics;
    Ok(format!(
        "train: {} best test {} {:.4} at epoch {} ({} train / {} test) -> {}",
        cfg.model,
        metric_name(cfg.mode),
        m.best_metric,
        m.best_epoch,
        tr.len(),
        te.len(),
        dir.display()
    ))
}

fn eval(checkpoint: &Path, data: &Path, split: SplitArg, out: Option<&Path>, force: bool) -> Result<String> {
    let (model, classes) = Model::<f64>::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let m = DatasetManifest::load(data)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let set = load_split::<f64>(&m, split, &classes)?;
    let ev = evaluate(&model, &set)?;
    if let Some(out) = out {
        let dir = prepare_dir(out, force)?;
        let mut csv = String::from("path,labels,predicted\n");
        let names = |s: &BTreeSet<usize>| s.iter().map(|&k| classes[k].as_str()).collect::<Vec<_>>().join("|");
        for (e, (truth, pred)) in m.subset(split)?.entries.iter().zip(set.labels.iter().zip(&ev.predictions)) {
            let _ = writeln!(csv, "{},{},{}", e.path.display(), names(truth), names(pred));
        }
        fs::write(dir.join("predictions.csv"), csv)?;
    }
    Ok(format!("eval: {} {:.4} on {} {split} clips", metric_name(model.cfg.mode), ev.metric, set.len()))
}

fn grid<T: Scalar>(
    data: &Path,
    axis: capsaudio::training::GridAxis,
    repeats: usize,
    jobs: usize,
    args: &ConfigArgs,
    out: &OutArgs,
) -> Result<String> {
    let base = load_config(args)?;
    let (tr, te) = load_train_test::<T>(data, &base)?;
    let dir = prepare_dir(&out.out, out.force)?;
    fs::write(dir.join("config.txt"), config_text(&base, data))?;
    let rows = experiment_grid(&base, axis, repeats, jobs, |cfg| Ok(train(cfg, &tr, &te)?.metrics.best_metric))?;
    let table = render_grid(axis, &rows);
    fs::write(dir.join("grid.csv"), &table)?;
    let best = rows.iter().max_by(|a, b| a.mean().total_cmp(&b.mean())).expect("axis has points");
    Ok(format!(
        "grid: {axis} best {}={} mean {:.4} over {repeats} seeds -> {}",
        axis,
        best.label,
        best.mean(),
        dir.join("grid.csv").display()
    ))
}

fn gradcheck(trials: usize, seed: u64, out: Option<&Path>, force: bool) -> Result<String> {
    let results = run_suite(trials, seed)?;
    let mut table = String::from("op,trials,coordinates,max_rel_err,status\n");
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(table, "{},{},{},{:.3e},{status}", r.name, r.trials, r.coordinates, r.max_rel_err);
    }
    print!("{table}");
    if let Some(out) = out {
        fs::write(prepare_dir(out, force)?.join("gradcheck.csv"), &table)?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    if failed > 0 {
        return Err(CliError::Runtime(format!("gradcheck: {failed} of {} checks exceed {TOLERANCE:e}", results.len())));
    }
    Ok(format!("gradcheck: {} checks x {trials} trials passed, worst relative error {worst:.2e}", results.len()))
}

fn analyze(
    checkpoint: &Path,
    data: &Path,
    class: &str,
    spec: &AugmentSpec,
    split: SplitArg,
    out: &OutArgs,
) -> Result<String> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let m = DatasetManifest::load(data)?;
    let sub = m.subset(if split == SplitArg::Train { Split::Train } else { Split::Test })?;
    let mut clips = Vec::new();
    for (i, e) in sub.entries.iter().enumerate() {
        if e.labels.contains(class) {
            let clip = sub.load_clip::<f64>(i)?;
            for &lv in &spec.levels {
                clips.push((lv, augment(&clip, spec.kind, lv)?));
            }
        }
    }
    if clips.is_empty() {
        return Err(CliError::Config(format!("no clips labeled `{class}` in the selected split")));
    }
    let table = capsule_scatter(&ckpt, &clips, class, &FeatureConfig::default())?;
    let dir = prepare_dir(&out.out, out.force)?;
    let path = dir.join("scatter.csv");
    fs::write(&path, table.to_csv())?;
    let top2: f64 = table.pca.explained_variance_ratio.iter().take(2).sum();
    Ok(format!(
        "analyze: {} points for class {class}, top-2 explained variance {top2:.3} -> {}",
        table.rows.len(),
        path.display()
    ))
}

fn transfer(checkpoint: &Path, data: &Path, out: &OutArgs) -> Result<String> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let m = DatasetManifest::load(data)?;
    let mats = m.materialize(&extractor::<f64>()?)?;
    let augmented = export_transfer_features(&ckpt, &mats)?;
    let dir = prepare_dir(&out.out, out.force)?;
    write_feature_set(&m, &augmented, &dir)?;
    let (before, after) = (mats.first().map_or(0, |f| f.n_dims), augmented.first().map_or(0, |f| f.n_dims));
    Ok(format!(
        "transfer: {} clips, {before} -> {after} dims -> {}",
        augmented.len(),
        dir.join("manifest.csv").display()
    ))
}
