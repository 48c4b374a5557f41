use std::fs;
use std::path::{Path, PathBuf};

use hscl::ablation::{mean_by_setting, run_ablation, write_rows_csv, AblationGrid};
use hscl::eval::{
    export_embeddings, knn_normality_score, normality_score, read_scores_csv, write_scores_csv, EvalSummary,
    Reducer, ScoredSample, TsneParams, KNN_K,
};
use hscl::scenarios::{build_scenario, split_from_manifest, validate_split, ScenarioSplit, SplitManifest};
use hscl::trainer::{fit, FitOptions, TrainState, CHECKPOINT_DIR, DIVERGENCE_DIR, METRICS_FILE};
use hscl::types::LabeledSample;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{read_config, read_json, write_json, Overrides, RunConfig, RunManifest};
use crate::error::{CliError, CliResult};

pub const SPLIT_FILE: &str = "split.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const EMBEDDINGS_PNG: &str = "embeddings.png";

/// Creates `dir` and fails if any of `outputs` already exists there, unless
/// `force` is set, in which case those outputs are removed.
fn prepare_outputs(dir: &Path, outputs: &[&str], force: bool) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    for name in outputs {
        let p = dir.join(name);
        if !p.exists() {
            continue;
        }
        if !force {
            return Err(CliError::usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
        let removed = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
        removed.map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn load_config(path: &Path, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut config = read_config(path)?;
    config.apply(overrides);
    config.resolve()
}

fn load_split(config: &RunConfig, split_path: Option<&Path>) -> CliResult<ScenarioSplit> {
    let (dataset, external) = config.load_datasets()?;
    let split = match split_path {
        Some(p) => {
            let manifest: SplitManifest = read_json(p)?;
            if manifest.spec != config.scenario {
                return Err(CliError::usage(format!(
                    "{} was built from a different scenario than the config",
                    p.display()
                )));
            }
            split_from_manifest(&manifest, &dataset, external.as_ref())?
        }
        None => build_scenario(&config.scenario, &dataset, external.as_ref())?,
    };
    validate_split(&split)?;
    Ok(split)
}

fn print_counts(split: &ScenarioSplit) {
    let c = split.manifest().counts;
    println!(
        "x_n {}  x_a {}  x_u {} (contamination {})  test {}",
        c.x_n, c.x_a, c.x_u, c.x_u_contamination, c.test
    );
}

pub fn make_scenario(config_path: &Path, out: &Path, force: bool, overrides: &Overrides) -> CliResult<()> {
    let config = load_config(config_path, overrides)?;
    let split = load_split(&config, None)?;
    prepare_outputs(out, &[SPLIT_FILE], force)?;
    write_json(&out.join(SPLIT_FILE), &split.manifest())?;
    let mut manifest = RunManifest::for_run(out, &config)?;
    manifest.artifacts.insert("split".into(), SPLIT_FILE.into());
    manifest.write(out)?;
    print_counts(&split);
    Ok(())
}

pub fn train(
    config_path: &Path,
    split_path: Option<&Path>,
    out: &Path,
    force: bool,
    overrides: &Overrides,
) -> CliResult<()> {
    let config = load_config(config_path, overrides)?;
    let split = load_split(&config, split_path)?;
    let mut outputs = vec![METRICS_FILE, CHECKPOINT_DIR, DIVERGENCE_DIR];
    if split_path.is_none() {
        outputs.push(SPLIT_FILE);
    }
    prepare_outputs(out, &outputs, force)?;
    let mut manifest = RunManifest::for_run(out, &config)?;
    match split_path {
        Some(p) => {
            let abs = fs::canonicalize(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            manifest.artifacts.insert("split".into(), abs.display().to_string())
        }
        None => {
            write_json(&out.join(SPLIT_FILE), &split.manifest())?;
            manifest.artifacts.insert("split".into(), SPLIT_FILE.into())
        }
    };
    manifest.artifacts.insert("metrics".into(), METRICS_FILE.into());
    manifest.artifacts.insert("checkpoint".into(), CHECKPOINT_DIR.into());
    manifest.write(out)?;
    print_counts(&split);

    let options = FitOptions {
        out_dir: Some(out.to_path_buf()),
    };
    let state = match fit(&split, &config.hscl, &config.encoder, config.policy(), &options) {
        Ok(s) => s,
        Err(e) if e.is_numerical() => {
            manifest.artifacts.remove("checkpoint");
            manifest.artifacts.insert("divergence_snapshot".into(), DIVERGENCE_DIR.into());
            manifest.write(out)?;
            return Err(CliError::from(e).context(format!(
                "training diverged; last state saved under {}",
                out.join(DIVERGENCE_DIR).display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(last) = state.history.last() {
        println!("epoch {}  total {:.6}  l_ss {:.6}  l_sp {:.6}  l_na {:.6}", last.epoch, last.total, last.l_ss, last.l_sp, last.l_na);
    }
    println!("checkpoint {}", out.join(CHECKPOINT_DIR).display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScoreKind {
    Prototype,
    Knn,
}

pub struct EvalArgs<'a> {
    pub run: &'a Path,
    pub split: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub scores: Option<&'a Path>,
    pub score: ScoreKind,
    pub force: bool,
}

fn recorded_split(run: &Path, manifest: &RunManifest, explicit: Option<&Path>) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| {
        // Relative artifact paths are relative to the run directory.
        manifest.artifacts.get("split").map(|p| run.join(p))
    })
}

fn load_state(run: &Path, checkpoint: Option<&Path>) -> CliResult<TrainState> {
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.join(CHECKPOINT_DIR));
    let (state, _) = TrainState::load(&dir).map_err(|e| CliError::from(e).context(dir.display()))?;
    Ok(state)
}

pub fn eval(args: &EvalArgs<'_>) -> CliResult<()> {
    let mut manifest = RunManifest::read(args.run)?;
    let config = manifest.config.clone();
    let (scored, kind): (Vec<ScoredSample>, &str) = match args.scores {
        Some(path) => (read_scores_csv(path)?, "external"),
        None => {
            let split_path = recorded_split(args.run, &manifest, args.split);
            let split = load_split(&config, split_path.as_deref())?;
            let state = load_state(args.run, args.checkpoint)?;
            let truth = split.test_truth();
            match args.score {
                ScoreKind::Prototype => (normality_score(&state, &split.test, &truth)?, "prototype"),
                ScoreKind::Knn => {
                    let reference = if split.x_n.is_empty() { &split.x_u } else { &split.x_n };
                    (knn_normality_score(&state, reference, &split.test, &truth, KNN_K)?, "knn")
                }
            }
        }
    };
    let summary = EvalSummary::new(&scored, kind, config.scenario.clone())?;
    let mut outputs = vec![SUMMARY_FILE];
    if args.scores.is_none() {
        outputs.push(SCORES_FILE);
    }
    prepare_outputs(args.run, &outputs, args.force)?;
    if args.scores.is_none() {
        write_scores_csv(&args.run.join(SCORES_FILE), &scored)?;
        manifest.artifacts.insert("scores".into(), SCORES_FILE.into());
    }
    write_json(&args.run.join(SUMMARY_FILE), &summary)?;
    manifest.artifacts.insert("summary".into(), SUMMARY_FILE.into());
    manifest.write(args.run)?;
    println!(
        "auroc {:.6}  ({} normal, {} abnormal, {} score)",
        summary.auroc, summary.n_normal, summary.n_abnormal, summary.score_kind
    );
    Ok(())
}

pub fn ablate(config_path: &Path, grid_path: &Path, out: &Path, force: bool, overrides: &Overrides) -> CliResult<()> {
    let config = load_config(config_path, overrides)?;
    let grid: AblationGrid = read_json(grid_path)?;
    grid.cells(&config.hscl)?;
    prepare_outputs(out, &[ABLATION_FILE], force)?;
    let (dataset, external) = config.load_datasets()?;
    let split_for_seed = |seed: u64| {
        let spec = hscl::scenarios::ScenarioSpec {
            seed,
            ..config.scenario.clone()
        };
        build_scenario(&spec, &dataset, external.as_ref())
    };
    let rows = run_ablation(&grid, &config.hscl, &config.encoder, config.policy(), split_for_seed)?;
    write_rows_csv(&out.join(ABLATION_FILE), &rows)?;
    let mut manifest = RunManifest::for_run(out, &config)?;
    manifest.ablation_grid = Some(grid);
    manifest.artifacts.insert("ablation".into(), ABLATION_FILE.into());
    manifest.write(out)?;
    for (setting, mean) in mean_by_setting(&rows) {
        println!("{setting:<10} mean auroc {mean:.6}");
    }
    Ok(())
}

pub struct PlotArgs<'a> {
    pub run: &'a Path,
    pub split: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub reducer: Reducer,
    pub perplexity: f64,
    pub iterations: usize,
    pub max_samples: usize,
    pub size: u32,
    pub force: bool,
}

pub fn plot_embeddings(args: &PlotArgs<'_>) -> CliResult<()> {
    let mut manifest = RunManifest::read(args.run)?;
    let config = manifest.config.clone();
    let split_path = recorded_split(args.run, &manifest, args.split);
    let split = load_split(&config, split_path.as_deref())?;
    let state = load_state(args.run, args.checkpoint)?;

    let mut picked: Vec<usize> = (0..split.test.len()).collect();
    if picked.len() > args.max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(config.hscl.seed);
        picked = sample_indices(&mut rng, split.test.len(), args.max_samples).into_vec();
        picked.sort_unstable();
    }
    let samples: Vec<LabeledSample> = picked.iter().map(|&i| split.test[i].clone()).collect();
    let truth: Vec<bool> = samples.iter().map(|s| split.is_abnormal(s)).collect();
    let params = TsneParams {
        perplexity: args.perplexity,
        iterations: args.iterations,
        seed: config.hscl.seed,
        ..TsneParams::default()
    };
    let table = export_embeddings(&state, &samples, &truth, args.reducer, &params)?;

    let draw = table.coords.ncols() == 2;
    let mut outputs = vec![EMBEDDINGS_FILE];
    if draw {
        outputs.push(EMBEDDINGS_PNG);
    }
    prepare_outputs(args.run, &outputs, args.force)?;
    table.write_csv(&args.run.join(EMBEDDINGS_FILE))?;
    manifest.artifacts.insert("embeddings".into(), EMBEDDINGS_FILE.into());
    if draw {
        table.render_scatter(&args.run.join(EMBEDDINGS_PNG), args.size)?;
        manifest.artifacts.insert("embeddings_png".into(), EMBEDDINGS_PNG.into());
    }
    manifest.write(args.run)?;
    println!("{} points, {} dims -> {}", table.ids.len(), table.coords.ncols(), args.run.join(EMBEDDINGS_FILE).display());
    Ok(())
}
