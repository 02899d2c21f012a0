use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use brainshot_core::backbones::{Checkpoint, Regime};
use brainshot_core::data::{gen_synthetic, split_classes, GROUND_TRUTH_FILE, SPLIT_FILE};
use brainshot_core::eval::{
    compare_report, evaluate, sweep, EvalConfig, EvalContext, EvalReport, Method, MethodChoice, MethodKind,
    REPORT_JSON,
};
use brainshot_core::paradigms::{
    maml_meta_train, representation_mean, train_base, EpochValidator, FeatureTransform, InnerRates, MamlModel, NcmConfig,
    PtMapConfig,
};
use brainshot_core::{seed, Arch, Backbone, BackboneConfig, ClassSplit, Dataset, DiffusionOperator, SplitPart};
use serde::Serialize;

use crate::config::{
    load_or_default, write_resolved, CompareRun, EvalRun, GenSynthRun, GraphConfig, Paradigm, SplitRun, SweepRun,
    TrainRun,
};
use crate::{CompareArgs, EvalArgs, GenSynthArgs, GraphArgs, SplitArgs, SweepArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train-log.json";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_TEXT: &str = "sweep.txt";

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn required(path: &Path, what: &str) -> Result<()> {
    ensure!(!path.as_os_str().is_empty(), "missing {what} (pass --{what} or set it in the config file)");
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn apply_graph(graph: &mut GraphConfig, args: &GraphArgs) {
    set(&mut graph.keep_fraction, args.graph_keep);
    set(&mut graph.steps, args.diffusion_steps);
    if args.weighted_adjacency {
        graph.weighted_adjacency = true;
    }
}

fn graph_flags_given(args: &GraphArgs) -> bool {
    args.graph_keep.is_some() || args.diffusion_steps.is_some() || args.weighted_adjacency
}

/// The diffusion operator, built only when a GNN needs one.
fn diffusion_for(dataset: &Dataset, graph: &GraphConfig, needed: bool) -> Result<Option<DiffusionOperator>> {
    if !needed {
        return Ok(None);
    }
    let g = dataset
        .graph()
        .context("GNN backbones need a structural graph but the dataset has none")?;
    Ok(Some(graph.operator(g)?))
}

fn load_data(manifest: &Path, split: &Path) -> Result<(Dataset, ClassSplit)> {
    required(manifest, "manifest")?;
    required(split, "split")?;
    let dataset = Dataset::load(manifest)?;
    let split = ClassSplit::load(split)?;
    split.validate(&dataset.class_ids())?;
    Ok((dataset, split))
}

pub fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut run: GenSynthRun = load_or_default(args.config.as_deref())?;
    set(&mut run.out, args.out);
    let s = &mut run.synth;
    set(&mut s.n_classes, args.classes);
    set(&mut s.samples_per_class, args.per_class);
    set(&mut s.roi_count, args.rois);
    set(&mut s.prototype_scale, args.scale);
    set(&mut s.noise_sigma, args.noise);
    set(&mut s.nuisance_dims, args.nuisance);
    set(&mut s.seed, args.seed);
    if args.no_graph {
        s.with_graph = false;
    }
    required(&run.out, "out")?;

    let (dataset, truth) = gen_synthetic(&run.synth)?;
    let manifest = dataset.save(&run.out)?;
    truth.save(&run.out.join(GROUND_TRUTH_FILE))?;
    write_resolved(&run.out, &run)?;
    println!(
        "wrote {} samples of {} classes to {}",
        dataset.len(),
        dataset.classes().len(),
        manifest.display()
    );
    Ok(())
}

pub fn split(args: SplitArgs) -> Result<()> {
    let mut run: SplitRun = load_or_default(args.config.as_deref())?;
    set(&mut run.manifest, args.manifest);
    set(&mut run.out, args.out);
    set(&mut run.seed, args.seed);
    if let Some(s) = args.sizes {
        ensure!(s.len() == 3, "--sizes takes three counts: base,validation,novel");
        run.sizes = (s[0], s[1], s[2]);
    }
    required(&run.manifest, "manifest")?;
    if run.out.as_os_str().is_empty() {
        run.out = run.manifest.parent().unwrap_or(Path::new(".")).join(SPLIT_FILE);
    }

    let dataset = Dataset::load(&run.manifest)?;
    let split = split_classes(&dataset.class_ids(), run.sizes, run.seed)?;
    let dir = match run.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    write_resolved(&dir, &run)?;
    split.save(&run.out)?;
    println!(
        "split {} classes into {}/{}/{} -> {}",
        dataset.classes().len(),
        split.base.len(),
        split.validation.len(),
        split.novel.len(),
        run.out.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut run: TrainRun = load_or_default(args.config.as_deref())?;
    set(&mut run.manifest, args.manifest);
    set(&mut run.split, args.split);
    set(&mut run.out, args.out);
    set(&mut run.paradigm, args.paradigm);
    set(&mut run.backbone.arch, args.arch);
    set(&mut run.backbone.hidden_layers, args.layers);
    set(&mut run.backbone.width, args.width);
    set(&mut run.seed, args.seed);
    set(&mut run.base.batch_size, args.batch_size);
    set(&mut run.base.lr, args.lr);
    set(&mut run.selection_tasks, args.selection_tasks);
    set(&mut run.maml.inner_steps, args.inner_steps);
    set(&mut run.maml.init_inner_lr, args.inner_lr);
    set(&mut run.maml.meta_lr, args.meta_lr);
    set(&mut run.maml.meta_batch_size, args.meta_batch);
    set(&mut run.meta.tasks_per_epoch, args.tasks_per_epoch);
    match run.paradigm {
        Paradigm::Base => set(&mut run.base.epochs, args.epochs),
        Paradigm::Maml => set(&mut run.meta.epochs, args.epochs),
    }
    set(&mut run.meta_spec.ways, args.ways);
    set(&mut run.meta_spec.shots, args.shots);
    set(&mut run.meta_spec.queries, args.queries);
    apply_graph(&mut run.graph, &args.graph);
    run.base.seed = run.seed;
    run.meta.seed = run.seed;
    required(&run.out, "out")?;

    let (dataset, split) = load_data(&run.manifest, &run.split)?;
    let diffusion = diffusion_for(&dataset, &run.graph, run.backbone.arch == Arch::Gnn)?;
    let diffusion = diffusion.as_ref();
    let b = run.backbone;
    let head = match run.paradigm {
        Paradigm::Base => split.base.len(),
        Paradigm::Maml => run.meta_spec.ways,
    };
    let config = BackboneConfig::new(b.arch, b.hidden_layers, b.width, dataset.roi_count(), head)?;
    let init = Backbone::init(config, &mut seed::stream(run.seed, seed::domain::INIT, 0))?;
    write_resolved(&run.out, &run)?;
    // where the checkpoint was written is not part of how it was trained
    let mut training = serde_json::to_value(&run)?;
    if let Some(obj) = training.as_object_mut() {
        obj.remove("out");
    }

    let checkpoint = match run.paradigm {
        Paradigm::Base => {
            let selection_cfg = EvalConfig {
                n_tasks: run.selection_tasks,
                spec: run.selection_spec,
                master_seed: run.seed,
                ..EvalConfig::default()
            };
            let mut select = |candidate: &Backbone| -> brainshot_core::Result<f64> {
                let base_mean = representation_mean(
                    candidate,
                    &dataset,
                    &dataset.indices_of_classes(&split.base),
                    diffusion,
                )?;
                let ncm = NcmConfig {
                    transform: FeatureTransform::Cl2n,
                    base_mean: Some(base_mean),
                };
                let ctx = EvalContext {
                    dataset: &dataset,
                    split: &split,
                    part: SplitPart::Validation,
                    diffusion,
                };
                Ok(evaluate(Method::SimpleShot { backbone: candidate, config: &ncm }, ctx, &selection_cfg)?.mean)
            };
            let validate: Option<EpochValidator<'_>> =
                if run.selection_tasks > 0 { Some(&mut select) } else { None };
            let (trained, log) = train_base(init, &dataset, &split.base, diffusion, &run.base, validate)?;
            write_json(&run.out.join(TRAIN_LOG_FILE), &log)?;
            if let Some(loss) = log.epoch_loss.last() {
                println!("trained {} for {} epochs, final loss {loss:.4}", trained.config(), run.base.epochs);
            } else {
                println!("saved untrained {}", trained.config());
            }
            Checkpoint::new(Regime::Base, trained, run.seed, training)
        }
        Paradigm::Maml => {
            let model = MamlModel::new(init, &run.maml);
            let (model, log) =
                maml_meta_train(model, &dataset, &split.base, run.meta_spec, &run.maml, &run.meta, diffusion)?;
            write_json(&run.out.join(TRAIN_LOG_FILE), &log)?;
            if let Some(loss) = log.epoch_meta_loss.last() {
                println!("meta-trained {} for {} epochs, final meta-loss {loss:.4}", model.backbone.config(), run.meta.epochs);
            } else {
                println!("saved untrained {}", model.backbone.config());
            }
            let InnerRates { steps, groups, values } = model.rates;
            Checkpoint::new(Regime::Maml, model.backbone, run.seed, training).with_inner_rates(steps, groups, values)?
        }
    };
    let path = run.out.join(CHECKPOINT_FILE);
    checkpoint.save(&path)?;
    println!("checkpoint: {}", path.display());
    Ok(())
}

/// Graph settings recorded by `train` inside a checkpoint.
fn training_graph(checkpoint: &Checkpoint) -> Option<GraphConfig> {
    serde_json::from_value(checkpoint.header.training.get("graph")?.clone()).ok()
}

pub fn eval(args: EvalArgs, threads: Option<usize>) -> Result<()> {
    let mut run: EvalRun = load_or_default(args.config.as_deref())?;
    set(&mut run.manifest, args.manifest);
    set(&mut run.split, args.split);
    set(&mut run.part, args.part);
    set(&mut run.out, args.out);
    set(&mut run.method, args.method);
    if args.checkpoint.is_some() {
        run.checkpoint = args.checkpoint;
    }
    set(&mut run.spec.ways, args.ways);
    set(&mut run.spec.shots, args.shots);
    set(&mut run.spec.queries, args.queries);
    set(&mut run.tasks, args.tasks);
    set(&mut run.seed, args.seed);
    set(&mut run.transform, args.transform);
    let p = &mut run.ptmap;
    set(&mut p.beta, args.beta);
    set(&mut p.lambda, args.lambda);
    set(&mut p.alpha, args.alpha);
    set(&mut p.map_iterations, args.map_iterations);
    set(&mut p.sinkhorn_iterations, args.sinkhorn_iterations);
    set(&mut p.prediction, args.prediction);
    if graph_flags_given(&args.graph) {
        let mut g = run.graph.unwrap_or_default();
        apply_graph(&mut g, &args.graph);
        run.graph = Some(g);
    }
    required(&run.out, "out")?;

    let (dataset, split) = load_data(&run.manifest, &run.split)?;
    let checkpoint = match (&run.checkpoint, run.method) {
        (_, MethodKind::Baseline) => None,
        (Some(path), _) => Some(Checkpoint::load(path)?),
        (None, m) => bail!("method {m} needs --checkpoint"),
    };
    let diffusion = match &checkpoint {
        Some(c) if c.header.config.arch == Arch::Gnn => {
            let graph = run.graph.or_else(|| training_graph(c)).unwrap_or_default();
            run.graph = Some(graph);
            diffusion_for(&dataset, &graph, true)?
        }
        _ => None,
    };
    let diffusion = diffusion.as_ref();
    write_resolved(&run.out, &run)?;

    let cfg = EvalConfig {
        n_tasks: run.tasks,
        spec: run.spec,
        master_seed: run.seed,
        threads,
        ..EvalConfig::default()
    };
    let ctx = EvalContext {
        dataset: &dataset,
        split: &split,
        part: run.part,
        diffusion,
    };
    let report = match (run.method, &checkpoint) {
        (MethodKind::Baseline, _) => evaluate(Method::Baseline, ctx, &cfg)?,
        (MethodKind::SimpleShot, Some(c)) => {
            let base_mean = match run.transform {
                FeatureTransform::Cl2n => Some(representation_mean(
                    &c.backbone,
                    &dataset,
                    &dataset.indices_of_classes(&split.base),
                    diffusion,
                )?),
                _ => None,
            };
            let ncm = NcmConfig {
                transform: run.transform,
                base_mean,
            };
            evaluate(Method::SimpleShot { backbone: &c.backbone, config: &ncm }, ctx, &cfg)?
        }
        (MethodKind::PtMap, Some(c)) => {
            let ptmap: PtMapConfig = run.ptmap;
            evaluate(Method::PtMap { backbone: &c.backbone, config: &ptmap }, ctx, &cfg)?
        }
        (MethodKind::Maml, Some(c)) => {
            let (steps, groups) = c
                .header
                .inner_rate_shape
                .context("checkpoint has no learned inner rates; train it with --paradigm maml")?;
            let rates = InnerRates {
                steps,
                groups,
                values: c.inner_rates.clone(),
            };
            let model = MamlModel::from_parts(c.backbone.clone(), rates)?;
            evaluate(Method::Maml { model: &model }, ctx, &cfg)?
        }
        (_, None) => unreachable!("checkpoint presence checked above"),
    };
    report.save(&run.out)?;
    println!(
        "{} {} {} {}-way {}-shot: {:.2} ± {:.2} over {} tasks",
        report.method,
        report.backbone.as_deref().unwrap_or("raw"),
        report.split_part,
        report.spec.ways,
        report.spec.shots,
        report.mean,
        report.ci95,
        report.n_tasks
    );
    Ok(())
}

fn default_choice(kind: MethodKind) -> MethodChoice {
    match kind {
        MethodKind::Baseline => MethodChoice::Baseline,
        MethodKind::SimpleShot => MethodChoice::SimpleShot {
            transform: FeatureTransform::Cl2n,
        },
        MethodKind::PtMap => MethodChoice::PtMap(PtMapConfig::default()),
        MethodKind::Maml => MethodChoice::Maml(Default::default()),
    }
}

pub fn sweep_cmd(args: SweepArgs, threads: Option<usize>) -> Result<()> {
    let mut run: SweepRun = load_or_default(args.config.as_deref())?;
    set(&mut run.manifest, args.manifest);
    set(&mut run.split, args.split);
    set(&mut run.out, args.out);
    set(&mut run.space.archs, args.archs);
    set(&mut run.space.hidden_layers, args.layers);
    set(&mut run.space.widths, args.widths);
    set(&mut run.space.init_seeds, args.seeds);
    if let Some(methods) = args.methods {
        run.space.methods = methods.into_iter().map(default_choice).collect();
    }
    set(&mut run.sweep.eval.n_tasks, args.tasks);
    set(&mut run.sweep.eval.master_seed, args.eval_seed);
    set(&mut run.sweep.train.epochs, args.epochs);
    set(&mut run.sweep.meta_train.epochs, args.meta_epochs);
    set(&mut run.sweep.meta_train.tasks_per_epoch, args.tasks_per_epoch);
    apply_graph(&mut run.graph, &args.graph);
    required(&run.out, "out")?;

    let (dataset, split) = load_data(&run.manifest, &run.split)?;
    let diffusion = diffusion_for(&dataset, &run.graph, run.space.archs.contains(&Arch::Gnn))?;
    write_resolved(&run.out, &run)?;
    let mut config = run.sweep.clone();
    config.eval.threads = threads;
    let outcome = sweep(&run.space, &dataset, &split, diffusion.as_ref(), &config)?;
    write_json(&run.out.join(SWEEP_JSON), &outcome)?;
    let text = outcome.to_text();
    fs::write(run.out.join(SWEEP_TEXT), &text).with_context(|| format!("writing {SWEEP_TEXT}"))?;
    print!("{text}");
    if outcome.best().is_none() {
        bail!("every sweep point failed; see {}", run.out.join(SWEEP_TEXT).display());
    }
    Ok(())
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(REPORT_JSON)
    } else {
        p.to_path_buf()
    }
}

pub fn compare(args: CompareArgs) -> Result<()> {
    let mut run: CompareRun = load_or_default(args.config.as_deref())?;
    if !args.reports.is_empty() {
        run.reports = args.reports;
    }
    if args.out.is_some() {
        run.out = args.out;
    }
    ensure!(!run.reports.is_empty(), "no reports given");
    let reports = run
        .reports
        .iter()
        .map(|p| EvalReport::load(&report_path(p)).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_report(&reports)?;
    let text = table.to_text();
    if let Some(dir) = &run.out {
        write_resolved(dir, &run)?;
        fs::write(dir.join("comparison.csv"), table.to_csv())?;
        fs::write(dir.join("comparison.json"), table.to_json()?)?;
        fs::write(dir.join("comparison.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}
