use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use lwise_core::curriculum::{make_session_plan, Phase, Variant};
use lwise_core::dataset::{load_image, save_png, Split};
use lwise_core::enhance::{enhance_image, make_heatmap, Direction, EnhanceConfig, EnhancedImage};
use lwise_core::expserve::{outcome_table, read_events, trial_records, State, SystemClock, TickClock};
use lwise_core::robusttrain::{accuracy, robust_accuracy, train_guides, AttackConfig, TrainConfig};
use lwise_core::simlearner::{
    run_cohort, simulate_cohort, FeatureCache, FeatureExtractor, FeatureSpace, LearnerConfig,
};
use lwise_core::statlab::{
    learning_curve, participant_median_chisq, pooled_trial_chisq, summarize, DEFAULT_REPLICATES, DEFAULT_WINDOW,
};
use lwise_core::synth::{generate, SynthConfig};
use lwise_core::tensornet::{checkpoint, InputShape, Tensor};
use lwise_core::{Error, Result};
use lwise_server::{BackgroundServer, HttpDriver};

mod context;

use context::{load_config, load_dataset, load_model, Loaded};

#[derive(Parser)]
#[command(
    name = "lwise",
    version,
    about = "Logit-guided image enhancement and difficulty-ordered category learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural texture dataset as an image folder.
    Synth {
        #[arg(long, default_value_t = context::DEFAULT_SYNTHETIC_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the vanilla and robust guide models.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Enhance (or disrupt) images with a guide model.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        /// An image-folder dataset (`<split>/<class>/<name>.png`) or one image.
        #[arg(long = "in")]
        input: PathBuf,
        /// Ground-truth class index; required for a single image.
        #[arg(long)]
        class: Option<usize>,
        /// Comma-separated class indices of the task (defaults to all).
        #[arg(long, value_delimiter = ',')]
        task_classes: Vec<usize>,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value = "maximize_gt")]
        direction: Direction,
        /// Output directory (or file, for a single image).
        #[arg(long)]
        out: PathBuf,
        /// Also write `<name>_heat.png` and `<name>_overlay.png`.
        #[arg(long)]
        heatmaps: bool,
        #[arg(long, default_value_t = 9)]
        kernel: usize,
    },
    /// Score every image and write the difficulty index.
    Score {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data.model`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides `data.images`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialise one session plan as JSON.
    Plan {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a cohort of simulated learners.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "lwise,control")]
        variants: Vec<Variant>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also keep the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Drive sessions through a local HTTP server instead of in-process.
        #[arg(long)]
        http: bool,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        /// `guide` or `pixels`.
        #[arg(long, default_value = "guide")]
        features: String,
    },
    /// Replay an event log into outcome statistics.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plots_dir: Option<PathBuf>,
        #[arg(long)]
        chance: Option<f64>,
        #[arg(long, default_value_t = 0.9)]
        attention_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the experiment API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn train(config: Option<&Path>, out_dir: &Path, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pair = train_guides(
        &ds,
        &TrainConfig::desk_scale_vanilla(),
        &TrainConfig::desk_scale_finetune(),
        seed,
        |stage, r| {
            eprintln!(
                "{stage} epoch {:>2} lr {:.4} loss {:.4} train {:.3} val {:.3}",
                r.epoch, r.lr, r.loss, r.train_accuracy, r.val_accuracy
            )
        },
    )?;
    let test = ds.indices(Split::Test);
    let attack = AttackConfig::desk_scale();
    for (name, model, history) in [
        ("vanilla", &pair.vanilla, &pair.vanilla_history),
        ("robust", &pair.robust, &pair.robust_history),
    ] {
        checkpoint::save(model, out_dir.join(format!("{name}.lwgm")))?;
        history.save(
            out_dir.join(format!("{name}_history.json")),
            out_dir.join(format!("{name}_history.bits")),
        )?;
        println!(
            "{name}: clean {:.3}, PGD(eps={}) {:.3}",
            accuracy(model, &ds, &test)?,
            attack.epsilon,
            robust_accuracy(model, &ds, &test, &attack)?
        );
    }
    Ok(())
}

struct EnhanceArgs {
    model: PathBuf,
    input: PathBuf,
    class: Option<usize>,
    task_classes: Vec<usize>,
    epsilon: f64,
    alpha: f64,
    direction: Direction,
    out: PathBuf,
    heatmaps: bool,
    kernel: usize,
}

fn write_enhanced(x: &Tensor<f32>, e: &EnhancedImage, stem: &Path, args: &EnhanceArgs) -> Result<()> {
    let shape = InputShape::new(x.shape()[1], x.shape()[2], x.shape()[0]);
    save_png(e.pixels.data(), shape, stem.with_extension("png"))?;
    if args.heatmaps {
        let map = make_heatmap(x, &e.pixels, args.kernel)?;
        let name = stem
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        save_png(
            map.colour().data(),
            shape,
            stem.with_file_name(format!("{name}_heat.png")),
        )?;
        save_png(
            map.overlay(x, 0.7)?.data(),
            shape,
            stem.with_file_name(format!("{name}_overlay.png")),
        )?;
    }
    Ok(())
}

fn enhance(args: EnhanceArgs) -> Result<()> {
    let model = checkpoint::load(&args.model)?;
    let shape = model.spec().input_shape;
    let classes: Vec<usize> = if args.task_classes.is_empty() {
        (0..model.class_count()).collect()
    } else {
        args.task_classes.clone()
    };
    let cfg = EnhanceConfig::new(args.epsilon, args.alpha).with_direction(args.direction);
    let as_tensor = |px: Vec<f32>| Tensor::new(vec![shape.channels, shape.height, shape.width], px);
    if args.input.is_file() {
        let class = args
            .class
            .ok_or_else(|| Error::invalid("--class is required for a single image"))?;
        let x = as_tensor(load_image(&args.input, shape)?)?;
        let e = enhance_image(&model, &args.input.display().to_string(), &x, class, &classes, &cfg)?;
        write_enhanced(&x, &e, &args.out.with_extension(""), &args)?;
        println!(
            "delta {:.4} (budget {}), gt logit {:.3} -> {:.3}, {} steps",
            e.delta_norm, args.epsilon, e.gt_logit_before, e.gt_logit_after, e.steps_run
        );
        return Ok(());
    }
    let ds = lwise_core::dataset::Dataset::load_folder(&args.input, shape)?;
    let mut gain = 0.0;
    let mut n = 0usize;
    for s in ds.samples.iter().filter(|s| classes.contains(&s.class)) {
        let x = as_tensor(s.pixels.clone())?;
        let e = enhance_image(&model, &s.name, &x, s.class, &classes, &cfg)?;
        let stem = args.out.join(&s.name);
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_enhanced(&x, &e, &stem, &args)?;
        gain += e.gt_logit_after - e.gt_logit_before;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(format!(
            "no images of the task classes under {} (expected <split>/<class>/<image>)",
            args.input.display()
        )));
    }
    println!("enhanced {n} images, mean gt logit change {:.3}", gain / n as f64);
    Ok(())
}

fn learner_config(
    sigma: Option<f64>,
    lr: Option<f64>,
    temperature: Option<f64>,
    features: &str,
) -> Result<LearnerConfig> {
    let mut lc = LearnerConfig::default();
    lc.jitter_sigma = sigma.unwrap_or(lc.jitter_sigma);
    lc.lr = lr.unwrap_or(lc.lr);
    lc.temperature = temperature.unwrap_or(lc.temperature);
    lc.features = match features {
        "guide" => FeatureSpace::Guide,
        "pixels" => FeatureSpace::Pixels { factor: 4 },
        other => return Err(Error::invalid(format!("unknown feature space {other:?}"))),
    };
    Ok(lc)
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    config: Option<&Path>,
    variants: &[Variant],
    n: usize,
    seed: u64,
    out: &Path,
    log: Option<&Path>,
    http: bool,
    lc: LearnerConfig,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if cfg.seed.is_none() {
        cfg.seed = Some(seed);
    }
    let loaded = Loaded::new(cfg)?;
    let service = loaded.service(log, Arc::new(TickClock::new(0, 1_500)))?;
    let reference: Vec<f32> = loaded
        .dataset
        .indices(Split::Train)
        .iter()
        .flat_map(|&i| loaded.dataset.samples[i].pixels.iter().copied())
        .collect();
    let fx = FeatureExtractor::new(
        lc.features,
        loaded.dataset.shape,
        Some(loaded.model.clone()),
        &reference,
    )?;
    let mut cache = FeatureCache::new(fx);
    let table = if http {
        let service = Arc::new(service);
        let server = BackgroundServer::start(service.clone())?;
        let mut driver = HttpDriver::new(&server.base_url());
        simulate_cohort(&mut driver, &mut cache, &lc, variants, n, seed)?;
        drop(server);
        outcome_table(&service.state(), &loaded.config.experiment_id, None)?
    } else {
        run_cohort(&service, &mut cache, &lc, variants, n, seed)?
    };
    let f = File::create(out).map_err(|e| Error::io(out, e))?;
    table.write_csv(BufWriter::new(f))?;
    for v in variants {
        let acc = table.accuracies(*v);
        let m = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
        println!("{v}: {} participants, mean test accuracy {m:.3}", acc.len());
    }
    Ok(())
}

fn analyze(
    log: &Path,
    out: &Path,
    plots_dir: Option<&Path>,
    chance: Option<f64>,
    attention_threshold: f64,
    window: usize,
    seed: u64,
) -> Result<()> {
    let f = File::open(log).map_err(|e| Error::io(log, e))?;
    let events = read_events(BufReader::new(f))?;
    let state = State::replay(&events)?;
    let experiments: std::collections::BTreeSet<&str> =
        state.sessions.values().map(|s| s.experiment_id.as_str()).collect();
    let mut reports = BTreeMap::new();
    for exp in experiments {
        let all = outcome_table(&state, exp, None)?;
        let table = outcome_table(&state, exp, Some(attention_threshold))?;
        let k = table.task_classes.len().max(1);
        let chance = chance.unwrap_or(1.0 / k as f64);
        let variants: Vec<Variant> = Variant::ALL
            .into_iter()
            .filter(|v| table.variant_rows(*v).next().is_some())
            .collect();
        let summary = summarize(&table, chance, DEFAULT_REPLICATES, seed).ok();
        let mut tests = BTreeMap::new();
        for &v in variants.iter().filter(|&&v| v != Variant::Control) {
            tests.insert(
                v.to_string(),
                serde_json::json!({
                    "pooled_trial": pooled_trial_chisq(&table, v, Variant::Control).ok(),
                    "participant_median": participant_median_chisq(&table, v, Variant::Control).ok(),
                }),
            );
        }
        let withdrawn: BTreeMap<String, usize> = Variant::ALL
            .into_iter()
            .map(|v| {
                let n = state
                    .sessions
                    .values()
                    .filter(|s| {
                        s.experiment_id == exp && s.variant == v && s.status == lwise_core::expserve::Status::Withdrawn
                    })
                    .count();
                (v.to_string(), n)
            })
            .filter(|(_, n)| *n > 0)
            .collect();
        if let Some(dir) = plots_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for &v in &variants {
                let seqs: Vec<Vec<f64>> = table
                    .variant_rows(v)
                    .map(|r| r.train_sequence.iter().map(|&b| b as u8 as f64).collect())
                    .collect();
                let Ok(curve) = learning_curve(&seqs, window) else {
                    continue;
                };
                let path = dir.join(format!("{exp}_learning_curve_{}.csv", v.as_str().to_lowercase()));
                let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
                writeln!(w, "trial,mean,sem")?;
                for (i, (m, s)) in curve.mean.iter().zip(&curve.sem).enumerate() {
                    writeln!(w, "{},{m},{s}", i + 1)?;
                }
            }
            let path = dir.join(format!("{exp}_test_trials.csv"));
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(
                w,
                "participant_id,variant,trial_index,image_id,class,correct,latency_ms"
            )?;
            for s in state.sessions.values().filter(|s| s.experiment_id == exp) {
                for r in trial_records(s).into_iter().filter(|r| r.phase == Phase::Test) {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{}",
                        r.participant_id, r.variant, r.trial_index, r.image_id, r.class, r.correct as u8, r.latency_ms
                    )?;
                }
            }
        }
        reports.insert(
            exp.to_string(),
            serde_json::json!({
                "completed": all.rows.len(),
                "passed_attention": table.rows.len(),
                "withdrawn": withdrawn,
                "summary": summary,
                "tests_vs_control": tests,
            }),
        );
    }
    write_json(out, &reports)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { seed, out } => {
            let ds = generate(&SynthConfig::default(), seed);
            ds.save_folder(&out)?;
            println!("wrote {} images to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Train { config, out_dir, seed } => train(config.as_deref(), &out_dir, seed),
        Command::Enhance {
            model,
            input,
            class,
            task_classes,
            epsilon,
            alpha,
            direction,
            out,
            heatmaps,
            kernel,
        } => enhance(EnhanceArgs {
            model,
            input,
            class,
            task_classes,
            epsilon,
            alpha,
            direction,
            out,
            heatmaps,
            kernel,
        }),
        Command::Score {
            config,
            model,
            data,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if model.is_some() {
                cfg.data.model = model;
            }
            if data.is_some() {
                cfg.data.images = data;
            }
            let ds = load_dataset(&cfg)?;
            let m = load_model(&cfg)?;
            let index = lwise_core::difficulty::DifficultyIndex::build(&m, &ds)?;
            let f = File::create(&out).map_err(|e| Error::io(&out, e))?;
            index.write_csv(BufWriter::new(f))?;
            println!("scored {} images", index.len());
            Ok(())
        }
        Command::Plan {
            config,
            variant,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let loaded = Loaded::new(cfg)?;
            let plan = make_session_plan(&loaded.config.plan, &loaded.index, variant, seed)?;
            match out {
                Some(p) => write_json(&p, &plan),
                None => {
                    println!("{}", serde_json::to_string_pretty(&plan)?);
                    Ok(())
                }
            }
        }
        Command::Simulate {
            config,
            variants,
            n,
            seed,
            out,
            log,
            http,
            sigma,
            lr,
            temperature,
            features,
        } => {
            let lc = learner_config(sigma, lr, temperature, &features)?;
            simulate(config.as_deref(), &variants, n, seed, &out, log.as_deref(), http, lc)
        }
        Command::Analyze {
            log,
            out,
            plots_dir,
            chance,
            attention_threshold,
            window,
            seed,
        } => analyze(
            &log,
            &out,
            plots_dir.as_deref(),
            chance,
            attention_threshold,
            window,
            seed,
        ),
        Command::Serve { config, port, host } => {
            let cfg = load_config(Some(&config))?;
            let log = cfg
                .data
                .event_log
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("{}-events.jsonl", cfg.experiment_id)));
            let loaded = Loaded::new(cfg)?;
            let service = Arc::new(loaded.service(Some(&log), Arc::new(SystemClock))?);
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::invalid(format!("bad listen address: {e}")))?;
            eprintln!(
                "serving {} on http://{addr} (log {})",
                loaded.config.experiment_id,
                log.display()
            );
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(lwise_server::serve(service, addr))?;
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
