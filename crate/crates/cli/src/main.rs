use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use log::info;

use matanet::config::{Config, KEYS};
use matanet::data::checkpoint::{load_checkpoint_for, save_checkpoint};
use matanet::data::features::{write_feature_file, FeatureFile};
use matanet::data::images::Manifest;
use matanet::data::synthetic::{synthetic_benchmark, to_bytes};
use matanet::data::{load_splits, DatasetSplit, Splits};
use matanet::episode::{episode_rng, sample_episode};
use matanet::eval::evaluate;
use matanet::gradcheck::full_suite;
use matanet::layers::Mode;
use matanet::train::{train, TrainEvent};
use matanet::{Error, ModelState, Result, Tensor};

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("key = value configuration file")];
    for &key in KEYS {
        let mut arg = Arg::new(key).long(key).value_name("VALUE").hide(true).overrides_with(key);
        if key.contains('_') {
            arg = arg.alias(key.replace('_', "-"));
        }
        args.push(arg);
    }
    args
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn cli() -> Command {
    let keys_help = format!("Every configuration key can be set with --<key> <value>: {}", KEYS.join(", "));
    Command::new("matanet")
        .about("Few-shot image classification with multi-scale task attention")
        .after_help(keys_help)
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("train")
                .about("Episodic training; writes a checkpoint")
                .args(config_args())
                .arg(path_arg("out", "checkpoint to write").required(true))
                .arg(path_arg("log", "also append training log lines to this file")),
        )
        .subcommand(
            Command::new("eval")
                .about("Repeated test-episode evaluation with 95% confidence intervals")
                .args(config_args())
                .arg(path_arg("checkpoint", "trained model; a fresh model from `seed` when omitted"))
                .arg(path_arg("report", "write the key-value report here"))
                .arg(path_arg("csv", "write per-repeat accuracy rows here"))
                .after_help("`--episodes` sets eval_episodes for this subcommand."),
        )
        .subcommand(
            Command::new("explain")
                .about("Print the support LRs selected by each query LR")
                .args(config_args())
                .arg(path_arg("checkpoint", "trained model; a fresh model from `seed` when omitted"))
                .arg(
                    Arg::new("episode")
                        .long("episode")
                        .value_parser(value_parser!(u64))
                        .default_value("0")
                        .help("test episode index"),
                )
                .arg(
                    Arg::new("query")
                        .long("query")
                        .value_parser(value_parser!(usize))
                        .default_value("0")
                        .help("query image within the episode"),
                )
                .arg(
                    Arg::new("scale")
                        .long("scale")
                        .value_parser(value_parser!(usize))
                        .default_value("1")
                        .help("scale 1-5"),
                )
                .arg(path_arg("out", "write the lines here instead of stdout")),
        )
        .subcommand(
            Command::new("synth-data")
                .about("Render the synthetic benchmark as PNG class directories plus a manifest")
                .args(config_args())
                .arg(path_arg("out", "output directory").required(true)),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference gradient suite; exit 0 only if every check passes")
                .arg(
                    Arg::new("check-seed")
                        .long("check-seed")
                        .value_parser(value_parser!(u64))
                        .default_value("1"),
                )
                .arg(Arg::new("verbose").long("verbose").action(ArgAction::SetTrue)),
        )
        .subcommand(
            Command::new("extract-features")
                .about("Run the backbone over a split and write a feature file")
                .args(config_args())
                .arg(path_arg("checkpoint", "trained model; a fresh model from `seed` when omitted"))
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["train", "test"])
                        .default_value("test"),
                )
                .arg(path_arg("out", "feature file to write").required(true)),
        )
}

fn build_config(m: &ArgMatches, eval_aliases: bool) -> Result<Config> {
    let mut c = Config::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        c = Config::load(path)?;
    }
    for &key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            let target = if eval_aliases && key == "episodes" { "eval_episodes" } else { key };
            c.set(target, v)?;
        }
    }
    c.validate()?;
    Ok(c)
}

fn model_for(m: &ArgMatches, config: &Config) -> Result<ModelState<f32>> {
    match m.get_one::<PathBuf>("checkpoint") {
        Some(p) => Ok(load_checkpoint_for(p, &config.arch)?.0),
        None => ModelState::init(&config.arch, config.train.seed),
    }
}

fn load_for(model: &ModelState<f32>, config: &Config, checkpoint: bool) -> Result<Splits> {
    load_splits(config, checkpoint.then_some(&model.input_norm))
}

fn write_out(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn append(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
    writeln!(f, "{line}").map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let config = build_config(m, false)?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    let log_path = m.get_one::<PathBuf>("log");
    if let Some(p) = log_path {
        let _ = fs::remove_file(p);
    }
    let splits = load_splits(&config, None)?;
    info!(
        "train split: {} classes, {} images; test split: {} classes",
        splits.train.num_classes(),
        splits.train.len(),
        splits.test.num_classes()
    );
    let mut model = ModelState::<f32>::init(&config.arch, config.train.seed)?;
    model.input_norm = splits.norm.clone();
    train(&mut model, &config, &splits.train, |event| match event {
        TrainEvent::Log(line) => {
            println!("{line}");
            match log_path {
                Some(p) => append(p, &line.to_string()),
                None => Ok(()),
            }
        }
        TrainEvent::Checkpoint { episode, model } => {
            let mut name = out.clone().into_os_string();
            name.push(format!(".{episode}"));
            save_checkpoint(Path::new(&name), model, &config)
        }
    })?;
    save_checkpoint(out, &model, &config)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let config = build_config(m, true)?;
    let model = model_for(m, &config)?;
    let splits = load_for(&model, &config, m.contains_id("checkpoint"))?;
    let report = evaluate(&model, &config.head, &config.eval, &splits.test, config.to_text())?;
    if let Some(p) = m.get_one::<PathBuf>("csv") {
        write_out(Some(p), &report.to_csv())?;
    }
    match m.get_one::<PathBuf>("report") {
        Some(p) => {
            write_out(Some(p), &report.to_text())?;
            println!(
                "accuracy {:.2} +- {:.2} % over {} x {} episodes",
                100.0 * report.mean_accuracy,
                100.0 * report.ci95,
                report.repeats,
                report.episodes
            );
            Ok(())
        }
        None => write_out(None, &report.to_text()),
    }
}

fn cmd_explain(m: &ArgMatches) -> Result<()> {
    let config = build_config(m, false)?;
    let model = model_for(m, &config)?;
    let splits = load_for(&model, &config, m.contains_id("checkpoint"))?;
    let episode = *m.get_one::<u64>("episode").expect("default");
    let q = *m.get_one::<usize>("query").expect("default");
    let scale = *m.get_one::<usize>("scale").expect("default");
    let mut rng = episode_rng(config.eval.seed, episode);
    let task = sample_episode::<f32, _>(&splits.test, config.eval.episode, &mut rng)?;
    let nq = task.query.shape()[0];
    if q >= nq {
        return Err(Error::Index {
            op: "explain",
            index: q,
            bound: nq,
        });
    }
    let mut shape = task.query.shape().to_vec();
    shape[0] = 1;
    let item = task.query.numel() / nq;
    let one = Tensor::new(shape, task.query.data()[q * item..(q + 1) * item].to_vec())?;
    let record = model.explain(&config.head, task.way(), task.shot(), &task.support, &one, scale)?;
    write_out(m.get_one::<PathBuf>("out"), &record.to_text())
}

fn write_png(path: &Path, data: &[f32], size: usize) -> Result<()> {
    let bytes = to_bytes(data);
    let plane = size * size;
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = image::Rgb([bytes[i], bytes[plane + i], bytes[2 * plane + i]]);
    }
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn cmd_synth(m: &ArgMatches) -> Result<()> {
    let config = build_config(m, false)?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    let d = &config.data;
    let size = config.arch.image_size;
    let (train, test) = synthetic_benchmark(
        d.synth_train_classes,
        d.synth_test_classes,
        d.synth_images,
        size,
        d.synth_noise,
        d.synth_distractors,
        d.synth_seed,
    );
    let mut manifest = Manifest::default();
    for split in [&train, &test] {
        for class in &split.classes {
            let dir = out.join(&class.name);
            fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            for (i, s) in class.samples.iter().enumerate() {
                write_png(&dir.join(format!("{i:04}.png")), &s.data, size)?;
            }
            manifest.splits.entry(split.name.clone()).or_default().push(class.name.clone());
        }
    }
    write_out(Some(&out.join("manifest.txt")), &manifest.to_text())?;
    println!("wrote {} + {} images to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(m: &ArgMatches) -> Result<bool> {
    let seed = *m.get_one::<u64>("check-seed").expect("default");
    let verbose = m.get_flag("verbose");
    let results = full_suite(seed)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        if verbose || !r.passed() {
            println!(
                "{} {} rel_error={:.3e} tol={:e}",
                if r.passed() { "PASS" } else { "FAIL" },
                r.name,
                r.rel_error,
                r.tolerance
            );
        }
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(ok)
}

fn cmd_extract(m: &ArgMatches) -> Result<()> {
    let config = build_config(m, false)?;
    let model = model_for(m, &config)?;
    let splits = load_for(&model, &config, m.contains_id("checkpoint"))?;
    let split: &DatasetSplit = match m.get_one::<String>("split").map(String::as_str) {
        Some("train") => &splits.train,
        _ => &splits.test,
    };
    let backbone = model
        .backbone
        .as_ref()
        .ok_or_else(|| Error::Config("extract-features needs an image model".into()))?;
    let side = backbone.output_extent(config.arch.image_size);
    let mut file = FeatureFile::new(config.arch.width as u32, side as u32, side as u32);
    for (ci, class) in split.classes.iter().enumerate() {
        for si in 0..class.samples.len() {
            let x: Tensor<f32> = split.gather(&[(ci, si)])?;
            let f = matanet::backbone::extract(&x, &model.store, backbone, Mode::Eval, &model.arch)?;
            file.push(class.id, f.into_data())?;
        }
    }
    write_feature_file(m.get_one::<PathBuf>("out").expect("required"), &file)?;
    println!("wrote {} records of {}x{}x{}", file.records.len(), file.channels, side, side);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m).map(|_| true),
        Some(("eval", m)) => cmd_eval(m).map(|_| true),
        Some(("explain", m)) => cmd_explain(m).map(|_| true),
        Some(("synth-data", m)) => cmd_synth(m).map(|_| true),
        Some(("gradcheck", m)) => cmd_gradcheck(m),
        Some(("extract-features", m)) => cmd_extract(m).map(|_| true),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
