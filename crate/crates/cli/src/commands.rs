use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gracaps::attacks::{success_rate, AttackMode, EPSILONS};
use gracaps::checkpoint::{write_atomic, Checkpoint};
use gracaps::dataset::{load_split, LabeledImageSet};
use gracaps::export::{bounds_line, contact_sheet, image_to_pgm, map_to_csv, map_to_pgm};
use gracaps::interpret::{aopc as aopc_curve, explain as explain_map, Method, PATCH};
use gracaps::kv::Document;
use gracaps::trainer::{evaluate, metrics_csv, perturb_capsule_sweep, sweep_deltas, Decoder, TrainState};
use gracaps::{rng, CapsNet, Error, ModelConfig, Result};

use crate::run_config::RunConfig;
use crate::{AopcArgs, AttackArgs, ConfigArgs, EvalArgs, ExplainArgs, PerturbArgs, Preset, TrainArgs};

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Outcome of layering presets, files and flags.
struct Resolved {
    run: RunConfig,
    /// Whether any model key was given explicitly.
    model_keys: bool,
}

fn resolve(args: &ConfigArgs, flags: Vec<(&str, Option<String>)>) -> Result<Resolved> {
    let mut run = match args.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Reference => RunConfig::reference(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        pairs.extend(Document::parse(&text)?.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    }
    for item in &args.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| config_err("set", format!("`{item}` is not KEY=VALUE")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let common = [
        ("dataset", args.dataset.clone()),
        ("data_dir", args.data_dir.as_ref().map(|p| p.display().to_string())),
        ("out_dir", args.out_dir.as_ref().map(|p| p.display().to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("test_limit", args.test_limit.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
    ];
    for (k, v) in common.into_iter().chain(flags) {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    }
    for (k, v) in &pairs {
        run.set(k, v)?;
    }
    let given = |key: &str| pairs.iter().any(|(k, _)| k == key);
    let last = |key: &str| pairs.iter().rposition(|(k, _)| k == key);
    // Keep the primary capsule layer consistent with the heads and input
    // dimension unless the conv stack was spelled out after them.
    if last("heads").max(last("capsule_dim_in")) > last("conv") {
        let channels = run.model.heads * run.model.capsule_dim_in;
        if let Some(last) = run.model.conv.last_mut() {
            last.out_channels = channels;
        }
    }
    // Shifted copies help digits but blur garment textures.
    if !given("max_shift") && run.dataset != "mnist" {
        run.train.max_shift = 0;
    }
    if !given("grid_side") {
        if let Some(k) = run.model.conv_output_side() {
            run.model.grid_side = k;
        }
    }
    run.validate()?;
    Ok(Resolved {
        model_keys: pairs.iter().any(|(k, _)| ModelConfig::KEYS.contains(&k.as_str())),
        run,
    })
}

fn out_dir(run: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&run.out_dir).map_err(io_err(&run.out_dir))?;
    Ok(&run.out_dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_resolved(run: &RunConfig, command: &str, extra: &[(&str, String)]) -> Result<()> {
    let mut doc = run.to_kv();
    for (k, v) in extra {
        doc.set(*k, v)?;
    }
    write_text(&out_dir(run)?.join(format!("{command}.config.kv")), &doc.to_string())
}

fn split(run: &RunConfig, train: bool) -> Result<LabeledImageSet> {
    let set = load_split(&run.data_dir, &run.dataset, train)?;
    let limit = if train { run.train_limit } else { run.test_limit };
    if limit > 0 && limit < set.len() {
        set.take(limit)
    } else {
        Ok(set)
    }
}

struct Loaded {
    run: RunConfig,
    model: CapsNet,
    decoder: Option<Decoder>,
}

/// Loads a checkpoint. Its embedded config wins unless model keys were
/// given, in which case they must agree with it.
fn load(args: &ConfigArgs, checkpoint: &Path) -> Result<Loaded> {
    let Resolved { mut run, model_keys } = resolve(args, vec![])?;
    let ck = Checkpoint::load(checkpoint, model_keys.then_some(&run.model))?;
    run.model = ck.config.clone();
    let decoder = ck.decoder.map(|p| Decoder::from_params(&ck.config, p)).transpose()?;
    Ok(Loaded {
        model: CapsNet::from_params(ck.config, ck.model)?,
        decoder,
        run,
    })
}

fn parse_list<T: std::str::FromStr<Err = String>>(field: &str, text: &str) -> Result<Vec<T>> {
    let items: Vec<T> = text
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| config_err(field, e)))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(config_err(field, "is empty"));
    }
    Ok(items)
}

/// `3`, `0..9` (inclusive), `1,4,7`, or a mix.
pub fn parse_indices(field: &str, text: &str) -> Result<Vec<usize>> {
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| config_err(field, format!("`{s}`: {e}")))
    };
    let mut out = Vec::new();
    for part in text.split(',') {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(config_err(field, format!("empty range `{part}`")));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    Ok(out)
}

fn check_index(data: &LabeledImageSet, i: usize) -> Result<()> {
    if i >= data.len() {
        return Err(Error::Contract(format!("image index {i} outside the {} test images", data.len())));
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let flags = vec![
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| format!("{v:?}"))),
        ("heads", a.heads.map(|v| v.to_string())),
        ("aggregation", a.aggregation.clone()),
        ("train_limit", a.train_limit.map(|v| v.to_string())),
        ("max_shift", a.max_shift.map(|v| v.to_string())),
    ];
    let run = resolve(&a.cfg, flags)?.run;
    let dir = out_dir(&run)?.to_path_buf();
    write_resolved(&run, "train", &[])?;
    let train = split(&run, true)?;
    let test = split(&run, false)?;
    eprintln!(
        "training {} on {} {} images ({} test), {} epochs",
        run.model.aggregation,
        train.len(),
        run.dataset,
        test.len(),
        run.train.epochs
    );
    let mut state = TrainState::init(run.model.clone(), run.train.seed)?;
    let started = Instant::now();
    state.train(&train, Some(&test), &run.train, |row| {
        eprintln!(
            "epoch {:>3} {:<5} loss {:.5} accuracy {:.4}  [{:.0}s]",
            row.epoch,
            row.split,
            row.loss,
            row.accuracy,
            started.elapsed().as_secs_f64()
        );
    })?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&state.metrics))?;
    let ckpt = dir.join("model.ckpt");
    state.to_checkpoint().save(&ckpt)?;
    if let Some(last) = state.metrics.iter().rev().find(|r| r.split == "test") {
        println!("test accuracy {:.6}", last.accuracy);
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let Loaded { run, model, decoder } = load(&a.cfg, &a.checkpoint)?;
    write_resolved(&run, "eval", &[("checkpoint", a.checkpoint.display().to_string())])?;
    let test = split(&run, false)?;
    let ev = evaluate(
        &model,
        decoder.as_ref(),
        &test,
        run.train.batch_size,
        run.train.reconstruction_weight,
    )?;
    let m = model.config().classes;
    let (mut n, mut hit) = (vec![0usize; m], vec![0usize; m]);
    for (&p, &y) in ev.predictions.iter().zip(test.labels()) {
        n[y] += 1;
        hit[y] += usize::from(p == y);
    }
    let mut csv = String::from("class,n,correct,accuracy\n");
    for c in 0..m {
        let acc = if n[c] == 0 { f64::NAN } else { hit[c] as f64 / n[c] as f64 };
        writeln!(csv, "{c},{},{},{acc:.6}", n[c], hit[c]).expect("string write");
    }
    writeln!(csv, "all,{},{},{:.6}", ev.n, ev.correct, ev.accuracy).expect("string write");
    write_text(&out_dir(&run)?.join("eval.csv"), &csv)?;
    println!("accuracy {:.6} ({}/{}) loss {:.6}", ev.accuracy, ev.correct, ev.n, ev.loss);
    Ok(())
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let Loaded { run, model, .. } = load(&a.cfg, &a.checkpoint)?;
    let indices = parse_indices("images", &a.images)?;
    let methods: Vec<Method> = parse_list("methods", &a.methods)?;
    write_resolved(
        &run,
        "explain",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("images", a.images.clone()),
            ("methods", a.methods.clone()),
            ("ig_steps", a.ig_steps.to_string()),
        ],
    )?;
    let test = split(&run, false)?;
    let dir = out_dir(&run)?.join("explain");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for &i in &indices {
        check_index(&test, i)?;
        let image = test.image(i)?;
        let class = model.predict_one(&image)?;
        write_atomic(&dir.join(format!("img{i:05}_input.pgm")), &image_to_pgm(&image)?)?;
        for &method in &methods {
            let seed = rng::derive(run.train.seed, &[i as u64]);
            let map = explain_map(&model, &image, class, method, seed, a.ig_steps)?;
            let stem = dir.join(format!("img{i:05}_{method}"));
            let (pgm, lo, hi) = map_to_pgm(&map.values)?;
            write_atomic(&stem.with_extension("pgm"), &pgm)?;
            write_text(&stem.with_extension("csv"), &map_to_csv(&map.values)?)?;
            write_text(&stem.with_extension("txt"), &bounds_line(lo, hi))?;
            println!("image {i} label {} predicted {class} {method}: {}", test.labels()[i], stem.display());
        }
    }
    Ok(())
}

pub fn aopc(a: AopcArgs) -> Result<()> {
    let Loaded { run, model, .. } = load(&a.cfg, &a.checkpoint)?;
    let methods: Vec<Method> = parse_list("methods", &a.methods)?;
    if a.images == 0 || a.steps == 0 {
        return Err(config_err("images", "image and step counts must be positive"));
    }
    write_resolved(
        &run,
        "aopc",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("images", a.images.to_string()),
            ("methods", a.methods.clone()),
            ("steps", a.steps.to_string()),
            ("ig_steps", a.ig_steps.to_string()),
        ],
    )?;
    let test = split(&run, false)?;
    let ev = evaluate(&model, None, &test, run.train.batch_size, 0.0)?;
    let chosen: Vec<usize> = (0..test.len())
        .filter(|&i| ev.predictions[i] == test.labels()[i])
        .take(a.images)
        .collect();
    if chosen.len() < a.images {
        eprintln!("only {} correctly classified test images available", chosen.len());
    }
    let images: Vec<_> = chosen.iter().map(|&i| test.image(i)).collect::<Result<_>>()?;
    let ids: Vec<u64> = chosen.iter().map(|&i| i as u64).collect();
    let dir = out_dir(&run)?.to_path_buf();
    let mut summary = String::from("method,images,steps,aopc\n");
    for method in methods {
        let started = Instant::now();
        let maps = chosen
            .iter()
            .zip(&images)
            .map(|(&i, img)| {
                let seed = rng::derive(run.train.seed, &[i as u64]);
                explain_map(&model, img, test.labels()[i], method, seed, a.ig_steps).map(|m| m.values)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut res = aopc_curve(&model, &images, &maps, &ids, a.steps, PATCH, run.train.seed)?;
        res.method = Some(method);
        write_text(&dir.join(format!("aopc_{method}.csv")), &res.csv())?;
        writeln!(summary, "{method},{},{},{:.6}", res.images, a.steps, res.aopc).expect("string write");
        println!(
            "{method:<6} aopc {:.6} over {} images  [{:.0}s]",
            res.aopc,
            res.images,
            started.elapsed().as_secs_f64()
        );
    }
    write_text(&dir.join("aopc.csv"), &summary)
}

pub fn attack(a: AttackArgs) -> Result<()> {
    let Loaded { run, model, .. } = load(&a.cfg, &a.checkpoint)?;
    let modes: Vec<AttackMode> = parse_list("mode", &a.mode)?;
    write_resolved(
        &run,
        "attack",
        &[("checkpoint", a.checkpoint.display().to_string()), ("mode", a.mode.clone())],
    )?;
    let test = split(&run, false)?;
    let dir = out_dir(&run)?.to_path_buf();
    for mode in modes {
        let report = success_rate(&model, &test, &EPSILONS, mode, run.train.seed, run.train.batch_size)?;
        write_text(&dir.join(format!("attack_{mode}.csv")), &report.csv())?;
        for r in &report.rows {
            println!(
                "{mode} eps {:.2}: {}/{} succeeded ({:.4}), max |x'-x| {:.6}, in range {}",
                r.epsilon, r.n_success, r.n_evaluated, r.success_rate, r.max_perturbation, r.in_range
            );
        }
    }
    Ok(())
}

pub fn perturb(a: PerturbArgs) -> Result<()> {
    let Loaded { run, model, decoder } = load(&a.cfg, &a.checkpoint)?;
    let decoder =
        decoder.ok_or_else(|| Error::Contract(format!("{} has no decoder to reconstruct with", a.checkpoint.display())))?;
    let dims = parse_indices("dims", &a.dims)?;
    write_resolved(
        &run,
        "perturb",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("index", a.index.to_string()),
            ("dims", a.dims.clone()),
        ],
    )?;
    let test = split(&run, false)?;
    check_index(&test, a.index)?;
    let image = test.image(a.index)?;
    let dir: PathBuf = out_dir(&run)?.join("perturb");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_atomic(&dir.join("input.pgm"), &image_to_pgm(&image)?)?;
    let deltas = sweep_deltas();
    let mut layout = String::from("row,dim,column,delta,file\n");
    let mut rows = Vec::with_capacity(dims.len());
    for (r, &d) in dims.iter().enumerate() {
        let frames = perturb_capsule_sweep(&model, &decoder, &image, d)?;
        for (k, (frame, delta)) in frames.iter().zip(&deltas).enumerate() {
            let name = format!("dim{d:02}_step{k:02}.pgm");
            write_atomic(&dir.join(&name), &image_to_pgm(frame)?)?;
            writeln!(layout, "{r},{d},{k},{delta:.2},{name}").expect("string write");
        }
        rows.push(frames);
    }
    write_atomic(&dir.join("sheet.pgm"), &contact_sheet(&rows)?)?;
    write_text(&dir.join("layout.csv"), &layout)?;
    println!("wrote {} sweeps to {}", dims.len(), dir.display());
    Ok(())
}
