use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use r2n2::carve::{carve_sample, compare as run_compare, format_compare_csv, Crossover};
use r2n2::checkpoint::{self, Checkpoint};
use r2n2::config::RunConfig;
use r2n2::error::Error;
use r2n2::image::{read_pgm, write_pgm, Image};
use r2n2::manifest::Manifest;
use r2n2::objective::{gate_mosaic, iou_boolean, threshold as apply_threshold, VoxelGrid};
use r2n2::params::Ctx;
use r2n2::recurrence::GateName;
use r2n2::selfcheck;
use r2n2::synth::{build_dataset, Family, TextureLevel};
use r2n2::tensor::{OpKind, Tensor};
use r2n2::training::{
    evaluate, format_eval_csv, format_metric_row, load_samples, parse_metrics_csv, LoadedSample, Trainer,
    METRICS_HEADER,
};
use r2n2::voxl::write_voxl;

use crate::ConfigArgs;

/// Exit code 1 for bad input, 2 for everything that went wrong at run time.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::ShapeMismatch { .. }
            | Error::InvalidArgument { .. }
            | Error::Config(_)
            | Error::NonScalarOutput(_) => 1,
            Error::ForeignTensor
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Data(_)
            | Error::Diverged { .. } => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Res<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn emit(text: &str, out: Option<&Path>) -> Res {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Res<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Failure::invalid(format!("--set expects KEY=VALUE, got `{kv}`")));
        };
        match k.trim() {
            "preset" => cfg.apply_preset(v.trim())?,
            k => cfg.set(k, v)?,
        }
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(data: &Path, name: &str) -> Res<Manifest> {
    Ok(Manifest::read(&data.join(format!("{name}.tsv")))?)
}

fn texture(name: &str) -> Res<TextureLevel> {
    TextureLevel::parse(name).ok_or_else(|| Failure::invalid(format!("unknown texture level `{name}`")))
}

pub fn synth(args: &ConfigArgs, out: &Path, seed: Option<u64>) -> Res {
    let cfg = load_config(args, seed)?;
    let summary = build_dataset(&cfg.synth, out)?;
    println!("manifest: {}", summary.manifest.display());
    println!(
        "train: {}  test: {}  images: {}",
        summary.train, summary.test, summary.images
    );
    Ok(())
}

pub fn metrics_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".metrics.csv");
    PathBuf::from(s)
}

pub fn train(args: &ConfigArgs, data: &Path, out: &Path, resume: Option<&Path>, seed: Option<u64>) -> Res {
    let mut cfg = load_config(args, seed)?;
    let train_set = load_samples(&manifest(data, "train")?)?;
    let heldout = load_samples(&manifest(data, "test")?)?;
    let log = metrics_path(out);
    let mut trainer = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if args.config.is_none() && args.set.is_empty() && seed.is_none() {
                cfg = ck.config.clone();
            }
            if ck.config.network != cfg.network || ck.config.seed != cfg.seed {
                return Err(Failure::invalid(format!(
                    "{} was trained with a different network or seed than the given config",
                    path.display()
                )));
            }
            let trainer = Trainer::resume(ck.net, ck.store, ck.adam, &cfg.train, &train_set)?;
            let kept = match fs::read_to_string(metrics_path(path)) {
                Ok(text) => parse_metrics_csv(&text)?
                    .into_iter()
                    .filter(|r| r.iteration <= trainer.iteration())
                    .collect(),
                Err(_) => Vec::new(),
            };
            let mut text = format!("{METRICS_HEADER}\n");
            for r in &kept {
                text.push_str(&format_metric_row(r));
                text.push('\n');
            }
            write_text(&log, &text)?;
            trainer
        }
        None => {
            write_text(&log, &format!("{METRICS_HEADER}\n"))?;
            Trainer::new(&cfg.network, &cfg.train, &train_set)?
        }
    };
    let mut file = fs::OpenOptions::new()
        .append(true)
        .open(&log)
        .map_err(|e| io_err(&log, e))?;
    let eval_every = cfg.train.eval_every;
    trainer.run(&heldout, |t, row| {
        writeln!(file, "{}", format_metric_row(row)).map_err(|source| Error::Io {
            path: log.clone(),
            source,
        })?;
        match row.heldout_iou {
            Some(iou) => eprintln!(
                "iteration {:>6}  loss {:.5}  heldout iou {:.4}",
                row.iteration, row.mean_loss, iou
            ),
            None => eprintln!("iteration {:>6}  loss {:.5}", row.iteration, row.mean_loss),
        }
        if eval_every > 0 && row.iteration % eval_every == 0 {
            checkpoint::save(out, &cfg, &t.store, &t.adam)?;
        }
        Ok(())
    })?;
    checkpoint::save(out, &cfg, &trainer.store, &trainer.adam)?;
    println!("checkpoint: {}", out.display());
    println!("metrics: {}", log.display());
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, views: Option<Vec<usize>>, threshold: Option<f64>, out: Option<&Path>) -> Res {
    let ck = checkpoint::load(ckpt)?;
    let views = views.unwrap_or_else(|| ck.config.eval.views.clone());
    let t = threshold.unwrap_or(ck.config.eval.threshold);
    let samples = load_samples(&manifest(data, "test")?)?;
    let rows = evaluate(&ck.net, &ck.store, &samples, &views, t)?;
    emit(&format_eval_csv(&rows), out)
}

fn read_images(ck: &Checkpoint, paths: &[PathBuf]) -> Res<Vec<Tensor>> {
    let size = ck.config.network.encoder.input_size;
    paths
        .iter()
        .map(|p| {
            let img = read_pgm(p)?;
            if img.width() != size || img.height() != size {
                return Err(Failure::invalid(format!(
                    "{} is {}x{} but the network expects {size}x{size}",
                    p.display(),
                    img.width(),
                    img.height()
                )));
            }
            Ok(img.to_tensor())
        })
        .collect()
}

/// `dir/stem.voxl` becomes `dir/stem.<tag>.voxl`.
pub fn sibling(out: &Path, tag: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.{tag}.voxl"))
}

fn grid_of(ctx: &Ctx<'_>, v: r2n2::tensor::Var) -> Res<VoxelGrid> {
    let p = ctx.tape.value(v);
    let d = p.shape()[1];
    Ok(VoxelGrid::from_tensor(&p.clone().reshape([d, d, d])?)?)
}

fn ensure_parent(path: &Path) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}

pub fn reconstruct(ckpt: &Path, images: &[PathBuf], out: &Path, threshold: Option<f64>, per_step: bool) -> Res {
    let ck = checkpoint::load(ckpt)?;
    let t = threshold.unwrap_or(ck.config.eval.threshold);
    if !(0.0..1.0).contains(&t) {
        return Err(Failure::invalid(format!("threshold {t} is outside [0, 1)")));
    }
    let imgs = read_images(&ck, images)?;
    let mut ctx = Ctx::new(&ck.store);
    let views = ck.net.stage_views(&mut ctx, &imgs)?;
    let (fwd, steps) = ck.net.forward_per_step(&mut ctx, &views)?;
    ensure_parent(out)?;
    let probs = grid_of(&ctx, fwd.probs)?;
    write_voxl(out, &probs)?;
    let occupied = sibling(out, "occupied");
    write_voxl(&occupied, &apply_threshold(&probs, t)?)?;
    println!("{}", out.display());
    println!("{}", occupied.display());
    if per_step {
        for (n, &p) in steps.iter().enumerate() {
            let path = sibling(out, &format!("step{}", n + 1));
            write_voxl(&path, &grid_of(&ctx, p)?)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

pub fn carve(data: &Path, views: usize, level: &str, out: Option<&Path>) -> Res {
    let level = texture(level)?;
    let samples = load_samples(&manifest(data, &format!("test-{}", level.name()))?)?;
    let mut text = String::from("id,iou\n");
    for s in &samples {
        let hull = carve_sample(s, views)?;
        text.push_str(&format!("{},{:.6}\n", s.id, iou_boolean(&hull, &s.target)?));
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            write_voxl(&dir.join(format!("{}.voxl", s.id)), &hull)?;
        }
    }
    print!("{text}");
    Ok(())
}

fn keep_families(samples: Vec<LoadedSample>, families: &[Family]) -> Vec<LoadedSample> {
    samples
        .into_iter()
        .filter(|s| Family::of_id(&s.id).is_some_and(|f| families.contains(&f)))
        .collect()
}

pub fn compare(
    ckpt: &Path,
    data: &Path,
    views: Option<Vec<usize>>,
    textures: Option<Vec<String>>,
    families: Option<Vec<String>>,
    threshold: Option<f64>,
    out: Option<&Path>,
) -> Res {
    let ck = checkpoint::load(ckpt)?;
    let views = views.unwrap_or_else(|| ck.config.compare.views.clone());
    let t = threshold.unwrap_or(ck.config.compare.threshold);
    let levels = match textures {
        Some(names) => names.iter().map(|n| texture(n)).collect::<Res<Vec<_>>>()?,
        None => ck.config.compare.textures.clone(),
    };
    let families = match families {
        Some(names) => names
            .iter()
            .map(|n| Family::parse(n).ok_or_else(|| Failure::invalid(format!("unknown family `{n}`"))))
            .collect::<Res<Vec<_>>>()?,
        None => Family::ALL.to_vec(),
    };
    let mut sets = Vec::new();
    for level in levels {
        let m = manifest(data, &format!("test-{}", level.name())).map_err(|f| {
            Failure::runtime(format!(
                "texture level `{}` was not rendered: {}",
                level.name(),
                f.message
            ))
        })?;
        let kept = keep_families(load_samples(&m)?, &families);
        if kept.is_empty() {
            return Err(Failure::runtime(format!(
                "the `{}` test split has no samples of the requested families",
                level.name()
            )));
        }
        sets.push((level, kept));
    }
    let rows = run_compare(&ck.net, &ck.store, &sets, &views, t)?;
    let mut text = format_compare_csv(&rows);
    let (few, many) = (views.iter().min().copied(), views.iter().max().copied());
    if let (Some(few), Some(many)) = (few, many) {
        for (level, _) in &sets {
            if let Some(c) = Crossover::from_rows(&rows, *level, few, many) {
                text.push_str(&format!("# texture {}\n", level.name()));
                text.push_str(&c.notes(ck.config.seed));
            }
        }
    }
    emit(&text, out)
}

fn gate_name(name: &str) -> Res<GateName> {
    Ok(match name {
        "input" => GateName::Input,
        "forget" => GateName::Forget,
        "update" => GateName::Update,
        "reset" => GateName::Reset,
        _ => return Err(Failure::invalid(format!("unknown gate `{name}`"))),
    })
}

pub fn gates(ckpt: &Path, images: &[PathBuf], channel: usize, out: &Path, gate: Option<&str>, scale: usize) -> Res {
    let ck = checkpoint::load(ckpt)?;
    let hidden = ck.config.network.recurrence.hidden;
    if channel >= hidden {
        return Err(Failure::invalid(format!(
            "channel {channel} is out of range for {hidden} hidden channels"
        )));
    }
    if scale == 0 {
        return Err(Failure::invalid("--scale must be >= 1"));
    }
    let wanted = gate.map(gate_name).transpose()?;
    let imgs = read_images(&ck, images)?;
    let mut ctx = Ctx::new(&ck.store);
    let views = ck.net.stage_views(&mut ctx, &imgs)?;
    let fwd = ck.net.forward(&mut ctx, &views)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let n = ck.config.network.recurrence.grid;
    for (t, step) in fwd.run.steps.iter().enumerate() {
        let var = match wanted {
            Some(g) => step.internals.gate(g),
            None => step.internals.input_like(),
        }
        .ok_or_else(|| Failure::invalid("this cell has no such gate"))?;
        let g = ctx.tape.value(var);
        let cube = n * n * n;
        let data = g.data()[channel * cube..(channel + 1) * cube].to_vec();
        let mosaic = gate_mosaic(&Tensor::new([n, n, n], data)?)?;
        let img = Image::from_tensor(&mosaic)?.upscale(scale);
        let path = out.join(format!("step{}.pgm", t + 1));
        write_pgm(&path, &img)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn report(metrics: &Path) -> Res {
    let text = fs::read_to_string(metrics).map_err(|e| io_err(metrics, e))?;
    let rows = parse_metrics_csv(&text)?;
    let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
        println!("no rows");
        return Ok(());
    };
    println!("rows: {}", rows.len());
    println!("iterations: {}", last.iteration);
    println!("loss: {:.5} -> {:.5}", first.mean_loss, last.mean_loss);
    let evals: Vec<(u64, f64)> = rows
        .iter()
        .filter_map(|r| r.heldout_iou.map(|i| (r.iteration, i)))
        .collect();
    if let Some(&(it, iou)) = evals.last() {
        println!("heldout iou: {iou:.4} at iteration {it}");
    }
    if let Some(&(it, iou)) = evals.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
        println!("best heldout iou: {iou:.4} at iteration {it}");
    }
    Ok(())
}

pub fn selfcheck(fault: Option<&str>) -> Res {
    let fault = fault
        .map(|n| OpKind::from_name(n).ok_or_else(|| Failure::invalid(format!("unknown op `{n}`"))))
        .transpose()?;
    let checks = selfcheck::run_all(fault);
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {}  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Failure::runtime(format!("{failed} self-checks failed")));
    }
    Ok(())
}
